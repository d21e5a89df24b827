"""Per-point and compressed point-to-plane factors.

A depth point p measured in keyframe i's camera frame and associated with a
world plane gives the scalar residual ``pi_local . [p; 1]`` where
``pi_local`` is the plane expressed in the camera frame through the
optimized pose. Since the residual is linear in the homogeneous point, N
points merge into a constant 4x4 observation matrix ``sum [p;1][p;1]^T``
whose root yields an equivalent factor of rank <= 4.

State Jacobian column order: ``[rot(3), trans(3), plane(3)]`` (9 columns).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptyPointSet, MixedKeys
from .homography import EIG_CUTOFF, _AXIS_SKEW, decompose_gram


@dataclass(frozen=True)
class PointToPlanePointFactor:
    keyframe: int
    plane: int
    point: np.ndarray  # (3,) camera-frame depth point, meters
    sigma: float = 1.0  # meters


@dataclass(frozen=True)
class CompressedPointToPlaneFactor:
    keyframe: int
    plane: int
    gram: np.ndarray  # (4, 4) sum over homogeneous (whitened) points
    root: np.ndarray  # (4, rank)
    count: int

    @property
    def rank(self) -> int:
        return self.root.shape[1]


def build_compressed_point_to_plane(points, keyframe: int, plane: int,
                                    sigma: float = 1.0,
                                    cutoff: float = EIG_CUTOFF) -> CompressedPointToPlaneFactor:
    """Merge camera-frame points on one plane seen in one keyframe."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if points.shape[0] == 0:
        raise EmptyPointSet("point-to-plane compression needs at least one point")
    hom = np.concatenate([points, np.ones((points.shape[0], 1))], axis=1) / sigma
    gram = hom.T @ hom
    gram = 0.5 * (gram + gram.T)
    return CompressedPointToPlaneFactor(
        keyframe, plane, gram=gram, root=decompose_gram(gram, cutoff), count=points.shape[0]
    )


def local_plane(states, kf_idx, plane_idx):
    """Plane 4-vectors [n_c; d_c] in camera frames, [G, 4]."""
    pi, _ = _local_plane_core(states, kf_idx, plane_idx, want_jacobian=False)
    return pi


def local_plane_jacobian(states, kf_idx, plane_idx):
    """(pi [G, 4], dpi [G, 4, 9]) with columns [rot(3), trans(3), plane(3)]."""
    return _local_plane_core(states, kf_idx, plane_idx, want_jacobian=True)


def _local_plane_core(states, kf_idx, plane_idx, want_jacobian):
    kf_idx = np.atleast_1d(np.asarray(kf_idx, dtype=np.int64))
    plane_idx = np.atleast_1d(np.asarray(plane_idx, dtype=np.int64))
    G = kf_idx.shape[0]

    R = states.rotations()[kf_idx]
    R_ic = states.cam_to_imu.rotation.matrix()
    t_ic = states.cam_to_imu.translation
    Rc = R @ R_ic
    lever = R @ t_ic
    tc = lever + states.kf_trans[kf_idx]

    vec = states.planes[plane_idx]
    dmag = np.linalg.norm(vec, axis=1)
    dsafe = np.where(dmag < 1e-12, 1.0, dmag)
    n = vec / dsafe[:, None]

    pi = np.empty((G, 4))
    pi[:, :3] = np.einsum("gba,gb->ga", Rc, n)  # Rc^T n
    pi[:, 3] = np.einsum("gk,gk->g", n, tc) + dmag
    if not want_jacobian:
        return pi, None

    dpi = np.zeros((G, 4, 9))
    for k in range(3):  # keyframe rotation
        E = _AXIS_SKEW[k]
        # d(Rc^T n) = Rc^T skew(n) e_k ; d(n . tc) = n . (E lever)
        dpi[:, :3, k] = np.einsum("gba,gbc,gc->ga", Rc, _skew_batch(n), _e(k, G))
        dpi[:, 3, k] = np.einsum("gk,gk->g", n, lever @ E.T)
    dpi[:, 3, 3:6] = n  # keyframe translation only moves the offset
    proj = (np.eye(3)[None] - np.einsum("ga,gb->gab", n, n)) / dsafe[:, None, None]
    for k in range(3):  # plane closest-point vector
        dn = proj[:, :, k]
        dpi[:, :3, 6 + k] = np.einsum("gba,gb->ga", Rc, dn)
        dpi[:, 3, 6 + k] = np.einsum("gk,gk->g", dn, tc) + n[:, k]
    return pi, dpi


def _skew_batch(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _e(k, G):
    e = np.zeros(3)
    e[k] = 1.0
    return np.broadcast_to(e, (G, 3))


class PointToPlaneBundle:
    """Per-point point-to-plane factors grouped by (keyframe, plane)."""

    def __init__(self, point_factors):
        self.factors = list(point_factors)
        keys = {}
        group_kf, group_pl = [], []
        group_of = np.empty(len(point_factors), dtype=np.int64)
        hom = np.empty((len(point_factors), 4))
        for idx, f in enumerate(point_factors):
            key = (f.keyframe, f.plane)
            g = keys.get(key)
            if g is None:
                g = len(group_kf)
                keys[key] = g
                group_kf.append(f.keyframe)
                group_pl.append(f.plane)
            group_of[idx] = g
            hom[idx, :3] = np.asarray(f.point, dtype=float) / f.sigma
            hom[idx, 3] = 1.0 / f.sigma
        self.kf_idx = np.array(group_kf, dtype=np.int64)
        self.plane_idx = np.array(group_pl, dtype=np.int64)
        self.group_of = group_of
        self.hom = hom

    def __len__(self):
        return self.hom.shape[0]

    @property
    def n_groups(self):
        return self.kf_idx.shape[0]

    def residuals(self, states):
        pi = local_plane(states, self.kf_idx, self.plane_idx)
        return np.einsum("nk,nk->n", self.hom, pi[self.group_of])

    def cost(self, states) -> float:
        r = self.residuals(states)
        return 0.5 * float(r @ r)

    def linearize(self, states):
        """(r [N], J [N,9])."""
        pi, dpi = local_plane_jacobian(states, self.kf_idx, self.plane_idx)
        r = np.einsum("nk,nk->n", self.hom, pi[self.group_of])
        J = np.einsum("nk,nkc->nc", self.hom, dpi[self.group_of])
        return r, J


class CompressedPointToPlaneBundle:
    """Batch of compressed point-to-plane factors (roots padded to 4 cols)."""

    def __init__(self, factors):
        G = len(factors)
        self.factors = list(factors)
        self.kf_idx = np.array([f.keyframe for f in factors], dtype=np.int64)
        self.plane_idx = np.array([f.plane for f in factors], dtype=np.int64)
        self.roots = np.zeros((G, 4, 4))
        for g, f in enumerate(factors):
            self.roots[g, :, : f.rank] = f.root
        self.counts = np.array([f.count for f in factors], dtype=np.int64)

    def __len__(self):
        return len(self.factors)

    def residuals(self, states):
        pi = local_plane(states, self.kf_idx, self.plane_idx)
        return np.einsum("gkr,gk->gr", self.roots, pi)

    def cost(self, states) -> float:
        r = self.residuals(states)
        return 0.5 * float(np.einsum("gr,gr->", r, r))

    def linearize(self, states):
        """(r [G,4], J [G,4,9])."""
        pi, dpi = local_plane_jacobian(states, self.kf_idx, self.plane_idx)
        r = np.einsum("gkr,gk->gr", self.roots, pi)
        J = np.einsum("gkr,gkc->grc", self.roots, dpi)
        return r, J


def eval_point_to_plane_point(factor: PointToPlanePointFactor, states):
    """Scalar evaluation: (residual (1,), J (1,9))."""
    bundle = PointToPlaneBundle([factor])
    r, J = bundle.linearize(states)
    return r, J


def eval_compressed_point_to_plane(factor: CompressedPointToPlaneFactor, states):
    """Scalar evaluation: (residual (rank,), J (rank,9))."""
    pi, dpi = local_plane_jacobian(states, [factor.keyframe], [factor.plane])
    return factor.root.T @ pi[0], factor.root.T @ dpi[0]
