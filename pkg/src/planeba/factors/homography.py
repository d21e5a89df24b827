"""Per-point and compressed homography factors.

A point on a world plane observed in two cameras gives the direct-linear
constraint ``C @ h = 0`` where ``h`` is the row-major flattening of the
plane-induced homography between the two views and ``C`` is a 2x9
coefficient matrix built only from the observation pair. Summing
``C^T C`` over all point pairs sharing (frame_i, frame_j, plane) yields a
constant observation matrix whose eigendecomposition root turns N
two-row residuals into a single factor with identical cost.

State Jacobian column order everywhere in this module:
``[rot_i(3), trans_i(3), rot_j(3), trans_j(3), plane(3)]`` (15 columns).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import MixedKeys
from .reproj import robust_cost, robust_sqrt_weights

EIG_CUTOFF = 1e-12

# Skew matrices of the unit axes, used to sweep rotation perturbation axes.
_AXIS_SKEW = np.array(
    [
        [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
        [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    ]
)


def point_pair_rows(obs_i, obs_j) -> np.ndarray:
    """2x9 coefficient rows eliminating the projective scale from H p_i ~ p_j."""
    xi, yi = float(obs_i[0]), float(obs_i[1])
    xj, yj = float(obs_j[0]), float(obs_j[1])
    return np.array(
        [
            [xi, yi, 1.0, 0.0, 0.0, 0.0, -xi * xj, -yi * xj, -xj],
            [0.0, 0.0, 0.0, xi, yi, 1.0, -xi * yj, -yi * yj, -yj],
        ]
    )


@dataclass(frozen=True)
class HomographyPointFactor:
    frame_i: int
    frame_j: int
    plane: int
    obs_i: np.ndarray  # (2,) normalized coordinates in frame i
    obs_j: np.ndarray  # (2,)
    sigma: float = 1.0

    def key(self):
        return (self.frame_i, self.frame_j, self.plane)

    def rows(self) -> np.ndarray:
        return point_pair_rows(self.obs_i, self.obs_j) / self.sigma


@dataclass(frozen=True)
class CompressedHomographyFactor:
    frame_i: int
    frame_j: int
    plane: int
    gram: np.ndarray  # (9, 9) sum of C^T C over merged point pairs
    root: np.ndarray  # (9, rank) with root @ root.T == gram
    count: int  # number of merged point observations

    @property
    def rank(self) -> int:
        return self.root.shape[1]


def decompose_gram(gram: np.ndarray, cutoff: float = EIG_CUTOFF) -> np.ndarray:
    """Eigenvalue-decomposition root keeping eigenvalues > cutoff * max."""
    w, V = np.linalg.eigh(gram)
    keep = w > cutoff * max(w[-1], 0.0)
    if not np.any(keep):
        return np.zeros((gram.shape[0], 0))
    return V[:, keep] * np.sqrt(w[keep])


def build_compressed_homography(point_factors, cutoff: float = EIG_CUTOFF) -> CompressedHomographyFactor:
    """Merge per-point factors sharing one (frame_i, frame_j, plane) key."""
    if not point_factors:
        raise MixedKeys("cannot compress an empty factor list")
    key = point_factors[0].key()
    if any(f.key() != key for f in point_factors):
        raise MixedKeys(f"factors do not all share key {key}")
    gram = np.zeros((9, 9))
    for f in point_factors:
        C = f.rows()
        gram += C.T @ C
    gram = 0.5 * (gram + gram.T)
    root = decompose_gram(gram, cutoff)
    return CompressedHomographyFactor(*key, gram=gram, root=root, count=len(point_factors))


def homography_flat(states, i_idx, j_idx, plane_idx):
    """Row-major flattened homographies for index triples.

    Returns (h [G, 9], valid [G]); invalid groups (camera on plane) get zeros.
    """
    h, _, valid = _homography_core(states, i_idx, j_idx, plane_idx, want_jacobian=False)
    return h, valid


def homography_flat_jacobian(states, i_idx, j_idx, plane_idx):
    """(h [G, 9], dh [G, 9, 15], valid [G]) with the module's column order."""
    return _homography_core(states, i_idx, j_idx, plane_idx, want_jacobian=True)


def _homography_core(states, i_idx, j_idx, plane_idx, want_jacobian):
    i_idx = np.atleast_1d(np.asarray(i_idx, dtype=np.int64))
    j_idx = np.atleast_1d(np.asarray(j_idx, dtype=np.int64))
    plane_idx = np.atleast_1d(np.asarray(plane_idx, dtype=np.int64))
    G = i_idx.shape[0]

    R_wi = states.rotations()
    R_ic = states.cam_to_imu.rotation.matrix()
    t_ic = states.cam_to_imu.translation

    Ri = R_wi[i_idx]
    Rj = R_wi[j_idx]
    Rci = Ri @ R_ic
    Rcj = Rj @ R_ic
    lever_i = Ri @ t_ic  # world-frame lever arm of the camera center
    lever_j = Rj @ t_ic
    tci = lever_i + states.kf_trans[i_idx]
    tcj = lever_j + states.kf_trans[j_idx]

    vec = states.planes[plane_idx]
    dmag = np.linalg.norm(vec, axis=1)
    dsafe = np.where(dmag < 1e-12, 1.0, dmag)
    n = vec / dsafe[:, None]

    den = dmag + np.einsum("gk,gk->g", n, tci)
    valid = (np.abs(den) > 1e-9) & (dmag > 1e-12)
    den_s = np.where(valid, den, 1.0)

    dt = tci - tcj
    A = np.eye(3)[None] - np.einsum("ga,gb->gab", dt, n) / den_s[:, None, None]
    H = np.einsum("gji,gjk,gkl->gil", Rcj, A, Rci)
    h = H.reshape(G, 9)
    h[~valid] = 0.0
    if not want_jacobian:
        return h, None, valid

    dh = np.zeros((G, 9, 15))
    inv_den = 1.0 / den_s
    dt_n = np.einsum("ga,gb->gab", dt, n)  # reused numerator outer product

    def _push(col, dA=None, dRci=None, dRcj_rot_axis=None):
        # dH = Rcj^T (dA Rci + A dRci) + dRcj^T A Rci, assembled per column.
        dH = np.zeros((G, 3, 3))
        if dA is not None:
            dH += np.einsum("gji,gjk,gkl->gil", Rcj, dA, Rci)
        if dRci is not None:
            dH += np.einsum("gji,gjk,gkl->gil", Rcj, A, dRci)
        if dRcj_rot_axis is not None:
            E = _AXIS_SKEW[dRcj_rot_axis]
            # d(Rcj)^T = (E Rcj)^T = -Rcj^T E
            dH += -np.einsum("gji,jk,gkl,glm->gim", Rcj, E, A, Rci)
        dh[:, :, col] = dH.reshape(G, 9)

    def _dA_from(ddt, dn, dden):
        # A = I - outer(dt, n)/den
        out = np.zeros((G, 3, 3))
        if ddt is not None:
            out -= np.einsum("ga,gb->gab", ddt, n) * inv_den[:, None, None]
        if dn is not None:
            out -= np.einsum("ga,gb->gab", dt, dn) * inv_den[:, None, None]
        if dden is not None:
            out += dt_n * (dden * inv_den * inv_den)[:, None, None]
        return out

    for k in range(3):  # rotation of keyframe i
        E = _AXIS_SKEW[k]
        dRci = np.einsum("ab,gbc->gac", E, Rci)
        dtci = lever_i @ E.T  # E @ lever_i per group
        dden = np.einsum("gk,gk->g", n, dtci)
        _push(k, dA=_dA_from(dtci, None, dden), dRci=dRci)
    for k in range(3):  # translation of keyframe i
        e = np.zeros(3)
        e[k] = 1.0
        ddt = np.broadcast_to(e, (G, 3))
        dden = n[:, k]
        _push(3 + k, dA=_dA_from(ddt, None, dden))
    for k in range(3):  # rotation of keyframe j
        E = _AXIS_SKEW[k]
        dtcj = lever_j @ E.T
        _push(6 + k, dA=_dA_from(-dtcj, None, None), dRcj_rot_axis=k)
    for k in range(3):  # translation of keyframe j
        e = np.zeros(3)
        e[k] = 1.0
        _push(9 + k, dA=_dA_from(np.broadcast_to(-e, (G, 3)), None, None))

    # Plane closest-point vector: n = vec/|vec|, d = |vec|.
    proj = (np.eye(3)[None] - np.einsum("ga,gb->gab", n, n)) / dsafe[:, None, None]
    for k in range(3):
        dn = proj[:, :, k]
        dd = n[:, k]
        dden = dd + np.einsum("gk,gk->g", dn, tci)
        _push(12 + k, dA=_dA_from(None, dn, dden))

    dh[~valid] = 0.0
    return h, dh, valid


class HomographyPointBundle:
    """Per-point homography factors grouped by (frame_i, frame_j, plane).

    The flattened homography and its state Jacobian are computed once per
    group and broadcast to member points, which keeps the uncompressed
    variant's cost function bit-for-bit the quadratic form the compressed
    variant encodes.
    """

    def __init__(self, point_factors, huber_delta: float | None = None):
        self.factors = list(point_factors)
        keys = {}
        group_i, group_j, group_p = [], [], []
        group_of = np.empty(len(point_factors), dtype=np.int64)
        rows = np.empty((len(point_factors), 2, 9))
        for idx, f in enumerate(point_factors):
            g = keys.get(f.key())
            if g is None:
                g = len(group_i)
                keys[f.key()] = g
                group_i.append(f.frame_i)
                group_j.append(f.frame_j)
                group_p.append(f.plane)
            group_of[idx] = g
            rows[idx] = f.rows()
        self.i_idx = np.array(group_i, dtype=np.int64)
        self.j_idx = np.array(group_j, dtype=np.int64)
        self.plane_idx = np.array(group_p, dtype=np.int64)
        self.group_of = group_of
        self.rows = rows
        self.huber_delta = huber_delta

    def __len__(self):
        return self.rows.shape[0]

    @property
    def n_groups(self):
        return self.i_idx.shape[0]

    def residuals(self, states):
        h, valid = homography_flat(states, self.i_idx, self.j_idx, self.plane_idx)
        r = np.einsum("nrk,nk->nr", self.rows, h[self.group_of])
        return r, valid[self.group_of]

    def cost(self, states) -> float:
        r, _ = self.residuals(states)
        return robust_cost(r, self.huber_delta)

    def linearize(self, states):
        """(r [N,2], J [N,2,15], valid_points [N])."""
        h, dh, valid = homography_flat_jacobian(states, self.i_idx, self.j_idx, self.plane_idx)
        hg = h[self.group_of]
        dhg = dh[self.group_of]
        r = np.einsum("nrk,nk->nr", self.rows, hg)
        J = np.einsum("nrk,nkc->nrc", self.rows, dhg)
        if self.huber_delta is not None:
            w = robust_sqrt_weights(r, self.huber_delta)
            r = r * w[:, None]
            J = J * w[:, None, None]
        return r, J, valid[self.group_of]


class CompressedHomographyBundle:
    """Batch of compressed homography factors (one group per factor).

    Roots are zero-padded to 9 columns so residual rows stay rectangular;
    padded rows are identically zero and contribute nothing.
    """

    def __init__(self, factors):
        G = len(factors)
        self.factors = list(factors)
        self.i_idx = np.array([f.frame_i for f in factors], dtype=np.int64)
        self.j_idx = np.array([f.frame_j for f in factors], dtype=np.int64)
        self.plane_idx = np.array([f.plane for f in factors], dtype=np.int64)
        self.roots = np.zeros((G, 9, 9))
        for g, f in enumerate(factors):
            self.roots[g, :, : f.rank] = f.root
        self.counts = np.array([f.count for f in factors], dtype=np.int64)

    def __len__(self):
        return len(self.factors)

    def residuals(self, states):
        h, valid = homography_flat(states, self.i_idx, self.j_idx, self.plane_idx)
        r = np.einsum("gkr,gk->gr", self.roots, h)
        return r, valid

    def cost(self, states) -> float:
        r, _ = self.residuals(states)
        return 0.5 * float(np.einsum("gr,gr->", r, r))

    def linearize(self, states):
        """(r [G,9], J [G,9,15], valid [G])."""
        h, dh, valid = homography_flat_jacobian(states, self.i_idx, self.j_idx, self.plane_idx)
        r = np.einsum("gkr,gk->gr", self.roots, h)
        J = np.einsum("gkr,gkc->grc", self.roots, dh)
        return r, J, valid


def eval_homography_point(factor: HomographyPointFactor, states):
    """Scalar evaluation: (residual (2,), J (2,15), valid)."""
    bundle = HomographyPointBundle([factor])
    r, J, valid = bundle.linearize(states)
    return r[0], J[0], bool(valid[0])


def eval_compressed_homography(factor: CompressedHomographyFactor, states):
    """Scalar evaluation: (residual (rank,), J (rank,15), valid)."""
    h, dh, valid = homography_flat_jacobian(
        states, [factor.frame_i], [factor.frame_j], [factor.plane]
    )
    r = factor.root.T @ h[0]
    J = factor.root.T @ dh[0]
    return r, J, bool(valid[0])
