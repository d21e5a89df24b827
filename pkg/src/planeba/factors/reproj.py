"""Projection and depth residuals for RGB-D landmark observations.

The residual for landmark P observed at normalized coordinates z with
measured depth lam in keyframe i is

    r[0:2] = proj(P_c) - z        (normalized image plane)
    r[2]   = P_c.z - lam          (meters)

with P_c the landmark in camera i's frame, reached through the optimized
IMU pose and the fixed camera-to-IMU extrinsic. Components are whitened by
their sigmas. Observations with camera-frame depth <= 1e-6 are flagged and
contribute zero (robust-BA practice for points behind the camera).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class ReprojDepthFactor:
    keyframe: int
    landmark: int
    obs: np.ndarray  # (2,) normalized image coordinates
    depth: float  # measured depth, meters
    pixel_sigma: float = 1.0  # sigma of obs components (normalized units)
    depth_sigma: float = 1.0  # sigma of the depth component, meters


class ReprojBundle:
    """Vectorized batch of reprojection+depth factors."""

    def __init__(self, kf_idx, lm_idx, obs, depth, pixel_sigma, depth_sigma,
                 huber_delta: float | None = None):
        self.kf_idx = np.asarray(kf_idx, dtype=np.int64)
        self.lm_idx = np.asarray(lm_idx, dtype=np.int64)
        n = self.kf_idx.shape[0]
        self.obs = np.asarray(obs, dtype=float).reshape(n, 2)
        self.depth = np.asarray(depth, dtype=float).reshape(n)
        self.w_px = 1.0 / np.broadcast_to(np.asarray(pixel_sigma, dtype=float), (n,)).copy()
        self.w_depth = 1.0 / np.broadcast_to(np.asarray(depth_sigma, dtype=float), (n,)).copy()
        self.huber_delta = huber_delta

    @classmethod
    def from_factors(cls, factors, huber_delta=None) -> "ReprojBundle":
        return cls(
            [f.keyframe for f in factors],
            [f.landmark for f in factors],
            [f.obs for f in factors],
            [f.depth for f in factors],
            [f.pixel_sigma for f in factors],
            [f.depth_sigma for f in factors],
            huber_delta=huber_delta,
        )

    def __len__(self):
        return self.kf_idx.shape[0]

    def _points_in_camera(self, states):
        R_wi = states.rotations()[self.kf_idx]
        t_wi = states.kf_trans[self.kf_idx]
        p_imu = np.einsum("nji,nj->ni", R_wi, states.landmarks[self.lm_idx] - t_wi)
        R_ic = states.cam_to_imu.rotation.matrix()
        return (p_imu - states.cam_to_imu.translation) @ R_ic

    def residuals(self, states):
        """Whitened residuals [N, 3] and validity mask [N]."""
        p_cam = self._points_in_camera(states)
        z = p_cam[:, 2]
        valid = z > MIN_DEPTH
        zs = np.where(valid, z, 1.0)
        r = np.empty((len(self), 3))
        r[:, 0] = (p_cam[:, 0] / zs - self.obs[:, 0]) * self.w_px
        r[:, 1] = (p_cam[:, 1] / zs - self.obs[:, 1]) * self.w_px
        r[:, 2] = (z - self.depth) * self.w_depth
        r[~valid] = 0.0
        return r, valid

    def cost(self, states) -> float:
        r, _ = self.residuals(states)
        return robust_cost(r, self.huber_delta)

    def linearize(self, states):
        """Robust-scaled (r [N,3], J_pose [N,3,6], J_lm [N,3,3], valid [N]).

        Jacobian columns follow the keyframe block layout: the pose part
        [rotation(3), translation(3)] only (velocity/bias untouched).
        """
        R_wi = states.rotations()[self.kf_idx]
        t_wi = states.kf_trans[self.kf_idx]
        lm = states.landmarks[self.lm_idx]
        R_ic = states.cam_to_imu.rotation.matrix()
        p_imu = np.einsum("nji,nj->ni", R_wi, lm - t_wi)
        p_cam = (p_imu - states.cam_to_imu.translation) @ R_ic

        z = p_cam[:, 2]
        valid = z > MIN_DEPTH
        zs = np.where(valid, z, 1.0)
        n = len(self)

        r = np.empty((n, 3))
        r[:, 0] = (p_cam[:, 0] / zs - self.obs[:, 0]) * self.w_px
        r[:, 1] = (p_cam[:, 1] / zs - self.obs[:, 1]) * self.w_px
        r[:, 2] = (z - self.depth) * self.w_depth

        # d p_cam / d landmark = R_ic^T R_wi^T; translation column is its negative.
        M = np.einsum("ba,ncb->nca", R_ic, R_wi)  # [n,3,3] = (R_ic^T R_wi^T) rows
        M = M.transpose(0, 2, 1)
        d = lm - t_wi
        Dskew = np.zeros((n, 3, 3))
        Dskew[:, 0, 1] = -d[:, 2]
        Dskew[:, 0, 2] = d[:, 1]
        Dskew[:, 1, 0] = d[:, 2]
        Dskew[:, 1, 2] = -d[:, 0]
        Dskew[:, 2, 0] = -d[:, 1]
        Dskew[:, 2, 1] = d[:, 0]
        dp_drot = np.matmul(M, Dskew)

        # Chain through proj and the depth row, with whitening.
        dproj = np.zeros((n, 3, 3))
        inv_z = 1.0 / zs
        dproj[:, 0, 0] = inv_z * self.w_px
        dproj[:, 0, 2] = -p_cam[:, 0] * inv_z * inv_z * self.w_px
        dproj[:, 1, 1] = inv_z * self.w_px
        dproj[:, 1, 2] = -p_cam[:, 1] * inv_z * inv_z * self.w_px
        dproj[:, 2, 2] = self.w_depth

        J_lm = np.matmul(dproj, M)
        J_pose = np.empty((n, 3, 6))
        J_pose[:, :, 0:3] = np.matmul(dproj, dp_drot)
        J_pose[:, :, 3:6] = -J_lm

        r[~valid] = 0.0
        J_pose[~valid] = 0.0
        J_lm[~valid] = 0.0
        if self.huber_delta is not None:
            w = robust_sqrt_weights(r, self.huber_delta)
            r = r * w[:, None]
            J_pose = J_pose * w[:, None, None]
            J_lm = J_lm * w[:, None, None]
        return r, J_pose, J_lm, valid


def eval_reproj_depth(factor: ReprojDepthFactor, states):
    """Scalar evaluation: (residual (3,), J_pose (3,6), J_landmark (3,3), valid)."""
    bundle = ReprojBundle.from_factors([factor])
    r, J_pose, J_lm, valid = bundle.linearize(states)
    return r[0], J_pose[0], J_lm[0], bool(valid[0])


def robust_cost(r, huber_delta) -> float:
    """0.5 * sum of (optionally Huberized) squared residual norms.

    ``r`` is [N, k] whitened; Huber applies per factor on the k-dim norm.
    """
    s = np.einsum("nk,nk->n", r, r)
    if huber_delta is None:
        return 0.5 * float(s.sum())
    norm = np.sqrt(s)
    rho = np.where(norm <= huber_delta, s, 2.0 * huber_delta * norm - huber_delta * huber_delta)
    return 0.5 * float(rho.sum())


def robust_sqrt_weights(r, huber_delta):
    """sqrt of the Huber IRLS weight per factor row."""
    norm = np.linalg.norm(r, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(norm <= huber_delta, 1.0, huber_delta / np.where(norm == 0, 1.0, norm))
    return np.sqrt(w)
