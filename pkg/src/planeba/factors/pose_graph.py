"""Edges of the pose-plane graph: relative-pose and pose-plane residuals.

These factors operate on plain Pose lists plus closest-point plane vectors
(the graph stage optimizes poses and planes only). Relative-pose edges use
the split log residual of (T_i^-1 T_j) . measured^-1; pose-plane edges
compare the world plane state against the measured camera-frame plane
mapped through the keyframe pose, in closest-point coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import so3
from ..errors import MissingState
from ..geometry import Plane, Pose, plane_transform


@dataclass(frozen=True)
class RelativePoseEdge:
    frame_i: int
    frame_j: int
    measured: Pose  # pose of frame j expressed in frame i
    rot_sigma: float = 0.00873  # 0.5 degrees
    trans_sigma: float = 0.02
    is_loop: bool = False

    def sigmas(self) -> np.ndarray:
        return np.array([self.rot_sigma] * 3 + [self.trans_sigma] * 3)


@dataclass(frozen=True)
class PosePlaneEdge:
    frame: int
    plane: int
    measured: Plane  # plane expressed in the keyframe's camera frame
    cp_sigma: float = 0.05

    def sigmas(self) -> np.ndarray:
        return np.full(3, self.cp_sigma)


def eval_relative_pose(edge: RelativePoseEdge, poses):
    """Whitened residual (6,) and Jacobians (6,6) w.r.t. frames i and j.

    Jacobian columns are [rot(3), trans(3)] boxplus directions.
    """
    try:
        T_i = poses[edge.frame_i]
        T_j = poses[edge.frame_j]
    except (IndexError, KeyError) as exc:
        raise MissingState(f"relative-pose edge references missing frame: {exc}") from exc
    R_i = T_i.rotation.matrix()
    R_m = edge.measured.rotation.matrix()
    t_m = edge.measured.translation

    E_R = R_i.T @ T_j.rotation.matrix() @ R_m.T
    r_rot = so3.log_matrix(E_R)
    Et = R_i.T @ (T_j.translation - T_i.translation) - E_R @ t_m

    Jl_inv = so3.left_jacobian_inv(r_rot)
    Emt_skew = so3.skew(E_R @ t_m)

    J_i = np.zeros((6, 6))
    J_j = np.zeros((6, 6))
    J_i[0:3, 0:3] = -Jl_inv @ R_i.T
    J_j[0:3, 0:3] = Jl_inv @ R_i.T
    J_i[3:6, 0:3] = R_i.T @ so3.skew(T_j.translation - T_i.translation) - Emt_skew @ R_i.T
    J_j[3:6, 0:3] = Emt_skew @ R_i.T
    J_i[3:6, 3:6] = -R_i.T
    J_j[3:6, 3:6] = R_i.T

    r = np.concatenate([r_rot, Et])
    w = 1.0 / edge.sigmas()
    return r * w, J_i * w[:, None], J_j * w[:, None]


def eval_pose_plane(edge: PosePlaneEdge, poses, plane_vecs):
    """Whitened residual (3,) plus Jacobians w.r.t. the pose (3,6) and plane (3,3).

    Residual: cp(world plane state) - cp(measured local plane mapped to world).
    """
    try:
        T = poses[edge.frame]
        vec = plane_vecs[edge.plane]
    except (IndexError, KeyError) as exc:
        raise MissingState(f"pose-plane edge references missing state: {exc}") from exc

    predicted = plane_transform(edge.measured, T)
    n_p = predicted.normal
    d_p = predicted.distance
    r = np.asarray(vec, dtype=float) - n_p * d_p

    # d eta_pred / d pose, eta_pred = n_p * d_p with n_p = R n_m, d_p = d_m - n_p . t.
    dn_drot = -so3.skew(n_p)
    dd_drot = -(T.translation @ dn_drot)
    J_pose = np.zeros((3, 6))
    J_pose[:, 0:3] = -(d_p * dn_drot + np.outer(n_p, dd_drot))
    J_pose[:, 3:6] = np.outer(n_p, n_p)  # -(n_p * dd_dt), dd_dt = -n_p
    J_plane = np.eye(3)

    w = 1.0 / edge.sigmas()
    return r * w, J_pose * w[:, None], J_plane * w[:, None]
