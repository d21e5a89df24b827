"""Array-of-blocks state vector for bundle adjustment.

Each keyframe owns a 15-dim local block ordered
``[rotation(3), translation(3), velocity(3), gyro_bias(3), accel_bias(3)]``;
landmarks and planes own 3-dim blocks. Rotations are stored as scalar-first
unit quaternions and perturbed on the left. The (constant) camera-to-IMU
extrinsic and world gravity ride along so factor evaluation is
self-contained.
"""

from __future__ import annotations

import numpy as np

from .. import quaternions as quat
from ..geometry import Plane, PlaneCP, Pose, Rotation

KF_BLOCK = 15
POSE_DIMS = 6


class GbaStates:
    """State vector over keyframes, landmarks, and planes."""

    def __init__(
        self,
        kf_quat,
        kf_trans,
        kf_vel=None,
        kf_gyro_bias=None,
        kf_accel_bias=None,
        landmarks=None,
        planes=None,
        cam_to_imu: Pose | None = None,
        gravity=None,
    ):
        self.kf_quat = np.array(kf_quat, dtype=float).reshape(-1, 4)
        K = self.kf_quat.shape[0]
        self.kf_trans = np.array(kf_trans, dtype=float).reshape(K, 3)
        self.kf_vel = _or_zeros(kf_vel, K)
        self.kf_gyro_bias = _or_zeros(kf_gyro_bias, K)
        self.kf_accel_bias = _or_zeros(kf_accel_bias, K)
        self.landmarks = (
            np.empty((0, 3)) if landmarks is None else np.array(landmarks, dtype=float).reshape(-1, 3)
        )
        self.planes = (
            np.empty((0, 3)) if planes is None else np.array(planes, dtype=float).reshape(-1, 3)
        )
        self.cam_to_imu = cam_to_imu if cam_to_imu is not None else Pose.identity()
        self.gravity = (
            np.array([0.0, 0.0, -9.81]) if gravity is None else np.asarray(gravity, dtype=float).copy()
        )
        self._rot = None
        self._cam_rot = None
        self._cam_trans = None

    @staticmethod
    def from_poses(poses, velocities=None, gyro_biases=None, accel_biases=None,
                   landmarks=None, planes=None, cam_to_imu=None, gravity=None) -> "GbaStates":
        """Build from Pose objects; ``planes`` may be Plane, PlaneCP, or raw vectors."""
        quats = np.array([p.rotation.quaternion for p in poses])
        trans = np.array([p.translation for p in poses])
        plane_vecs = None
        if planes is not None:
            plane_vecs = np.array([_plane_vec(p) for p in planes]).reshape(-1, 3)
        return GbaStates(
            quats, trans, velocities, gyro_biases, accel_biases,
            landmarks, plane_vecs, cam_to_imu, gravity,
        )

    @property
    def n_keyframes(self) -> int:
        return self.kf_quat.shape[0]

    @property
    def n_landmarks(self) -> int:
        return self.landmarks.shape[0]

    @property
    def n_planes(self) -> int:
        return self.planes.shape[0]

    def rotations(self) -> np.ndarray:
        """IMU-to-world rotation matrices, [K, 3, 3], cached."""
        if self._rot is None:
            self._rot = quat.to_matrix(self.kf_quat)
        return self._rot

    def cam_rotations(self) -> np.ndarray:
        """Camera-to-world rotation matrices, [K, 3, 3], cached."""
        if self._cam_rot is None:
            self._cam_rot = self.rotations() @ self.cam_to_imu.rotation.matrix()
        return self._cam_rot

    def cam_translations(self) -> np.ndarray:
        """Camera centers in the world frame, [K, 3], cached."""
        if self._cam_trans is None:
            t_ic = self.cam_to_imu.translation
            self._cam_trans = self.rotations() @ t_ic + self.kf_trans
        return self._cam_trans

    def imu_pose(self, k: int) -> Pose:
        return Pose(Rotation(self.kf_quat[k]), self.kf_trans[k])

    def cam_pose(self, k: int) -> Pose:
        return self.imu_pose(k).compose(self.cam_to_imu)

    def plane(self, p: int) -> Plane:
        return PlaneCP(self.planes[p]).to_plane()

    def copy(self) -> "GbaStates":
        return GbaStates(
            self.kf_quat.copy(), self.kf_trans.copy(), self.kf_vel.copy(),
            self.kf_gyro_bias.copy(), self.kf_accel_bias.copy(),
            self.landmarks.copy(), self.planes.copy(), self.cam_to_imu, self.gravity,
        )

    def boxplus(self, kf_delta=None, landmark_delta=None, plane_delta=None) -> "GbaStates":
        """Retract per-block deltas; returns a new state object."""
        out = self.copy()
        if kf_delta is not None:
            kf_delta = np.asarray(kf_delta, dtype=float).reshape(self.n_keyframes, KF_BLOCK)
            dq = quat.from_rotvec(kf_delta[:, 0:3])
            out.kf_quat = quat.normalize(quat.multiply(dq, self.kf_quat))
            out.kf_trans = self.kf_trans + kf_delta[:, 3:6]
            out.kf_vel = self.kf_vel + kf_delta[:, 6:9]
            out.kf_gyro_bias = self.kf_gyro_bias + kf_delta[:, 9:12]
            out.kf_accel_bias = self.kf_accel_bias + kf_delta[:, 12:15]
        if landmark_delta is not None:
            out.landmarks = self.landmarks + np.asarray(landmark_delta, dtype=float).reshape(-1, 3)
        if plane_delta is not None:
            out.planes = self.planes + np.asarray(plane_delta, dtype=float).reshape(-1, 3)
        out._rot = out._cam_rot = out._cam_trans = None
        return out

    def perturb_one(self, kind: str, index: int, delta) -> "GbaStates":
        """Single-block boxplus, used by finite-difference checks."""
        delta = np.asarray(delta, dtype=float)
        out = self.copy()
        if kind == "kf":
            full = np.zeros((self.n_keyframes, KF_BLOCK))
            full[index] = delta
            return self.boxplus(kf_delta=full)
        if kind == "landmark":
            out.landmarks = self.landmarks.copy()
            out.landmarks[index] += delta
        elif kind == "plane":
            out.planes = self.planes.copy()
            out.planes[index] += delta
        else:
            raise ValueError(f"unknown block kind {kind!r}")
        out._rot = out._cam_rot = out._cam_trans = None
        return out


def _or_zeros(arr, K):
    if arr is None:
        return np.zeros((K, 3))
    return np.array(arr, dtype=float).reshape(K, 3)


def _plane_vec(p):
    if isinstance(p, Plane):
        return p.normal * p.distance
    if isinstance(p, PlaneCP):
        return p.vec
    return np.asarray(p, dtype=float)
