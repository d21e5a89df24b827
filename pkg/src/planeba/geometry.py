"""Rigid-body transforms, plane parameterizations, and the plane-induced homography.

Conventions used throughout the toolkit:

* A ``Pose`` ``T = (R, t)`` maps points from its own frame into the target
  frame: ``p_target = R @ p_own + t``. Keyframe poses map camera/IMU frame
  to world.
* A plane is ``(n, d)`` with ``n . P + d = 0`` for points ``P`` on the plane
  (``n`` unit). The minimal optimization parameterization is the
  closest-point style vector ``n * d``, undefined for planes through the
  origin.
* Local coordinates (boxplus) perturb rotations on the left,
  ``R <- Exp(delta_rot) @ R``, and translations additively. Pose deltas are
  ordered ``[rotation(3), translation(3)]``.
"""

from __future__ import annotations

import numpy as np

from . import quaternions as quat
from . import so3
from .errors import DegeneratePlane


class Rotation:
    """SO(3) element stored as a unit quaternion (w, x, y, z)."""

    __slots__ = ("_q",)

    def __init__(self, q):
        q = np.asarray(q, dtype=float)
        if q.shape != (4,):
            raise ValueError("quaternion must be a 4-vector (w, x, y, z)")
        q = q / np.linalg.norm(q)
        if q[0] < 0.0:
            q = -q
        q.setflags(write=False)
        self._q = q

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(quat.identity())

    @staticmethod
    def from_matrix(R) -> "Rotation":
        return Rotation(quat.from_matrix(R))

    @staticmethod
    def exp(rotvec) -> "Rotation":
        return Rotation(quat.from_rotvec(np.asarray(rotvec, dtype=float)))

    @property
    def quaternion(self) -> np.ndarray:
        return self._q

    def log(self) -> np.ndarray:
        return quat.to_rotvec(self._q)

    def matrix(self) -> np.ndarray:
        return quat.to_matrix(self._q)

    def inverse(self) -> "Rotation":
        return Rotation(quat.conjugate(self._q))

    def compose(self, other: "Rotation") -> "Rotation":
        return Rotation(quat.multiply(self._q, other._q))

    __mul__ = compose

    def rotate(self, v) -> np.ndarray:
        return quat.rotate(self._q, np.asarray(v, dtype=float))

    def angle_to(self, other: "Rotation") -> float:
        """Geodesic angle between two rotations, radians."""
        return float(np.linalg.norm(self.inverse().compose(other).log()))

    def __repr__(self):
        return f"Rotation(quat={np.array2string(self._q, precision=6)})"


class Pose:
    """SE(3) element: rotation plus translation in meters."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Rotation, translation):
        t = np.asarray(translation, dtype=float)
        if t.shape != (3,):
            raise ValueError("translation must be a 3-vector")
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", t)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation.identity(), np.zeros(3))

    @staticmethod
    def from_matrix(M) -> "Pose":
        M = np.asarray(M, dtype=float)
        return Pose(Rotation.from_matrix(M[:3, :3]), M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation.matrix()
        M[:3, 3] = self.translation
        return M

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self * other)(p) = self(other(p))."""
        return Pose(
            self.rotation.compose(other.rotation),
            self.rotation.rotate(other.translation) + self.translation,
        )

    __mul__ = compose

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.rotate(self.translation))

    def transform(self, points) -> np.ndarray:
        """Apply to one point (3,) or a batch (N, 3)."""
        pts = np.asarray(points, dtype=float)
        return quat.rotate(self.rotation.quaternion, pts) + self.translation

    def __repr__(self):
        return f"Pose(R={self.rotation!r}, t={np.array2string(self.translation, precision=6)})"


class Plane:
    """Infinite plane (n, d) with n . P + d = 0, n unit."""

    __slots__ = ("normal", "distance")

    def __init__(self, normal, distance: float):
        n = np.asarray(normal, dtype=float)
        if n.shape != (3,):
            raise ValueError("normal must be a 3-vector")
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            raise ValueError("plane normal must be nonzero")
        n = n / norm
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "distance", float(distance) / norm if norm != 1.0 else float(distance))

    def __setattr__(self, name, value):
        raise AttributeError("Plane is immutable")

    def signed_distance(self, points) -> np.ndarray:
        """n . P + d for one point or a batch."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.normal + self.distance

    def project(self, points) -> np.ndarray:
        """Closest points on the plane."""
        pts = np.asarray(points, dtype=float)
        dist = np.atleast_1d(self.signed_distance(pts))
        if pts.ndim == 1:
            return pts - dist[0] * self.normal
        return pts - dist[:, None] * self.normal

    def homogeneous(self) -> np.ndarray:
        """4-vector [n; d]."""
        return np.concatenate([self.normal, [self.distance]])

    def __repr__(self):
        return f"Plane(n={np.array2string(self.normal, precision=6)}, d={self.distance:.6g})"


class PlaneCP:
    """Minimal plane parameterization: normal scaled by plane distance."""

    __slots__ = ("vec",)

    def __init__(self, vec):
        v = np.asarray(vec, dtype=float).copy()
        if v.shape != (3,):
            raise ValueError("closest-point vector must be a 3-vector")
        v.setflags(write=False)
        object.__setattr__(self, "vec", v)

    def __setattr__(self, name, value):
        raise AttributeError("PlaneCP is immutable")

    @staticmethod
    def from_plane(plane: Plane) -> "PlaneCP":
        return PlaneCP(plane.normal * plane.distance)

    def to_plane(self) -> Plane:
        d = np.linalg.norm(self.vec)
        if d < 1e-12:
            raise DegeneratePlane("closest-point vector vanishes (plane through origin)")
        return Plane(self.vec / d, d)

    def __repr__(self):
        return f"PlaneCP({np.array2string(self.vec, precision=6)})"


class NormalizedImagePoint:
    """Feature location on the z=1 normalized image plane."""

    __slots__ = ("x", "y")

    def __init__(self, x: float, y: float, fov_limit: float = 10.0):
        x = float(x)
        y = float(y)
        if not (np.isfinite(x) and np.isfinite(y)):
            raise ValueError("normalized image point must be finite")
        if abs(x) > fov_limit or abs(y) > fov_limit:
            raise ValueError(f"normalized coordinates exceed field-of-view limit {fov_limit}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __setattr__(self, name, value):
        raise AttributeError("NormalizedImagePoint is immutable")

    def array(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def bearing(self) -> np.ndarray:
        return np.array([self.x, self.y, 1.0])


def plane_transform(plane: Plane, T: Pose) -> Plane:
    """Express ``plane`` in the frame that ``T`` maps points *into*.

    If points satisfy n . P + d = 0 and P' = T(P), the result (n', d')
    satisfies n' . P' + d' = 0 with n' = R n and d' = d - n' . t.
    """
    n_out = T.rotation.rotate(plane.normal)
    d_out = plane.distance - float(n_out @ T.translation)
    return Plane(n_out, d_out)


def homography_from_states(T_i: Pose, T_j: Pose, plane: Plane) -> np.ndarray:
    """Homography mapping normalized coordinates in camera i to camera j.

    ``T_i``/``T_j`` are camera-to-world poses (extrinsics already applied by
    the caller); ``plane`` is expressed in the world frame. For any point on
    the plane, ``H @ [x_i, y_i, 1]`` is proportional to ``[x_j, y_j, 1]``.
    """
    n = plane.normal
    t_i = T_i.translation
    t_j = T_j.translation
    denom = plane.distance + float(n @ t_i)
    if abs(denom) < 1e-9:
        raise DegeneratePlane(f"camera lies on the plane (denominator {denom:.3e})")
    A = np.eye(3) - np.outer(t_i - t_j, n) / denom
    return T_j.rotation.matrix().T @ A @ T_i.rotation.matrix()


def pose_boxplus(T: Pose, delta) -> Pose:
    """Retract a 6-vector [rot(3), trans(3)] onto SE(3) at T."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (6,):
        raise ValueError("pose delta must be a 6-vector")
    return Pose(Rotation.exp(delta[:3]).compose(T.rotation), T.translation + delta[3:])


def pose_boxminus(T_a: Pose, T_b: Pose) -> np.ndarray:
    """Local coordinates of T_a relative to T_b: pose_boxplus(T_b, delta) == T_a."""
    drot = T_a.rotation.compose(T_b.rotation.inverse()).log()
    return np.concatenate([drot, T_a.translation - T_b.translation])


def pose_boxplus_point_jacobian(T: Pose, point) -> np.ndarray:
    """d/d delta of (T boxplus delta)(point) at delta = 0, shape (3, 6)."""
    moved = T.transform(point)
    J = np.zeros((3, 6))
    J[:, :3] = -so3.skew(moved - T.translation)
    J[:, 3:] = np.eye(3)
    return J


def cp_boxplus(cp: PlaneCP, delta) -> PlaneCP:
    """Additive retraction for the closest-point plane parameterization."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (3,):
        raise ValueError("plane delta must be a 3-vector")
    return PlaneCP(cp.vec + delta)


def plane_from_cp_vec(vec) -> tuple[np.ndarray, float]:
    """(normal, distance) from a raw closest-point vector."""
    vec = np.asarray(vec, dtype=float)
    d = float(np.linalg.norm(vec))
    if d < 1e-12:
        raise DegeneratePlane("closest-point vector vanishes (plane through origin)")
    return vec / d, d
