"""Synthetic indoor worlds: planes, landmarks, trajectory, IMU, observations.

Ground truth is produced by *discrete* integration (rotation exp steps,
trapezoidal position) of analytic angular-velocity and velocity profiles
sampled on the IMU grid, with keyframes snapped to sample boundaries. IMU
preintegration of the generated samples is therefore exactly consistent
with the ground-truth keyframe states, and every factor residual vanishes
at ground truth on a zero-noise dataset.

Depth measurements follow the multiplicative model d' = d + d*n with
n ~ N(0, sigma^2); pixel noise is applied in normalized coordinates.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.interpolate import CubicSpline

from . import quaternions as quat
from .errors import InfeasibleTrajectory, LengthMismatch
from .geometry import Plane, Pose, Rotation
from .solver.state import GbaStates

DEFAULT_GRAVITY = np.array([0.0, 0.0, -9.81])

# Camera (x right, y down, z forward) to IMU (x forward, y left, z up).
CAM_TO_IMU_ROT = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
CAM_TO_IMU_TRANS = np.array([0.06, 0.01, -0.02])


@dataclass
class NoiseSpec:
    pixel_sigma_px: float = 1.0
    depth_rel: float = 0.0017  # multiplicative depth noise sigma
    gyro_noise: float = 1.7e-4  # rad/s/sqrt(Hz)
    accel_noise: float = 2e-3  # m/s^2/sqrt(Hz)
    gyro_walk: float = 1e-5
    accel_walk: float = 1e-4
    normal_sigma_deg: float = 3.0  # label noise on landmark normals
    gyro_bias0: float = 0.003  # initial bias magnitude scale
    accel_bias0: float = 0.02

    @staticmethod
    def zero() -> "NoiseSpec":
        return NoiseSpec(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class TrajectorySpec:
    waypoints: list = None  # [M, 3] positions; default: circuit around the room
    duration_s: float = 36.0
    height_amplitude: float = 0.25
    yaw_scan_deg: float = 15.0  # sinusoidal yaw offset around travel direction
    pitch_amplitude_deg: float = 6.0
    max_speed: float = 3.0
    max_accel: float = 20.0


@dataclass
class WorldSpec:
    room_min: tuple = (0.5, 0.5, 0.5)
    room_max: tuple = (7.5, 5.5, 3.1)
    n_horizontal_planes: int = 6
    n_vertical_planes: int = 10
    n_planar_points: int = 2236
    n_nonplanar_points: int = 2032
    n_keyframes: int = 215
    imu_rate: float = 200.0
    cam_rate: float = 30.0
    keyframe_stride: int = 5  # camera frames per keyframe (nominal)
    max_obs_per_landmark: int = 6
    min_obs_per_landmark: int = 4
    max_range: float = 12.0
    fov_x: float = 0.9  # normalized-coordinate half-extent
    fov_y: float = 0.75
    min_depth: float = 0.3
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 42

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "WorldSpec":
        d = dict(d)
        if "trajectory" in d and isinstance(d["trajectory"], dict):
            d["trajectory"] = TrajectorySpec(**d["trajectory"])
        if "noise" in d and isinstance(d["noise"], dict):
            d["noise"] = NoiseSpec(**d["noise"])
        for key in ("room_min", "room_max"):
            if key in d:
                d[key] = tuple(d[key])
        return WorldSpec(**d)


@dataclass(frozen=True)
class LoopPair:
    frame_a: int
    frame_b: int
    relative: Pose  # pose of frame_b expressed in frame_a (ground truth)


@dataclass
class Dataset:
    spec: WorldSpec
    intrinsics: dict
    cam_to_imu: Pose
    gravity: np.ndarray
    kf_times: np.ndarray
    kf_quat: np.ndarray
    kf_trans: np.ndarray
    kf_vel: np.ndarray
    kf_gyro_bias: np.ndarray
    kf_accel_bias: np.ndarray
    landmarks: np.ndarray
    landmark_plane: np.ndarray  # plane index or -1
    landmark_normal: np.ndarray  # noisy normal labels
    planes: list  # ground-truth Plane objects
    plane_kind: list  # "horizontal" | "vertical"
    obs_kf: np.ndarray
    obs_lm: np.ndarray
    obs_xy: np.ndarray
    obs_depth: np.ndarray
    imu_time: np.ndarray
    imu_gyro: np.ndarray
    imu_accel: np.ndarray
    samples_per_kf: int
    loops: list

    @property
    def n_keyframes(self) -> int:
        return self.kf_quat.shape[0]

    @property
    def n_landmarks(self) -> int:
        return self.landmarks.shape[0]

    def imu_interval(self, k: int):
        """(gyro, accel, dt) arrays covering keyframe k -> k+1."""
        s = k * self.samples_per_kf
        e = (k + 1) * self.samples_per_kf
        dts = np.full(e - s, 1.0 / self.spec.imu_rate)
        return self.imu_gyro[s:e], self.imu_accel[s:e], dts

    def gt_states(self, landmarks=None, planes=None) -> GbaStates:
        return GbaStates(
            self.kf_quat.copy(), self.kf_trans.copy(), self.kf_vel.copy(),
            self.kf_gyro_bias.copy(), self.kf_accel_bias.copy(),
            self.landmarks.copy() if landmarks is None else landmarks,
            np.array([p.normal * p.distance for p in self.planes]) if planes is None else planes,
            self.cam_to_imu, self.gravity,
        )

    def kf_cam_pose(self, k: int) -> Pose:
        return Pose(Rotation(self.kf_quat[k]), self.kf_trans[k]).compose(self.cam_to_imu)

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        for arr in (
            self.kf_times, self.kf_quat, self.kf_trans, self.kf_vel,
            self.kf_gyro_bias, self.kf_accel_bias, self.landmarks,
            self.landmark_plane.astype(np.int64), self.landmark_normal,
            self.obs_kf.astype(np.int64), self.obs_lm.astype(np.int64),
            self.obs_xy, self.obs_depth, self.imu_time, self.imu_gyro, self.imu_accel,
        ):
            h.update(np.ascontiguousarray(arr).tobytes())
        for p in self.planes:
            h.update(p.normal.tobytes())
            h.update(np.float64(p.distance).tobytes())
        for lp in self.loops:
            h.update(np.int64(lp.frame_a).tobytes())
            h.update(np.int64(lp.frame_b).tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# World layout


def _build_planes(spec: WorldSpec, rng):
    """Ground-truth planes plus a bounded patch (center, axes, half-extents) each."""
    lo = np.asarray(spec.room_min, dtype=float)
    hi = np.asarray(spec.room_max, dtype=float)
    size = hi - lo
    planes, kinds, patches = [], [], []

    def add(plane, kind, center, axis_u, axis_v, half_u, half_v):
        planes.append(plane)
        kinds.append(kind)
        patches.append((np.asarray(center, float), np.asarray(axis_u, float),
                        np.asarray(axis_v, float), float(half_u), float(half_v)))

    # Horizontal: floor, ceiling, then raised patches.
    cxy = 0.5 * (lo[:2] + hi[:2])
    add(Plane([0, 0, 1], -lo[2]), "horizontal", [cxy[0], cxy[1], lo[2]],
        [1, 0, 0], [0, 1, 0], size[0] / 2 - 0.1, size[1] / 2 - 0.1)
    if spec.n_horizontal_planes >= 2:
        add(Plane([0, 0, 1], -hi[2]), "horizontal", [cxy[0], cxy[1], hi[2]],
            [1, 0, 0], [0, 1, 0], size[0] / 2 - 0.1, size[1] / 2 - 0.1)
    for i in range(max(0, spec.n_horizontal_planes - 2)):
        z = lo[2] + (0.3 + 0.45 * ((i * 0.37) % 1.0)) * size[2]
        cx = lo[0] + (0.25 + 0.5 * ((i * 0.61 + 0.2) % 1.0)) * size[0]
        cy = lo[1] + (0.25 + 0.5 * ((i * 0.43 + 0.55) % 1.0)) * size[1]
        add(Plane([0, 0, 1], -z), "horizontal", [cx, cy, z],
            [1, 0, 0], [0, 1, 0], 0.22 * size[0], 0.22 * size[1])

    # Vertical: four walls (normals pointing into the room), then partitions.
    cz = 0.5 * (lo[2] + hi[2])
    wall_cfgs = [
        (np.array([1.0, 0, 0]), lo[0], [lo[0], cxy[1], cz], [0, 1, 0]),
        (np.array([-1.0, 0, 0]), -hi[0], [hi[0], cxy[1], cz], [0, 1, 0]),
        (np.array([0, 1.0, 0]), lo[1], [cxy[0], lo[1], cz], [1, 0, 0]),
        (np.array([0, -1.0, 0]), -hi[1], [cxy[0], hi[1], cz], [1, 0, 0]),
    ]
    for n, off, center, axis_u in wall_cfgs[: min(4, spec.n_vertical_planes)]:
        hu = size[1] / 2 - 0.1 if abs(n[0]) > 0.5 else size[0] / 2 - 0.1
        add(Plane(n, -float(n @ center)), "vertical", center, axis_u, [0, 0, 1],
            hu, size[2] / 2 - 0.05)
    n_extra = max(0, spec.n_vertical_planes - 4)
    for i in range(n_extra):
        theta = (i * 2.399963) % (2 * np.pi)  # golden-angle spread of azimuths
        n = np.array([np.cos(theta), np.sin(theta), 0.0])
        for _attempt in range(50):
            center = np.array([
                lo[0] + (0.22 + 0.56 * rng.random()) * size[0],
                lo[1] + (0.22 + 0.56 * rng.random()) * size[1],
                cz,
            ])
            if abs(n @ center) >= 0.3:
                break
        axis_u = np.array([-np.sin(theta), np.cos(theta), 0.0])
        add(Plane(n, -float(n @ center)), "vertical", center, axis_u, [0, 0, 1],
            0.2 * min(size[0], size[1]) + 0.5, size[2] / 2 - 0.15)
    return planes, kinds, patches


def _sample_patch_points(patch, count, rng):
    center, axis_u, axis_v, hu, hv = patch
    u = rng.uniform(-hu, hu, count)
    v = rng.uniform(-hv, hv, count)
    return center[None, :] + u[:, None] * axis_u[None, :] + v[:, None] * axis_v[None, :]


def _perturb_normals(normals, sigma_deg, rng):
    if sigma_deg <= 0:
        return normals.copy()
    axis = rng.normal(size=normals.shape)
    axis -= normals * np.einsum("ij,ij->i", axis, normals)[:, None]
    norms = np.linalg.norm(axis, axis=1, keepdims=True)
    axis = np.where(norms > 1e-12, axis / np.clip(norms, 1e-12, None), np.array([1.0, 0, 0]))
    ang = rng.normal(scale=np.deg2rad(sigma_deg), size=normals.shape[0])
    rotvec = axis * ang[:, None]
    return quat.rotate(quat.from_rotvec(rotvec), normals)


# --------------------------------------------------------------------------
# Trajectory


def _default_waypoints(spec: WorldSpec):
    lo = np.asarray(spec.room_min, float)
    hi = np.asarray(spec.room_max, float)
    m = 1.25
    z0 = lo[2] + 0.45 * (hi[2] - lo[2])
    corners = [
        (lo[0] + m, lo[1] + m), (hi[0] - m, lo[1] + m),
        (hi[0] - m, hi[1] - m), (lo[0] + m, hi[1] - m),
    ]
    pts = []
    for i in range(len(corners)):
        a = np.array(corners[i])
        b = np.array(corners[(i + 1) % 4])
        for s in (0.0, 0.5):
            pts.append(np.array([*(a + s * (b - a)), z0]))
    return np.array(pts)


def _trajectory_profiles(spec: WorldSpec):
    """Analytic position/yaw/pitch/roll splines over one closed circuit."""
    traj = spec.trajectory
    wps = np.asarray(traj.waypoints, float) if traj.waypoints is not None else _default_waypoints(spec)
    T = traj.duration_s
    n = wps.shape[0]
    knots = np.linspace(0.0, T, n + 1)
    closed = np.vstack([wps, wps[0:1]])
    closed = closed + 0.0
    pos = CubicSpline(knots, closed, axis=0, bc_type="periodic")

    def height(t):
        return traj.height_amplitude * np.sin(2 * np.pi * 2.0 * t / T)

    vel = pos.derivative(1)
    grid = np.linspace(0, T, 512)
    v = vel(grid)
    yaw_raw = np.unwrap(np.arctan2(v[:, 1], v[:, 0]))
    yaw_spline = CubicSpline(grid, yaw_raw)

    def orientation(t):
        t = np.asarray(t, dtype=float)
        yaw = yaw_spline(t) + np.deg2rad(traj.yaw_scan_deg) * np.sin(2 * np.pi * 3.0 * t / T)
        pitch = np.deg2rad(traj.pitch_amplitude_deg) * np.sin(2 * np.pi * 2.0 * t / T + 0.7)
        roll = np.deg2rad(2.0) * np.sin(2 * np.pi * 1.0 * t / T + 1.9)
        return yaw, pitch, roll

    def position(t):
        p = pos(np.asarray(t, dtype=float))
        p = np.atleast_2d(p)
        p[:, 2] += height(np.asarray(t, dtype=float))
        return p

    def velocity(t):
        t = np.asarray(t, dtype=float)
        v = np.atleast_2d(vel(t))
        v[:, 2] += traj.height_amplitude * (4 * np.pi / T) * np.cos(2 * np.pi * 2.0 * t / T)
        return v

    speed = np.linalg.norm(velocity(grid), axis=1)
    accel = np.linalg.norm(np.gradient(velocity(grid), grid, axis=0), axis=1)
    if speed.max() > traj.max_speed or accel.max() > traj.max_accel:
        raise InfeasibleTrajectory(
            f"peak speed {speed.max():.2f} m/s or accel {accel.max():.2f} m/s^2 over bounds"
        )
    return position, velocity, orientation, T


def _euler_to_quat(yaw, pitch, roll):
    """R = Rz(yaw) Ry(pitch) Rx(roll) as quaternions, batched."""
    half = 0.5
    qz = np.stack([np.cos(half * yaw), np.zeros_like(yaw), np.zeros_like(yaw), np.sin(half * yaw)], -1)
    qy = np.stack([np.cos(half * pitch), np.zeros_like(pitch), np.sin(half * pitch), np.zeros_like(pitch)], -1)
    qx = np.stack([np.cos(half * roll), np.sin(half * roll), np.zeros_like(roll), np.zeros_like(roll)], -1)
    return quat.multiply(quat.multiply(qz, qy), qx)


# --------------------------------------------------------------------------
# Generation


def generate(spec: WorldSpec) -> Dataset:
    """Build a full synthetic dataset; identical spec+seed gives identical bytes."""
    rng = np.random.default_rng(spec.seed)
    planes, kinds, patches = _build_planes(spec, rng)

    position, velocity, orientation, T = _trajectory_profiles(spec)

    spk = max(1, round(spec.imu_rate * spec.keyframe_stride / spec.cam_rate))
    K = spec.n_keyframes
    n_samples = (K - 1) * spk
    dt = 1.0 / spec.imu_rate
    times = np.arange(n_samples + 1) * dt
    # Rescale so the trajectory closes over exactly the keyframe horizon.
    times_traj = times * (T / times[-1])

    yaw, pitch, roll = orientation(times_traj)
    quats = quat.normalize(_euler_to_quat(yaw, pitch, roll))
    v_analytic = velocity(times_traj) * (times_traj[-1] / times[-1])
    p0 = position(times_traj[0])[0]
    g = DEFAULT_GRAVITY

    # Discrete ground truth: the gyro stream reproduces the sampled rotations
    # exactly under per-step exp integration, the accel stream reproduces the
    # velocity samples, and positions integrate trapezoidally (which is what
    # the preintegration recursion composes to).
    R_all = quat.to_matrix(quats)
    drot = quat.multiply(quat.conjugate(quats[:-1]), quats[1:])
    gyro_true = quat.to_rotvec(drot) / dt
    dv = (v_analytic[1:] - v_analytic[:-1]) / dt - g[None, :]
    accel_true = np.einsum("nji,nj->ni", R_all[:-1], dv)
    positions = np.empty((n_samples + 1, 3))
    positions[0] = p0
    mid_v = 0.5 * (v_analytic[1:] + v_analytic[:-1])
    positions[1:] = p0 + np.cumsum(mid_v * dt, axis=0)

    # Bias random walks at the sample rate.
    noise = spec.noise
    bg0 = rng.normal(scale=noise.gyro_bias0, size=3) if noise.gyro_bias0 > 0 else np.zeros(3)
    ba0 = rng.normal(scale=noise.accel_bias0, size=3) if noise.accel_bias0 > 0 else np.zeros(3)
    bg_walk = np.cumsum(
        np.vstack([bg0, rng.normal(scale=noise.gyro_walk * np.sqrt(dt), size=(n_samples, 3))]), axis=0
    )
    ba_walk = np.cumsum(
        np.vstack([ba0, rng.normal(scale=noise.accel_walk * np.sqrt(dt), size=(n_samples, 3))]), axis=0
    )

    gyro_meas = gyro_true + bg_walk[:-1] + rng.normal(
        scale=noise.gyro_noise / np.sqrt(dt), size=(n_samples, 3)
    )
    accel_meas = accel_true + ba_walk[:-1] + rng.normal(
        scale=noise.accel_noise / np.sqrt(dt), size=(n_samples, 3)
    )

    kf_samples = np.arange(K) * spk
    kf_quat = quats[kf_samples]
    kf_trans = positions[kf_samples]
    kf_vel = v_analytic[kf_samples]
    kf_bg = bg_walk[kf_samples]
    kf_ba = ba_walk[kf_samples]

    cam_to_imu = Pose(Rotation.from_matrix(CAM_TO_IMU_ROT), CAM_TO_IMU_TRANS)
    R_wc = quat.to_matrix(kf_quat) @ CAM_TO_IMU_ROT
    t_wc = quat.to_matrix(kf_quat) @ CAM_TO_IMU_TRANS + kf_trans

    # Landmarks: oversample candidates, keep those with enough observations.
    landmarks, landmark_plane = _sample_landmarks(spec, planes, patches, rng)
    vis_count, _ = _visibility(spec, landmarks, R_wc, t_wc)
    planar_idx = np.flatnonzero(landmark_plane >= 0)
    nonplanar_idx = np.flatnonzero(landmark_plane < 0)
    ok = vis_count >= spec.min_obs_per_landmark
    planar_keep = _select_balanced(planar_idx, landmark_plane, ok, spec.n_planar_points, len(planes))
    nonplanar_ok = nonplanar_idx[ok[nonplanar_idx]]
    if planar_keep.shape[0] < spec.n_planar_points or nonplanar_ok.shape[0] < spec.n_nonplanar_points:
        raise InfeasibleTrajectory(
            "not enough visible landmarks; adjust trajectory or counts "
            f"(planar {planar_keep.shape[0]}/{spec.n_planar_points}, "
            f"non-planar {nonplanar_ok.shape[0]}/{spec.n_nonplanar_points})"
        )
    keep = np.concatenate([planar_keep, nonplanar_ok[: spec.n_nonplanar_points]])
    landmarks = landmarks[keep]
    landmark_plane = landmark_plane[keep]

    normals_true = np.empty_like(landmarks)
    for i, pid in enumerate(landmark_plane):
        normals_true[i] = planes[pid].normal if pid >= 0 else _random_unit(rng)
    landmark_normal = _perturb_normals(normals_true, noise.normal_sigma_deg, rng)

    obs_kf, obs_lm, obs_xy, obs_depth = _make_observations(
        spec, landmarks, R_wc, t_wc, rng
    )

    loops = _find_loops(kf_quat, kf_trans, K)

    fx = 460.0
    dataset = Dataset(
        spec=spec,
        intrinsics={"fx": fx, "fy": fx, "cx": 320.0, "cy": 240.0,
                    "fov_x": spec.fov_x, "fov_y": spec.fov_y},
        cam_to_imu=cam_to_imu,
        gravity=g.copy(),
        kf_times=times[kf_samples],
        kf_quat=kf_quat.copy(),
        kf_trans=kf_trans.copy(),
        kf_vel=kf_vel.copy(),
        kf_gyro_bias=kf_bg.copy(),
        kf_accel_bias=kf_ba.copy(),
        landmarks=landmarks,
        landmark_plane=landmark_plane,
        landmark_normal=landmark_normal,
        planes=planes,
        plane_kind=kinds,
        obs_kf=obs_kf,
        obs_lm=obs_lm,
        obs_xy=obs_xy,
        obs_depth=obs_depth,
        imu_time=times[:-1],
        imu_gyro=gyro_meas,
        imu_accel=accel_meas,
        samples_per_kf=spk,
        loops=loops,
    )
    return dataset


def _random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _sample_landmarks(spec: WorldSpec, planes, patches, rng):
    oversample = 4
    n_per_plane = int(np.ceil(oversample * spec.n_planar_points / max(len(planes), 1)))
    pts, plane_ids = [], []
    for pid, patch in enumerate(patches):
        p = _sample_patch_points(patch, n_per_plane, rng)
        pts.append(p)
        plane_ids.append(np.full(n_per_plane, pid))
    lo = np.asarray(spec.room_min, float) + 0.25
    hi = np.asarray(spec.room_max, float) - 0.25
    n_free = 8 * spec.n_nonplanar_points
    free = rng.uniform(lo, hi, size=(n_free, 3))
    # keep free points away from every plane so association gates stay clean
    dist_ok = np.ones(n_free, dtype=bool)
    for plane in planes:
        dist_ok &= np.abs(free @ plane.normal + plane.distance) > 0.16
    free = free[dist_ok]
    pts.append(free)
    plane_ids.append(np.full(free.shape[0], -1))
    return np.vstack(pts), np.concatenate(plane_ids)


def _select_balanced(planar_idx, landmark_plane, ok, count, n_planes):
    """Pick planar landmarks spread over planes (round-robin by plane)."""
    buckets = [planar_idx[(landmark_plane[planar_idx] == p) & ok[planar_idx]] for p in range(n_planes)]
    out = []
    ptr = [0] * n_planes
    while len(out) < count:
        advanced = False
        for p in range(n_planes):
            if len(out) >= count:
                break
            if ptr[p] < buckets[p].shape[0]:
                out.append(buckets[p][ptr[p]])
                ptr[p] += 1
                advanced = True
        if not advanced:
            break
    return np.array(out[:count], dtype=np.int64)


def _visibility(spec: WorldSpec, landmarks, R_wc, t_wc):
    K = R_wc.shape[0]
    count = np.zeros(landmarks.shape[0], dtype=np.int64)
    first = np.full(landmarks.shape[0], -1, dtype=np.int64)
    for k in range(K):
        pc = (landmarks - t_wc[k]) @ R_wc[k]
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = pc[:, 0] / z
            y = pc[:, 1] / z
        vis = (
            (z > spec.min_depth) & (z < spec.max_range)
            & (np.abs(x) < spec.fov_x) & (np.abs(y) < spec.fov_y)
        )
        first = np.where((first < 0) & vis, k, first)
        count += vis
    return count, first


def _make_observations(spec: WorldSpec, landmarks, R_wc, t_wc, rng):
    K = R_wc.shape[0]
    L = landmarks.shape[0]
    obs_kf, obs_lm, obs_xy, obs_depth = [], [], [], []
    n_obs = np.zeros(L, dtype=np.int64)
    fx = 460.0
    px_sigma = spec.noise.pixel_sigma_px / fx
    for k in range(K):
        pc = (landmarks - t_wc[k]) @ R_wc[k]
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = pc[:, 0] / z
            y = pc[:, 1] / z
        vis = (
            (z > spec.min_depth) & (z < spec.max_range)
            & (np.abs(x) < spec.fov_x) & (np.abs(y) < spec.fov_y)
            & (n_obs < spec.max_obs_per_landmark)
        )
        idx = np.flatnonzero(vis)
        n_obs[idx] += 1
        obs_kf.append(np.full(idx.shape[0], k, dtype=np.int64))
        obs_lm.append(idx)
        xy = np.column_stack([x[idx], y[idx]])
        if px_sigma > 0:
            xy = xy + rng.normal(scale=px_sigma, size=xy.shape)
        obs_xy.append(xy)
        depth = z[idx]
        if spec.noise.depth_rel > 0:
            depth = depth + depth * rng.normal(scale=spec.noise.depth_rel, size=depth.shape)
        obs_depth.append(depth)
    return (
        np.concatenate(obs_kf),
        np.concatenate(obs_lm),
        np.vstack(obs_xy),
        np.concatenate(obs_depth),
    )


def _find_loops(kf_quat, kf_trans, K, radius=0.3, angle_deg=15.0, min_gap=None, max_loops=3):
    min_gap = max(K // 3, 10) if min_gap is None else min_gap
    cands = []
    for m in range(K):
        d = np.linalg.norm(kf_trans[m + min_gap :] - kf_trans[m], axis=1)
        for off in np.flatnonzero(d < radius):
            n = m + min_gap + off
            dq = quat.multiply(quat.conjugate(kf_quat[m]), kf_quat[n])
            ang = np.linalg.norm(quat.to_rotvec(dq))
            if ang < np.deg2rad(angle_deg):
                cands.append((n - m, m, int(n)))
    cands.sort(key=lambda c: (-c[0], c[1]))
    loops, used = [], []
    for _, m, n in cands:
        if any(abs(m - m2) < 5 and abs(n - n2) < 5 for m2, n2 in used):
            continue
        used.append((m, n))
        T_m = Pose(Rotation(kf_quat[m]), kf_trans[m])
        T_n = Pose(Rotation(kf_quat[n]), kf_trans[n])
        loops.append(LoopPair(m, n, T_m.inverse().compose(T_n)))
        if len(loops) >= max_loops:
            break
    return loops


# --------------------------------------------------------------------------
# Perturbation and metrics


def perturb(dataset: Dataset, sigma_rot_deg: float, sigma_trans: float, seed: int,
            sigma_vel: float | None = None, sigma_gyro_bias: float | None = None,
            sigma_accel_bias: float | None = None) -> GbaStates:
    """Random-walk pose drift from ground truth (keyframe 0 stays exact).

    Velocities and biases get independent Gaussian noise; their sigmas
    default to scales derived from the pose sigmas so that zero pose noise
    means an identity perturbation. Landmark and plane states are left at
    ground truth; pipelines re-initialize them from observations (map
    building) before optimizing.
    """
    if sigma_vel is None:
        sigma_vel = sigma_trans
    if sigma_gyro_bias is None:
        sigma_gyro_bias = 0.2 * np.deg2rad(sigma_rot_deg)
    if sigma_accel_bias is None:
        sigma_accel_bias = 0.5 * sigma_trans
    rng = np.random.default_rng(seed)
    K = dataset.n_keyframes
    rot_steps = rng.normal(scale=np.deg2rad(sigma_rot_deg), size=(K, 3))
    trans_steps = rng.normal(scale=sigma_trans, size=(K, 3))
    rot_steps[0] = 0.0
    trans_steps[0] = 0.0
    rot_walk = np.cumsum(rot_steps, axis=0)
    trans_walk = np.cumsum(trans_steps, axis=0)

    quats = quat.normalize(quat.multiply(quat.from_rotvec(rot_walk), dataset.kf_quat))
    trans = dataset.kf_trans + trans_walk
    vel = dataset.kf_vel + rng.normal(scale=sigma_vel, size=(K, 3))
    bg = dataset.kf_gyro_bias + rng.normal(scale=sigma_gyro_bias, size=(K, 3))
    ba = dataset.kf_accel_bias + rng.normal(scale=sigma_accel_bias, size=(K, 3))
    return GbaStates(
        quats, trans, vel, bg, ba,
        dataset.landmarks.copy(),
        np.array([p.normal * p.distance for p in dataset.planes]),
        dataset.cam_to_imu, dataset.gravity,
    )


def align_trajectories(estimated, reference):
    """Closed-form rigid alignment (rotation+translation) of point sets."""
    est = np.asarray(estimated, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if est.shape != ref.shape:
        raise LengthMismatch(f"trajectory shapes differ: {est.shape} vs {ref.shape}")
    ce = est.mean(axis=0)
    cr = ref.mean(axis=0)
    H = (est - ce).T @ (ref - cr)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        S[2, 2] = -1.0
    R = Vt.T @ S @ U.T
    t = cr - R @ ce
    return R, t


def ate_rmse(estimated, reference) -> float:
    """RMSE of translation residuals after rigid alignment, meters."""
    est = np.asarray(estimated, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if est.shape != ref.shape:
        raise LengthMismatch(f"trajectory shapes differ: {est.shape} vs {ref.shape}")
    R, t = align_trajectories(est, ref)
    resid = est @ R.T + t - ref
    return float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))


# --------------------------------------------------------------------------
# Presets


def table3_spec(seed: int = 42, noise: NoiseSpec | None = None) -> WorldSpec:
    """Benchmark scale: 215 keyframes, 2236 planar + 2032 non-planar points,
    10 vertical and 6 horizontal planes."""
    return WorldSpec(seed=seed, noise=noise or NoiseSpec())


def medium_spec(seed: int = 7, noise: NoiseSpec | None = None) -> WorldSpec:
    return WorldSpec(
        n_keyframes=72,
        n_planar_points=700,
        n_nonplanar_points=500,
        n_horizontal_planes=3,
        n_vertical_planes=5,
        trajectory=TrajectorySpec(duration_s=24.0),
        seed=seed,
        noise=noise or NoiseSpec(),
    )


def small_spec(seed: int = 3, noise: NoiseSpec | None = None) -> WorldSpec:
    return WorldSpec(
        n_keyframes=30,
        n_planar_points=220,
        n_nonplanar_points=160,
        n_horizontal_planes=2,
        n_vertical_planes=4,
        trajectory=TrajectorySpec(duration_s=15.0),
        seed=seed,
        noise=noise or NoiseSpec(),
    )


def zero_noise_spec(seed: int = 11, n_keyframes: int = 40) -> WorldSpec:
    return WorldSpec(
        n_keyframes=n_keyframes,
        n_planar_points=260,
        n_nonplanar_points=200,
        n_horizontal_planes=3,
        n_vertical_planes=5,
        trajectory=TrajectorySpec(duration_s=16.0),
        seed=seed,
        noise=NoiseSpec.zero(),
    )
