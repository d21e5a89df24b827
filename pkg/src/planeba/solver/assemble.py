"""Map building and problem assembly for the four bundle-adjustment variants.

Variants:
  VI    - IMU + reprojection/depth for every point; no plane machinery.
  VI_P  - VI plus uncompressed per-point homography and point-to-plane
          factors (plane states added, planar-point states retained).
  VI_CP - VI_P with the plane-related factors compressed.
  VIP   - compressed plane factors and planar-point states removed (their
          reprojection/depth factors dropped; positions recovered after the
          solve by ray-plane intersection).

VI_P and VI_CP are built from the same per-point factor lists, so their
cost functions agree to floating-point roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidVariant
from ..factors.homography import (
    CompressedHomographyBundle,
    HomographyPointBundle,
    HomographyPointFactor,
    build_compressed_homography,
)
from ..factors.imu import ImuNoise, preintegrate
from ..factors.point_plane import (
    CompressedPointToPlaneBundle,
    PointToPlaneBundle,
    PointToPlanePointFactor,
    build_compressed_point_to_plane,
)
from ..factors.reproj import ReprojBundle
from ..planemap import PlaneMap, PlaneMapConfig, associate_points, planes_compatible
from .lm import Problem, SolverConfig
from .state import GbaStates

VARIANTS = ("VI", "VI_P", "VI_CP", "VIP")


@dataclass
class AssemblyConfig:
    variant: str = "VIP"
    homography_topology: str = "star"  # star | chain
    association_mode: str = "geometric"  # geometric | labeled
    pixel_sigma_px: float = 1.0
    homography_sigma_px: float = 1.5
    depth_sigma_rel: float = 0.0017
    depth_sigma_floor: float = 0.005
    point_plane_sigma: float = 0.02
    robust_kernel: bool = False
    huber_delta: float = 2.0  # whitened units
    plane_config: PlaneMapConfig = field(default_factory=PlaneMapConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "AssemblyConfig":
        d = dict(d)
        pc = d.pop("plane_config", None)
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        cfg = cls(**known)
        if isinstance(pc, dict):
            cfg.plane_config = PlaneMapConfig(**pc)
        return cfg


# --------------------------------------------------------------------------
# Map building


def backproject_landmarks(dataset, states: GbaStates) -> np.ndarray:
    """Initialize landmarks as the mean of their per-view depth
    back-projections through the current pose estimates."""
    L = dataset.n_landmarks
    R_wc = states.cam_rotations()[dataset.obs_kf]
    t_wc = states.cam_translations()[dataset.obs_kf]
    local = np.column_stack([
        dataset.obs_xy[:, 0] * dataset.obs_depth,
        dataset.obs_xy[:, 1] * dataset.obs_depth,
        dataset.obs_depth,
    ])
    world = np.einsum("nij,nj->ni", R_wc, local) + t_wc
    sums = np.zeros((L, 3))
    np.add.at(sums, dataset.obs_lm, world)
    counts = np.bincount(dataset.obs_lm, minlength=L).astype(float)
    counts[counts == 0] = 1.0
    return sums / counts[:, None]


def first_observation(dataset):
    """Per-landmark index of its first observation row, -1 if unobserved."""
    L = dataset.n_landmarks
    first = np.full(L, -1, dtype=np.int64)
    for i in range(dataset.obs_kf.shape[0]):
        if first[dataset.obs_lm[i]] < 0:
            first[dataset.obs_lm[i]] = i
    return first


def build_map(dataset, states: GbaStates, config: AssemblyConfig):
    """Detect planes on the initialized landmark cloud and associate points.

    Returns (PlaneMap, landmark positions). Member positions are snapped
    exactly onto their plane.
    """
    from ..planemap import detect_planes

    cfg = config.plane_config
    positions = backproject_landmarks(dataset, states)
    detected = detect_planes(positions, dataset.landmark_normal, dataset.gravity, cfg)

    plane_map = PlaneMap(cfg)
    for plane in detected:
        kind = "horizontal" if abs(plane.normal[2]) > 0.9 else "vertical"
        plane_map.add_plane(plane, kind)

    if config.association_mode == "labeled":
        _associate_labeled(plane_map, dataset, positions)
    else:
        obs = (dataset.obs_kf, dataset.obs_lm, dataset.obs_xy)
        focal = dataset.intrinsics["fx"]
        for pid in sorted(plane_map.planes):
            associate_points(plane_map, pid, positions, obs, states, focal,
                             normals=dataset.landmark_normal)

    # Refit from members, snap, record boundaries and per-keyframe points.
    from ..planemap import compute_boundary

    for pid in sorted(plane_map.planes):
        mp = plane_map.planes[pid]
        if len(mp.members) >= 3:
            plane_map.refit(mp, positions)
        plane_map.snap_members(positions)
        if mp.members:
            mp.boundary = compute_boundary(mp.plane, positions[np.array(mp.members)])
    plane_map.merge_planes(positions)
    plane_map.snap_members(positions)
    _collect_local_points(plane_map, dataset)
    return plane_map, positions


def _associate_labeled(plane_map: PlaneMap, dataset, positions):
    """Membership from simulator labels: detected planes are matched to the
    generator's planes and inherit their labeled points."""
    for pid in sorted(plane_map.planes):
        mp = plane_map.planes[pid]
        for gt_idx, gt in enumerate(dataset.planes):
            if planes_compatible(mp.plane, gt, angle_deg=5.0, dist=0.10):
                members = np.flatnonzero(dataset.landmark_plane == gt_idx)
                for lm in members:
                    if plane_map.landmark_plane.get(int(lm)) is None:
                        mp.members.append(int(lm))
                        plane_map.landmark_plane[int(lm)] = pid
                break
        mp.members = sorted(set(mp.members))


def _collect_local_points(plane_map: PlaneMap, dataset):
    """Per-(plane, keyframe) camera-frame depth points of member landmarks,
    plus each plane's anchor keyframe."""
    member_plane = np.full(dataset.n_landmarks, -1, dtype=np.int64)
    for lm, pid in plane_map.landmark_plane.items():
        member_plane[lm] = pid
    for mp in plane_map.planes.values():
        mp.local_points = {}
        mp.anchor_keyframe = -1
    pts = np.column_stack([
        dataset.obs_xy[:, 0] * dataset.obs_depth,
        dataset.obs_xy[:, 1] * dataset.obs_depth,
        dataset.obs_depth,
    ])
    order = np.argsort(dataset.obs_kf, kind="stable")
    for i in order:
        pid = member_plane[dataset.obs_lm[i]]
        if pid < 0:
            continue
        mp = plane_map.planes[pid]
        k = int(dataset.obs_kf[i])
        mp.local_points.setdefault(k, []).append(pts[i])
        if mp.anchor_keyframe < 0 or k < mp.anchor_keyframe:
            mp.anchor_keyframe = k
    for mp in plane_map.planes.values():
        mp.local_points = {k: np.array(v) for k, v in sorted(mp.local_points.items())}


# --------------------------------------------------------------------------
# Factor construction


def _homography_point_factors(dataset, plane_map: PlaneMap, plane_index: dict,
                              config: AssemblyConfig):
    """Per-point homography factors for all plane members, star or chain."""
    sigma = config.homography_sigma_px / dataset.intrinsics["fx"]
    obs_by_lm = {}
    for i in range(dataset.obs_kf.shape[0]):
        obs_by_lm.setdefault(int(dataset.obs_lm[i]), []).append(i)
    factors = []
    for pid in sorted(plane_map.planes):
        mp = plane_map.planes[pid]
        p_idx = plane_index[pid]
        for lm in mp.members:
            rows = obs_by_lm.get(lm, [])
            if len(rows) < 2:
                continue
            if config.homography_topology == "chain":
                pairs = list(zip(rows[:-1], rows[1:]))
            else:  # star anchored at the earliest observation
                pairs = [(rows[0], r) for r in rows[1:]]
            for ra, rb in pairs:
                factors.append(
                    HomographyPointFactor(
                        int(dataset.obs_kf[ra]), int(dataset.obs_kf[rb]), p_idx,
                        dataset.obs_xy[ra].copy(), dataset.obs_xy[rb].copy(), sigma,
                    )
                )
    return factors


def _point_plane_point_factors(plane_map: PlaneMap, plane_index: dict,
                               config: AssemblyConfig):
    factors = []
    for pid in sorted(plane_map.planes):
        mp = plane_map.planes[pid]
        p_idx = plane_index[pid]
        for k, pts in mp.local_points.items():
            for p in pts:
                factors.append(
                    PointToPlanePointFactor(k, p_idx, p, config.point_plane_sigma)
                )
    return factors


def _group_compress_homography(point_factors):
    groups = {}
    for f in point_factors:
        groups.setdefault(f.key(), []).append(f)
    return [build_compressed_homography(fs) for _key, fs in sorted(groups.items())]


def _compress_point_plane(plane_map: PlaneMap, plane_index: dict, config: AssemblyConfig):
    out = []
    for pid in sorted(plane_map.planes):
        mp = plane_map.planes[pid]
        p_idx = plane_index[pid]
        for k, pts in mp.local_points.items():
            out.append(
                build_compressed_point_to_plane(pts, k, p_idx, config.point_plane_sigma)
            )
    return out


def _preintegrate_all(dataset, states: GbaStates):
    noise = ImuNoise(
        dataset.spec.noise.gyro_noise, dataset.spec.noise.accel_noise,
        dataset.spec.noise.gyro_walk, dataset.spec.noise.accel_walk,
    )
    factors = []
    for k in range(dataset.n_keyframes - 1):
        gyro, accel, dts = dataset.imu_interval(k)
        factors.append(
            preintegrate(
                (gyro, accel, dts),
                states.kf_gyro_bias[k], states.kf_accel_bias[k],
                noise, k, k + 1,
            )
        )
    return factors


# --------------------------------------------------------------------------
# GBA assembly


def assemble_gba(dataset, plane_map: PlaneMap, positions, states: GbaStates,
                 config: AssemblyConfig, solver_config: SolverConfig | None = None,
                 imu_factors=None) -> Problem:
    """Build the GBA problem for one variant from a built map.

    ``positions`` are current landmark estimates (members snapped);
    ``states`` supplies keyframe states. Returns a Problem whose internal
    landmark/plane indexing is recorded in ``problem.landmark_ids`` and
    ``problem.plane_ids``.
    """
    variant = config.variant
    if variant not in VARIANTS:
        raise InvalidVariant(f"unknown variant {variant!r} (expected one of {VARIANTS})")
    use_planes = variant != "VI"
    compress = variant in ("VI_CP", "VIP")
    drop_members = variant == "VIP"

    member_mask = np.zeros(dataset.n_landmarks, dtype=bool)
    for lm in plane_map.landmark_plane:
        member_mask[lm] = True

    active = ~member_mask if drop_members else np.ones(dataset.n_landmarks, dtype=bool)
    landmark_ids = np.flatnonzero(active)
    lm_index = np.full(dataset.n_landmarks, -1, dtype=np.int64)
    lm_index[landmark_ids] = np.arange(landmark_ids.shape[0])

    plane_ids = sorted(plane_map.planes) if use_planes else []
    plane_index = {pid: i for i, pid in enumerate(plane_ids)}
    plane_vecs = (
        np.array([plane_map.planes[p].plane.normal * plane_map.planes[p].plane.distance
                  for p in plane_ids])
        if plane_ids
        else None
    )

    prob_states = GbaStates(
        states.kf_quat.copy(), states.kf_trans.copy(), states.kf_vel.copy(),
        states.kf_gyro_bias.copy(), states.kf_accel_bias.copy(),
        positions[landmark_ids].copy(), plane_vecs,
        states.cam_to_imu, states.gravity,
    )

    keep = active[dataset.obs_lm]
    depth_sigma = np.maximum(
        config.depth_sigma_rel * np.abs(dataset.obs_depth[keep]), config.depth_sigma_floor
    )
    reproj = ReprojBundle(
        dataset.obs_kf[keep], lm_index[dataset.obs_lm[keep]],
        dataset.obs_xy[keep], dataset.obs_depth[keep],
        config.pixel_sigma_px / dataset.intrinsics["fx"], depth_sigma,
        huber_delta=config.huber_delta if config.robust_kernel else None,
    )

    if imu_factors is None:
        imu_factors = _preintegrate_all(dataset, states)

    homo_points = homo_comp = pp_points = pp_comp = None
    if use_planes:
        point_factors = _homography_point_factors(dataset, plane_map, plane_index, config)
        if compress:
            homo_comp = CompressedHomographyBundle(_group_compress_homography(point_factors))
            pp_comp = CompressedPointToPlaneBundle(
                _compress_point_plane(plane_map, plane_index, config)
            )
        else:
            homo_points = HomographyPointBundle(
                point_factors,
                huber_delta=config.huber_delta if config.robust_kernel else None,
            )
            pp_points = PointToPlaneBundle(
                _point_plane_point_factors(plane_map, plane_index, config)
            )

    problem = Problem(
        prob_states,
        reproj=reproj,
        imu_factors=imu_factors,
        homography_points=homo_points,
        homography_compressed=homo_comp,
        point_plane_points=pp_points,
        point_plane_compressed=pp_comp,
        config=solver_config or SolverConfig(max_iterations=100, max_time_s=2.0),
    )
    problem.landmark_ids = landmark_ids
    problem.plane_ids = list(plane_ids)
    return problem


def assemble_lba(dataset, plane_map: PlaneMap, positions, states: GbaStates,
                 config: AssemblyConfig, newest_keyframe: int, window: int = 20,
                 solver_config: SolverConfig | None = None) -> Problem:
    """Local window problem: the newest ``window`` keyframes up to
    ``newest_keyframe`` are free; older keyframes observing shared structure
    contribute factors but stay fixed. Solver capped at 10 iterations/0.2 s.
    """
    newest = int(newest_keyframe)
    first_free = max(0, newest - window + 1)
    free = np.zeros(dataset.n_keyframes, dtype=bool)
    free[first_free : newest + 1] = True

    prob = assemble_gba(
        dataset, plane_map, positions, states, config,
        solver_config or SolverConfig(max_iterations=10, max_time_s=0.2),
    )

    # Window landmarks: observed by at least one free keyframe.
    lm_in = np.zeros(prob.states.n_landmarks, dtype=bool)
    bun = prob.reproj
    lm_in[bun.lm_idx[free[bun.kf_idx]]] = True
    keep_obs = lm_in[bun.lm_idx]
    kf_used = np.zeros(dataset.n_keyframes, dtype=bool)
    kf_used[bun.kf_idx[keep_obs]] = True
    kf_used[free] = True

    lm_ids = np.flatnonzero(lm_in)
    lm_remap = np.full(prob.states.n_landmarks, -1, dtype=np.int64)
    lm_remap[lm_ids] = np.arange(lm_ids.shape[0])

    reproj = ReprojBundle(
        bun.kf_idx[keep_obs], lm_remap[bun.lm_idx[keep_obs]],
        bun.obs[keep_obs], bun.depth[keep_obs],
        1.0 / bun.w_px[keep_obs], 1.0 / bun.w_depth[keep_obs],
        huber_delta=bun.huber_delta,
    )

    imu_keep = [f for f in prob.imu_factors if free[f.frame_i] or free[f.frame_j]]

    # Plane factors: keep groups touching a free keyframe.
    homo_points = homo_comp = pp_points = pp_comp = None
    if prob.homography_compressed is not None:
        kept = [f for f in prob.homography_compressed.factors
                if free[f.frame_i] or free[f.frame_j]]
        if kept:
            homo_comp = CompressedHomographyBundle(kept)
            kf_used[[f.frame_i for f in kept]] = True
            kf_used[[f.frame_j for f in kept]] = True
    if prob.homography_points is not None:
        kept = [f for f in prob.homography_points.factors
                if free[f.frame_i] or free[f.frame_j]]
        if kept:
            homo_points = HomographyPointBundle(kept, huber_delta=prob.homography_points.huber_delta)
            kf_used[[f.frame_i for f in kept]] = True
            kf_used[[f.frame_j for f in kept]] = True
    if prob.point_plane_compressed is not None:
        kept = [f for f in prob.point_plane_compressed.factors if free[f.keyframe]]
        if kept:
            pp_comp = CompressedPointToPlaneBundle(kept)
            kf_used[[f.keyframe for f in kept]] = True
    if prob.point_plane_points is not None:
        kept = [f for f in prob.point_plane_points.factors if free[f.keyframe]]
        if kept:
            pp_points = PointToPlaneBundle(kept)
            kf_used[[f.keyframe for f in kept]] = True

    lba_states = GbaStates(
        prob.states.kf_quat, prob.states.kf_trans, prob.states.kf_vel,
        prob.states.kf_gyro_bias, prob.states.kf_accel_bias,
        prob.states.landmarks[lm_ids], prob.states.planes,
        prob.states.cam_to_imu, prob.states.gravity,
    )

    out = Problem(
        lba_states,
        reproj=reproj,
        imu_factors=imu_keep,
        homography_points=homo_points,
        homography_compressed=homo_comp,
        point_plane_points=pp_points,
        point_plane_compressed=pp_comp,
        fixed_keyframes=~free,
        config=solver_config or SolverConfig(max_iterations=10, max_time_s=0.2),
    )
    out.landmark_ids = prob.landmark_ids[lm_ids]
    out.plane_ids = prob.plane_ids
    out.window_free = free
    out.window_fixed_observers = kf_used & ~free
    return out
