"""Plane lifecycle: detection from labeled points, refinement, merging, and
point-plane association with a geometric-consistency check.

Detection histograms landmark positions using their normal labels (the
simulator stands in for mesh normals): z-height bins for horizontal
candidates, joint (azimuth, offset) bins for vertical candidates. Peaks
above a support threshold are refined; horizontal fits average z, vertical
fits solve the stacked system [x_k, y_k] . u = -1 by QR and recover the
plane from u.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyPointSet, RankDeficient
from .geometry import Plane


@dataclass
class PlaneMapConfig:
    detect_parallel_deg: float = 10.0  # normal-vs-gravity gate for horizontal
    detect_perp_deg: float = 10.0  # normal-perpendicularity gate for vertical
    admit_angle_deg: float = 10.0  # point admission: normal agreement
    admit_dist: float = 0.05  # point admission: distance to plane, meters
    merge_angle_deg: float = 10.0
    merge_dist: float = 0.10
    assoc_dist: float = 0.10  # candidate gate, meters
    assoc_min_views: int = 4  # "observed in more than 3 keyframes"
    assoc_normal_gate: bool = True  # require label-normal compatibility
    consistency_rel: float = 0.20  # projected-vs-free RMS relative increase
    consistency_max_px: float = 2.0  # max projected reprojection error
    max_failures: int = 3
    hist_offset_bin: float = 0.02  # meters
    hist_azimuth_bin_deg: float = 2.0
    min_support: int = 50
    boundary_margin: float = 0.25  # containment slack for association/merge


@dataclass
class MapPlane:
    plane_id: int
    plane: Plane
    kind: str  # "horizontal" | "vertical"
    members: list = field(default_factory=list)  # landmark ids
    anchor_keyframe: int = -1
    # plane-frame bounding box of member/boundary points: (u_axis, v_axis, min2, max2)
    boundary: tuple = None
    local_points: dict = field(default_factory=dict)  # keyframe -> [N,3] camera-frame points


@dataclass
class PlaneCandidateSet:
    plane_id: int
    failures: dict = field(default_factory=dict)  # landmark id -> failure count


def refine_horizontal(points) -> Plane:
    """n = [0,0,1], offset = -mean(z)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyPointSet("horizontal refinement needs at least one point")
    return Plane([0.0, 0.0, 1.0], -float(pts[:, 2].mean()))


def refine_vertical(points) -> Plane:
    """Least-squares vertical plane through the points' xy projections.

    Solves [x_k, y_k] @ u = -1 by QR; the plane is n = u*d with
    d = -1/|u| (so the worked example {(2,0),(2,1),(2,5)} gives
    n=[1,0,0], d=-2). Rank-deficient systems (collinear-through-origin
    projections, planes through the origin) raise RankDeficient.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] < 2:
        raise RankDeficient("vertical refinement needs at least two points")
    A = pts[:, :2]
    rhs = -np.ones(A.shape[0])
    Q, R = np.linalg.qr(A)
    diag = np.abs(np.diag(R))
    if diag.min() < 1e-9 * max(diag.max(), 1.0):
        raise RankDeficient("xy projections are rank deficient")
    u = np.linalg.solve(R, Q.T @ rhs)
    norm_u = np.linalg.norm(u)
    if norm_u < 1e-9:
        raise RankDeficient("degenerate solution (plane through origin)")
    d = -1.0 / norm_u
    n = np.array([u[0] * d, u[1] * d, 0.0])
    return Plane(n, d)


def detect_planes(points, normals, gravity, config: PlaneMapConfig | None = None):
    """Histogram-based detection of horizontal and vertical planes.

    ``points`` [N,3] with unit ``normals`` [N,3] labels; returns refined
    Plane objects (horizontal first, then vertical), possibly empty.
    """
    cfg = config or PlaneMapConfig()
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    nrm = np.asarray(normals, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        return []
    gravity = np.asarray(gravity, dtype=float)
    up = -gravity / np.linalg.norm(gravity)

    dot_up = nrm @ up
    horiz_mask = np.abs(dot_up) > np.cos(np.deg2rad(cfg.detect_parallel_deg))
    vert_mask = np.abs(dot_up) < np.sin(np.deg2rad(cfg.detect_perp_deg))

    planes = []
    used = np.zeros(pts.shape[0], dtype=bool)

    # Horizontal: peak search over z bins (neighbor-smoothed so mild drift
    # warping cannot split a floor across two bins).
    hz = pts[horiz_mask, 2]
    hz_idx = np.flatnonzero(horiz_mask)
    if hz.shape[0] >= cfg.min_support:
        zbin = np.floor(hz / cfg.hist_offset_bin).astype(np.int64)
        for peak in _histogram_peaks(zbin, cfg.min_support, smooth=1):
            z0 = (peak + 0.5) * cfg.hist_offset_bin
            near = np.abs(hz - z0) < max(cfg.admit_dist, 2.0 * cfg.hist_offset_bin)
            cand = hz_idx[near & ~used[hz_idx]]
            if cand.shape[0] < cfg.min_support:
                continue
            plane = refine_horizontal(pts[cand])
            admit = _admitted(pts, nrm, plane, cfg) & ~used
            if admit.sum() < cfg.min_support:
                continue
            plane = refine_horizontal(pts[admit])
            used |= admit
            planes.append(plane)

    # Vertical: azimuth-and-offset histogram, evaluated hierarchically so
    # normal-label noise cannot fragment the offset axis. The azimuth of
    # each candidate set is refined to the circular mean of its labels
    # before offsets are measured (a bin-center azimuth error sweeps long
    # walls across several offset bins). Extra rounds recover planes whose
    # azimuth peak was shadowed by a stronger neighbor.
    for _round in range(3):
        v_idx = np.flatnonzero(vert_mask & ~used)
        if v_idx.shape[0] < cfg.min_support:
            break
        found_in_round = 0
        az = np.arctan2(nrm[v_idx, 1], nrm[v_idx, 0])
        az_bin_w = np.deg2rad(cfg.hist_azimuth_bin_deg)
        n_az = max(int(np.ceil(2 * np.pi / az_bin_w)), 4)
        az_bin = np.floor((az % (2 * np.pi)) / (2 * np.pi) * n_az).astype(np.int64) % n_az
        counts = np.bincount(az_bin, minlength=n_az).astype(float)
        kernel = 2  # +-2 bins covers the label noise
        smoothed = sum(np.roll(counts, s) for s in range(-kernel, kernel + 1))
        for az_peak in _circular_peaks(smoothed, cfg.min_support, suppress=2):
            theta0 = (az_peak + 0.5) * 2 * np.pi / n_az
            delta = np.arctan2(np.sin(az - theta0), np.cos(az - theta0))
            in_az = np.abs(delta) < np.deg2rad(cfg.admit_angle_deg)
            sel = v_idx[in_az & ~used[v_idx]]
            if sel.shape[0] < cfg.min_support:
                continue
            # circular-mean azimuth of the selected labels
            mean_vec = np.array([
                nrm[sel, 0].sum(), nrm[sel, 1].sum()
            ])
            theta = float(np.arctan2(mean_vec[1], mean_vec[0]))
            direction = np.array([np.cos(theta), np.sin(theta)])
            offs = pts[sel, :2] @ direction
            off_bin = np.floor(offs / cfg.hist_offset_bin).astype(np.int64)
            for off_peak in _histogram_peaks(off_bin, cfg.min_support, smooth=1):
                rho = (off_peak + 0.5) * cfg.hist_offset_bin
                window = max(cfg.admit_dist, 2.0 * cfg.hist_offset_bin)
                cand = sel[np.abs(offs - rho) < window]
                cand = cand[~used[cand]]
                if cand.shape[0] < cfg.min_support:
                    continue
                try:
                    plane = refine_vertical(pts[cand])
                except RankDeficient:
                    continue
                admit = _admitted(pts, nrm, plane, cfg) & ~used
                if admit.sum() < cfg.min_support:
                    continue
                try:
                    plane = refine_vertical(pts[admit])
                except RankDeficient:
                    continue
                used |= admit
                planes.append(plane)
                found_in_round += 1
        if found_in_round == 0:
            break
    return planes


def _circular_peaks(smoothed, min_support, suppress):
    order = np.argsort(-smoothed, kind="stable")
    n = smoothed.shape[0]
    peaks, taken = [], []
    for i in order:
        if smoothed[i] < min_support:
            break
        if any(min(abs(i - t), n - abs(i - t)) <= suppress for t in taken):
            continue
        taken.append(i)
        peaks.append(int(i))
    return peaks


def _histogram_peaks(bins, min_support, smooth: int = 0):
    """Bin labels whose (optionally neighbor-summed) count clears the
    support threshold, largest first; adjacent winners are suppressed."""
    if bins.size == 0:
        return []
    labels, counts = np.unique(bins, return_counts=True)
    if smooth:
        dense = dict(zip(labels.tolist(), counts.tolist()))
        counts = np.array(
            [sum(dense.get(int(l) + s, 0) for s in range(-smooth, smooth + 1)) for l in labels]
        )
    order = np.argsort(-counts, kind="stable")
    peaks = []
    taken = set()
    for i in order:
        if counts[i] < min_support:
            break
        lab = labels[i]
        if any(abs(lab - t) <= 1 + smooth for t in taken):
            continue
        taken.add(lab)
        peaks.append(lab)
    return peaks


def _admitted(pts, nrm, plane: Plane, cfg: PlaneMapConfig):
    dist_ok = np.abs(plane.signed_distance(pts)) < cfg.admit_dist
    ang = np.abs(nrm @ plane.normal)
    ang_ok = ang > np.cos(np.deg2rad(cfg.admit_angle_deg))
    return dist_ok & ang_ok


def _plane_axes(plane: Plane):
    n = plane.normal
    ref = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(n, ref)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return u, v


def compute_boundary(plane: Plane, points):
    """Axis-aligned bounding box of the points in the plane's 2D frame."""
    u, v = _plane_axes(plane)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    uv = np.column_stack([pts @ u, pts @ v])
    return (u, v, uv.min(axis=0), uv.max(axis=0))


def _boxes_overlap(plane_a: MapPlane, plane_b: MapPlane, margin: float) -> bool:
    if plane_a.boundary is None or plane_b.boundary is None:
        return True
    u, v, amin, amax = plane_a.boundary
    # project B's boundary corners onto A's axes
    ub, vb, bmin, bmax = plane_b.boundary
    corners = []
    for s in (bmin[0], bmax[0]):
        for t in (bmin[1], bmax[1]):
            corners.append(s * ub + t * vb)
    corners = np.array(corners)
    cu = corners @ u
    cv = corners @ v
    return not (
        cu.max() < amin[0] - margin or cu.min() > amax[0] + margin
        or cv.max() < amin[1] - margin or cv.min() > amax[1] + margin
    )


def planes_compatible(a: Plane, b: Plane, angle_deg: float, dist: float) -> bool:
    """Angle and offset gates, sign-aligned."""
    c = float(a.normal @ b.normal)
    if abs(c) < np.cos(np.deg2rad(angle_deg)):
        return False
    d_b = b.distance if c >= 0 else -b.distance
    return abs(a.distance - d_b) < dist


class PlaneMap:
    """Single-writer container of map planes and landmark membership."""

    def __init__(self, config: PlaneMapConfig | None = None):
        self.config = config or PlaneMapConfig()
        self.planes: dict[int, MapPlane] = {}
        self.candidates: dict[int, PlaneCandidateSet] = {}
        self.landmark_plane: dict[int, int] = {}
        self._next_id = 0

    def add_plane(self, plane: Plane, kind: str) -> MapPlane:
        mp = MapPlane(self._next_id, plane, kind)
        self.planes[mp.plane_id] = mp
        self.candidates[mp.plane_id] = PlaneCandidateSet(mp.plane_id)
        self._next_id += 1
        return mp

    def refit(self, mp: MapPlane, positions):
        pts = positions[np.array(mp.members, dtype=np.int64)]
        if mp.kind == "horizontal":
            mp.plane = refine_horizontal(pts)
        else:
            mp.plane = refine_vertical(pts)
        mp.boundary = compute_boundary(mp.plane, pts)

    def merge_planes(self, positions) -> list:
        """Merge compatible overlapping plane pairs; survivor = older id.

        Returns the list of (survivor_id, absorbed_id) actions; idempotent
        (a second immediate call returns no actions).
        """
        cfg = self.config
        actions = []
        changed = True
        while changed:
            changed = False
            ids = sorted(self.planes)
            for i, a_id in enumerate(ids):
                for b_id in ids[i + 1 :]:
                    a, b = self.planes.get(a_id), self.planes.get(b_id)
                    if a is None or b is None:
                        continue
                    if not planes_compatible(a.plane, b.plane, cfg.merge_angle_deg, cfg.merge_dist):
                        continue
                    if not _boxes_overlap(a, b, cfg.boundary_margin):
                        continue
                    a.members = sorted(set(a.members) | set(b.members))
                    for kf, pts in b.local_points.items():
                        if kf in a.local_points:
                            a.local_points[kf] = np.vstack([a.local_points[kf], pts])
                        else:
                            a.local_points[kf] = pts
                    if b.anchor_keyframe >= 0:
                        a.anchor_keyframe = (
                            b.anchor_keyframe
                            if a.anchor_keyframe < 0
                            else min(a.anchor_keyframe, b.anchor_keyframe)
                        )
                    for lm in b.members:
                        self.landmark_plane[lm] = a_id
                    del self.planes[b_id]
                    self.candidates.pop(b_id, None)
                    if a.members:
                        self.refit(a, positions)
                    actions.append((a_id, b_id))
                    changed = True
        return actions

    def snap_members(self, positions):
        """Project member landmarks exactly onto their plane (in place)."""
        for mp in self.planes.values():
            if mp.members:
                idx = np.array(mp.members, dtype=np.int64)
                positions[idx] = mp.plane.project(positions[idx])


def associate_points(plane_map: PlaneMap, plane_id: int, positions, observations,
                     states, focal: float, normals=None) -> list:
    """Admit landmarks onto one plane per the candidate + consistency rules.

    ``observations`` is (obs_kf, obs_lm, obs_xy) arrays; ``states`` provides
    camera poses for reprojection; ``normals`` are optional per-landmark
    label normals (substituting the mesh-containment test together with the
    boundary box). Returns the admitted landmark ids; admitted positions
    are snapped onto the plane in place. Candidates failing the consistency
    check ``max_failures`` times are dropped.
    """
    cfg = plane_map.config
    mp = plane_map.planes[plane_id]
    cand_set = plane_map.candidates[plane_id]
    obs_kf, obs_lm, obs_xy = observations

    free = np.array(
        [lm for lm in range(positions.shape[0]) if plane_map.landmark_plane.get(lm) is None],
        dtype=np.int64,
    )
    if free.size == 0:
        return []
    dist = np.abs(mp.plane.signed_distance(positions[free]))
    near = free[dist < cfg.assoc_dist]
    if cfg.assoc_normal_gate and normals is not None and near.size:
        dots = np.abs(np.asarray(normals)[near] @ mp.plane.normal)
        near = near[dots > np.cos(np.deg2rad(2.0 * cfg.admit_angle_deg))]
    if mp.boundary is not None and near.size:
        u, v, bmin, bmax = mp.boundary
        uv = np.column_stack([positions[near] @ u, positions[near] @ v])
        inside = (
            (uv[:, 0] > bmin[0] - cfg.boundary_margin) & (uv[:, 0] < bmax[0] + cfg.boundary_margin)
            & (uv[:, 1] > bmin[1] - cfg.boundary_margin) & (uv[:, 1] < bmax[1] + cfg.boundary_margin)
        )
        near = near[inside]

    admitted = []
    dropped = [lm for lm, f in cand_set.failures.items() if f >= cfg.max_failures]
    for lm in near:
        lm = int(lm)
        if cand_set.failures.get(lm, 0) >= cfg.max_failures:
            continue
        sel = obs_lm == lm
        if sel.sum() < cfg.assoc_min_views:
            continue
        free_rms, free_max = _reproj_stats(positions[lm], obs_kf[sel], obs_xy[sel], states, focal)
        snapped = mp.plane.project(positions[lm])
        proj_rms, proj_max = _reproj_stats(snapped, obs_kf[sel], obs_xy[sel], states, focal)
        rel = (proj_rms - free_rms) / max(free_rms, 1e-12)
        if rel < cfg.consistency_rel and proj_max < cfg.consistency_max_px:
            positions[lm] = snapped
            mp.members.append(lm)
            plane_map.landmark_plane[lm] = plane_id
            cand_set.failures.pop(lm, None)
            admitted.append(lm)
        else:
            cand_set.failures[lm] = cand_set.failures.get(lm, 0) + 1
    mp.members = sorted(set(mp.members))
    return admitted


def _reproj_stats(position, kf_ids, obs_xy, states, focal):
    R_wc = states.cam_rotations()[kf_ids]
    t_wc = states.cam_translations()[kf_ids]
    pc = np.einsum("nji,nj->ni", R_wc, position[None, :] - t_wc)
    z = np.clip(pc[:, 2], 1e-6, None)
    err = (pc[:, :2] / z[:, None] - obs_xy) * focal
    norms = np.linalg.norm(err, axis=1)
    return float(np.sqrt(np.mean(norms**2))), float(norms.max())
