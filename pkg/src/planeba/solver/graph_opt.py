"""Pose-plane graph optimization: sequential odometry edges, loop edges, and
pose-plane edges over camera poses plus closest-point plane vectors.

Used to absorb loop-closure drift before global bundle adjustment. The
graph is small (6 dims per pose, 3 per plane), so the normal equations are
solved densely with the same damping policy as the main solver.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import DisconnectedGraph
from ..factors.pose_graph import PosePlaneEdge, RelativePoseEdge, eval_pose_plane, eval_relative_pose
from ..geometry import Plane, Pose, pose_boxplus
from .lm import SolverConfig


@dataclass
class GraphConfig:
    seq_rot_sigma: float = np.deg2rad(0.5)
    seq_trans_sigma: float = 0.02
    loop_rot_sigma: float = np.deg2rad(0.5)
    loop_trans_sigma: float = 0.02
    plane_cp_sigma: float = 0.05
    plane_edge_min_points: int = 8
    max_iterations: int = 50
    tol_cost_rel: float = 1e-10


def _check_connected(n_poses, edges):
    parent = list(range(n_poses))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in edges:
        ra, rb = find(e.frame_i), find(e.frame_j)
        if ra != rb:
            parent[ra] = rb
    roots = {find(i) for i in range(n_poses)}
    if len(roots) > 1:
        raise DisconnectedGraph(f"pose graph has {len(roots)} components")


def optimize_pose_plane_graph(poses, plane_vecs, rel_edges, plane_edges,
                              config: GraphConfig | None = None):
    """Minimize the graph energy; returns (poses, plane_vecs, info dict).

    ``poses`` are camera poses (list of Pose); the first pose is gauge-fixed.
    """
    cfg = config or GraphConfig()
    if not rel_edges:
        raise DisconnectedGraph("graph needs at least one relative-pose edge")
    _check_connected(len(poses), rel_edges)
    poses = list(poses)
    plane_vecs = np.array(plane_vecs, dtype=float).reshape(-1, 3)
    N, P = len(poses), plane_vecs.shape[0]
    dim = 6 * N + 3 * P
    t0 = time.perf_counter()

    def total_cost(ps, pv):
        c = 0.0
        for e in rel_edges:
            r, _, _ = eval_relative_pose(e, ps)
            c += 0.5 * float(r @ r)
        for e in plane_edges:
            r, _, _ = eval_pose_plane(e, ps, pv)
            c += 0.5 * float(r @ r)
        return c

    cost = total_cost(poses, plane_vecs)
    initial_cost = cost
    mu = None
    iterations = 0
    for _it in range(cfg.max_iterations):
        H = np.zeros((dim, dim))
        b = np.zeros(dim)
        for e in rel_edges:
            r, J_i, J_j = eval_relative_pose(e, poses)
            si, sj = 6 * e.frame_i, 6 * e.frame_j
            H[si : si + 6, si : si + 6] += J_i.T @ J_i
            H[sj : sj + 6, sj : sj + 6] += J_j.T @ J_j
            H[si : si + 6, sj : sj + 6] += J_i.T @ J_j
            H[sj : sj + 6, si : si + 6] += J_j.T @ J_i
            b[si : si + 6] -= J_i.T @ r
            b[sj : sj + 6] -= J_j.T @ r
        for e in plane_edges:
            r, J_p, J_pl = eval_pose_plane(e, poses, plane_vecs)
            si = 6 * e.frame
            sp = 6 * N + 3 * e.plane
            H[si : si + 6, si : si + 6] += J_p.T @ J_p
            H[sp : sp + 3, sp : sp + 3] += J_pl.T @ J_pl
            H[si : si + 6, sp : sp + 3] += J_p.T @ J_pl
            H[sp : sp + 3, si : si + 6] += J_pl.T @ J_p
            b[si : si + 6] -= J_p.T @ r
            b[sp : sp + 3] -= J_pl.T @ r

        if mu is None:
            mu = 1e-4 * max(H.diagonal().max(), 1e-12)
        accepted = False
        for _retry in range(10):
            Hd = H.copy()
            Hd[np.diag_indices(dim)] += mu
            free = np.ones(dim, dtype=bool)
            free[0:6] = False
            try:
                delta = np.zeros(dim)
                delta[free] = np.linalg.solve(Hd[np.ix_(free, free)], b[free])
            except np.linalg.LinAlgError:
                mu *= 2.0
                continue
            trial_poses = [
                pose_boxplus(poses[i], delta[6 * i : 6 * i + 6]) for i in range(N)
            ]
            trial_planes = plane_vecs + delta[6 * N :].reshape(P, 3)
            trial_cost = total_cost(trial_poses, trial_planes)
            if np.isfinite(trial_cost) and trial_cost <= cost:
                poses = trial_poses
                plane_vecs = trial_planes
                prev = cost
                cost = trial_cost
                mu /= 3.0
                accepted = True
                break
            mu *= 2.0
        iterations += 1
        if not accepted:
            break
        if prev > 0 and (prev - cost) / max(prev, 1e-300) < cfg.tol_cost_rel:
            break

    info = {
        "initial_cost": initial_cost,
        "final_cost": cost,
        "iterations": iterations,
        "time_ms": (time.perf_counter() - t0) * 1e3,
    }
    return poses, plane_vecs, info


def fit_plane_to_points(points, min_points: int = 8):
    """General least-squares plane through the points (centroid + SVD).

    Returns (plane, cp_sigma_estimate) or None when the set is too small or
    degenerate. The sigma estimate folds the fit's DOF-corrected normal
    uncertainty through the centroid lever arm, which dominates for small
    far-away patches (closest-point error ~ range * normal tilt); exact
    interpolation of too few noisy points is rejected outright.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n_pts = pts.shape[0]
    if n_pts < max(min_points, 4):
        return None
    centroid = pts.mean(axis=0)
    _, s, Vt = np.linalg.svd(pts - centroid)
    if s[1] < 1e-9:
        return None  # points are collinear
    n = Vt[2]
    plane = Plane(n, -float(n @ centroid))
    resid_var = s[2] ** 2 / max(n_pts - 3, 1)  # per-point residual variance
    tilt_var = resid_var / s[1] ** 2  # worst in-plane axis
    offset_var = resid_var / n_pts
    lever = float(np.linalg.norm(centroid))
    cp_sigma = float(np.sqrt(lever * lever * tilt_var + offset_var))
    return plane, cp_sigma


def build_pose_plane_graph(dataset, plane_map, states, config: GraphConfig | None = None,
                           include_planes: bool = True):
    """Graph construction for the loop pipeline.

    Sequential edges measure the current (drifted) relative camera poses;
    loop edges come from the dataset's declared pairs; plane edges measure
    each plane in the observing keyframe's camera frame, fit from that
    keyframe's member depth points.
    """
    cfg = config or GraphConfig()
    K = dataset.n_keyframes
    cam_poses = [states.cam_pose(k) for k in range(K)]
    t_ic = states.cam_to_imu

    rel_edges = []
    for k in range(K - 1):
        measured = cam_poses[k].inverse().compose(cam_poses[k + 1])
        rel_edges.append(
            RelativePoseEdge(k, k + 1, measured, cfg.seq_rot_sigma, cfg.seq_trans_sigma)
        )
    for lp in dataset.loops:
        measured_cam = t_ic.inverse().compose(lp.relative).compose(t_ic)
        rel_edges.append(
            RelativePoseEdge(lp.frame_a, lp.frame_b, measured_cam,
                             cfg.loop_rot_sigma, cfg.loop_trans_sigma, is_loop=True)
        )

    plane_edges = []
    plane_ids = []
    plane_vecs = []
    if include_planes and plane_map is not None:
        plane_ids = sorted(plane_map.planes)
        for idx, pid in enumerate(plane_ids):
            mp = plane_map.planes[pid]
            plane_vecs.append(mp.plane.normal * mp.plane.distance)
            for k, pts in mp.local_points.items():
                fit = fit_plane_to_points(pts, cfg.plane_edge_min_points)
                if fit is None:
                    continue
                local, cp_sigma_est = fit
                sigma = float(np.hypot(cfg.plane_cp_sigma, cp_sigma_est))
                plane_edges.append(PosePlaneEdge(int(k), idx, local, sigma))
    plane_vecs = np.array(plane_vecs).reshape(-1, 3)
    return cam_poses, plane_vecs, rel_edges, plane_edges, plane_ids


def apply_graph_result(dataset, plane_map, states, positions, cam_poses, plane_vecs, plane_ids):
    """Write optimized camera poses and planes back into keyframe states,
    re-anchor landmarks by their anchor keyframe's pose correction, and
    update map planes. Returns (states, positions)."""
    from ..geometry import PlaneCP
    from .assemble import first_observation

    old_cam = [states.cam_pose(k) for k in range(dataset.n_keyframes)]
    t_ic_inv = states.cam_to_imu.inverse()
    new_states = states.copy()
    for k, cp in enumerate(cam_poses):
        imu_pose = cp.compose(t_ic_inv)
        new_states.kf_quat[k] = imu_pose.rotation.quaternion
        new_states.kf_trans[k] = imu_pose.translation
        # rotate world-frame velocity by the local rotation correction
        dR = imu_pose.rotation.compose(states.imu_pose(k).rotation.inverse())
        new_states.kf_vel[k] = dR.rotate(states.kf_vel[k])
    new_states._rot = new_states._cam_rot = new_states._cam_trans = None

    first = first_observation(dataset)
    positions = positions.copy()
    for lm in range(positions.shape[0]):
        row = first[lm]
        if row < 0:
            continue
        k = int(dataset.obs_kf[row])
        correction = cam_poses[k].compose(old_cam[k].inverse())
        positions[lm] = correction.transform(positions[lm])

    if plane_map is not None and len(plane_ids):
        for idx, pid in enumerate(plane_ids):
            mp = plane_map.planes[pid]
            mp.plane = PlaneCP(plane_vecs[idx]).to_plane()
        plane_map.snap_members(positions)
    return new_states, positions
