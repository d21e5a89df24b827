"""Recovery of eliminated planar-point positions after a VIP solve.

Each member landmark is placed where its anchor-keyframe bearing ray meets
the optimized plane, so recovered points satisfy the plane equation
exactly.
"""

from __future__ import annotations

import numpy as np

from ..errors import RayParallelToPlane
from ..geometry import Plane, Pose


def intersect_ray_plane(origin, direction, plane: Plane) -> np.ndarray:
    """Point where origin + s*direction meets the plane (s unrestricted)."""
    denom = float(plane.normal @ direction)
    if abs(denom) < 1e-12:
        raise RayParallelToPlane("bearing ray is parallel to the plane")
    s = -(plane.distance + float(plane.normal @ origin)) / denom
    return np.asarray(origin, dtype=float) + s * np.asarray(direction, dtype=float)


def triangulate_plane_points(dataset, plane_map, states, positions=None) -> np.ndarray:
    """Fill member-landmark positions by anchor-ray/plane intersection.

    ``states`` carries the optimized keyframe poses and plane vectors are
    taken from the map (call after writing the solve result back). Returns
    a full [L, 3] position array (non-members copied from ``positions`` or
    zeros).
    """
    from .assemble import first_observation

    L = dataset.n_landmarks
    out = np.zeros((L, 3)) if positions is None else np.asarray(positions, dtype=float).copy()
    first = first_observation(dataset)
    R_wc = states.cam_rotations()
    t_wc = states.cam_translations()
    for lm, pid in plane_map.landmark_plane.items():
        row = first[lm]
        if row < 0:
            continue
        k = int(dataset.obs_kf[row])
        bearing = np.array([dataset.obs_xy[row, 0], dataset.obs_xy[row, 1], 1.0])
        direction = R_wc[k] @ bearing
        out[lm] = intersect_ray_plane(t_wc[k], direction, plane_map.planes[pid].plane)
    return out
