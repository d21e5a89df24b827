from .assemble import AssemblyConfig, VARIANTS, assemble_gba, assemble_lba, build_map  # noqa: F401
from .graph_opt import (  # noqa: F401
    GraphConfig,
    apply_graph_result,
    build_pose_plane_graph,
    optimize_pose_plane_graph,
)
from .lm import Problem, SolveReport, SolverConfig, solve_lm  # noqa: F401
from .state import GbaStates  # noqa: F401
from .triangulate import intersect_ray_plane, triangulate_plane_points  # noqa: F401
