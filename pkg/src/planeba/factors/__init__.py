from .homography import (  # noqa: F401
    CompressedHomographyBundle,
    CompressedHomographyFactor,
    HomographyPointBundle,
    HomographyPointFactor,
    build_compressed_homography,
    eval_compressed_homography,
    eval_homography_point,
    homography_flat,
    homography_flat_jacobian,
    point_pair_rows,
)
from .imu import ImuNoise, PreintegratedImu, eval_imu, preintegrate  # noqa: F401
from .point_plane import (  # noqa: F401
    CompressedPointToPlaneBundle,
    CompressedPointToPlaneFactor,
    PointToPlaneBundle,
    PointToPlanePointFactor,
    build_compressed_point_to_plane,
    eval_compressed_point_to_plane,
    eval_point_to_plane_point,
    local_plane,
    local_plane_jacobian,
)
from .pose_graph import (  # noqa: F401
    PosePlaneEdge,
    RelativePoseEdge,
    eval_pose_plane,
    eval_relative_pose,
)
from .reproj import ReprojBundle, ReprojDepthFactor, eval_reproj_depth  # noqa: F401
