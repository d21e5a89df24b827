"""Plane-aware bundle adjustment: compressed homography and point-to-plane
factors over a sparse Levenberg-Marquardt back end, with a synthetic indoor
world generator and an ablation benchmark harness."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    NormalizedImagePoint,
    Plane,
    PlaneCP,
    Pose,
    Rotation,
    cp_boxplus,
    homography_from_states,
    plane_transform,
    pose_boxplus,
    pose_boxminus,
)
