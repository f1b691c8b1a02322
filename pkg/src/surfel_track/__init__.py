"""Direct sparse deformable surfel tracking.

Surfels are small textured planar patches anchored on a reference depth map.
They are tracked by minimizing a photometric error, either one at a time
under a fixed camera or jointly with the camera pose.  A synthetic scene
generator provides exact ground truth for verification.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AnchorOffSurface,
    BadArity,
    BehindCamera,
    DatasetError,
    InvalidDepth,
    LinearSolveFailure,
    OutOfBounds,
    OutOfImage,
    Singular,
    SurfelTrackError,
    TooSmall,
    TrackingLost,
    UnknownPreset,
)
from .geometry import DeformationModel, Pose, Surfel, SurfelState  # noqa: E402
from .imaging import DepthMap, Intrinsics, build_pyramid  # noqa: E402
from .optimizer import LmConfig, lm_solve  # noqa: E402
from .tracker import FrameResult, TrackConfig, prepare_surfels, track_static  # noqa: E402
from .joint import track_deformable, track_rigid_map  # noqa: E402
from .synth import make_scene, render_frame  # noqa: E402

__all__ = [
    "__version__",
    "AnchorOffSurface",
    "BadArity",
    "BehindCamera",
    "DatasetError",
    "InvalidDepth",
    "LinearSolveFailure",
    "OutOfBounds",
    "OutOfImage",
    "Singular",
    "SurfelTrackError",
    "TooSmall",
    "TrackingLost",
    "UnknownPreset",
    "DeformationModel",
    "Pose",
    "Surfel",
    "SurfelState",
    "DepthMap",
    "Intrinsics",
    "build_pyramid",
    "LmConfig",
    "lm_solve",
    "FrameResult",
    "TrackConfig",
    "prepare_surfels",
    "track_static",
    "track_deformable",
    "track_rigid_map",
    "make_scene",
    "render_frame",
]
