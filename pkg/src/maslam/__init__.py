"""Multi-agent RGB-D SLAM with Gaussian splat sub-maps: agents track against
local splat maps; a central server detects loops, optimizes the pose graph,
rigidly corrects the sub-maps, and fuses them into one renderable map.
"""

__version__ = "0.1.0"

from .config import LoopConfig, MappingConfig, RunConfig, TrackingConfig
from .geometry import PointCloud, SE3Pose, Twist
from .renderer import Gaussian, GaussianSet, RenderOutput, rasterize
from .world import CameraIntrinsics, Frame, SceneSpec

__all__ = [
    "LoopConfig", "MappingConfig", "RunConfig", "TrackingConfig",
    "PointCloud", "SE3Pose", "Twist",
    "Gaussian", "GaussianSet", "RenderOutput", "rasterize",
    "CameraIntrinsics", "Frame", "SceneSpec",
    "__version__",
]
