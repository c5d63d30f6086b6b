"""Local occupancy-enhanced grasp pose estimation on synthetic SDF scenes.

Single-view point clouds are aggregated into K rotated tri-plane groups;
occupancy is predicted only inside gripper-reachable cylinders around grasp
candidates, and the completed local shape drives 6-DoF pose decoding.
"""

__version__ = "0.1.0"

from .config import RunConfig, load_config
from .geometry import Quaternion, default_endpoints, quat_to_matrix, slerp_frames
from .model import GraspOccModel
from .occupancy import GraspRegionSpec, build_region
from .pipeline import run_inference
from .scenes import SdfPrimitive, SdfScene, ground_truth_occupancy, random_scene
from .training import evaluate_scenes, train

__all__ = [
    "GraspOccModel",
    "GraspRegionSpec",
    "Quaternion",
    "RunConfig",
    "SdfPrimitive",
    "SdfScene",
    "build_region",
    "default_endpoints",
    "evaluate_scenes",
    "ground_truth_occupancy",
    "load_config",
    "quat_to_matrix",
    "random_scene",
    "run_inference",
    "slerp_frames",
    "train",
]
