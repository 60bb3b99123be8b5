"""sceneshift: instruction-driven rearrangement of instance-decomposed 3D scans."""

from .model import (
    ObjectInstance,
    OrientedBoundingBox,
    Pose,
    Scene,
    SceneError,
    SupportSurface,
    ValidationError,
    apply_pose,
    compute_obb,
    identity_pose,
)
from .sceneio import ManifestError, load_scene, save_scene, scene_from_dict, scene_to_dict
from .graph import (
    Edge,
    EdgeKind,
    SceneGraph,
    annotate_scene,
    build_graph,
    detect_against_wall,
    detect_facing,
    detect_on_top_of,
    estimate_front_normal,
    extract_support_surfaces,
    signed_distance_to_contour,
    signed_distances_to_contour,
)

__version__ = "0.1.0"

__all__ = [
    "ObjectInstance",
    "OrientedBoundingBox",
    "Pose",
    "Scene",
    "SceneError",
    "SupportSurface",
    "ValidationError",
    "ManifestError",
    "apply_pose",
    "compute_obb",
    "identity_pose",
    "load_scene",
    "save_scene",
    "scene_from_dict",
    "scene_to_dict",
    "Edge",
    "EdgeKind",
    "SceneGraph",
    "annotate_scene",
    "build_graph",
    "detect_against_wall",
    "detect_facing",
    "detect_on_top_of",
    "estimate_front_normal",
    "extract_support_surfaces",
    "signed_distance_to_contour",
    "signed_distances_to_contour",
]
