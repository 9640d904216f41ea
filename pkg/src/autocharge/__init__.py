"""Vision-force automatic charging simulation suite."""

__version__ = "0.1.0"

from .geometry import (Pose, Rotation, Twist, compose, cover_x_axis, invert,
                       rotation_from_axes)
from .camera import Intrinsics, PixelFeature, interaction_rows, project, servo_twist
from .perception import (AttemptResult, CoverEstimate, PointCloud,
                         attempt_correction, cover_pose, estimate_normals,
                         load_ply, save_ply, segment_by_normal_kmeans,
                         select_cover_cluster)
from .simworld import HoleGeometry, Scene, SceneConfig, WorldState, build_scene
from .control import (PiGains, attempt_probe, contact_detect, hinge_axis_pose,
                      open_cover, opening_twist, pi_force_z, run_pipeline)
from .policy import (InsertionEnv, PolicyParams, a2c_train, discounted_return,
                     train_insertion_policy,
                     episode_reward, load_policy, policy_act, random_search,
                     save_policy, spiral_search)
from .episode import EpisodeLog

__all__ = [
    "Pose", "Rotation", "Twist", "compose", "invert", "rotation_from_axes",
    "cover_x_axis", "Intrinsics", "PixelFeature", "project",
    "interaction_rows", "servo_twist", "PointCloud", "CoverEstimate",
    "AttemptResult", "estimate_normals", "segment_by_normal_kmeans",
    "select_cover_cluster", "cover_pose", "attempt_correction", "load_ply",
    "save_ply", "HoleGeometry", "Scene", "SceneConfig", "WorldState",
    "build_scene", "PiGains", "pi_force_z", "contact_detect", "attempt_probe",
    "hinge_axis_pose", "opening_twist", "open_cover", "run_pipeline",
    "InsertionEnv", "PolicyParams", "a2c_train", "train_insertion_policy", "episode_reward",
    "discounted_return", "policy_act", "random_search", "spiral_search",
    "load_policy", "save_policy", "EpisodeLog",
]
