"""Signed directional distance fields from an ellipsoid prior plus a neural residual."""

from .ellipsoid import Ellipsoid, Ray, ellipsoid_forward
from .initialization import multi_ellipsoid_init
from .prior import PriorOutput, prior_forward
from .renderer import predict_pointcloud, render_distance_image
from .residual import SDDFModel, input_gradients, load_checkpoint, model_forward, save_checkpoint
from .scene import (Dataset, Scene, SensorModel, augment_negative, look_at, raycast_sddf,
                    synthesize, toy_room)
from .trainer import TrainConfig, evaluate, initialize_model, train
from .viewopt import ViewOptConfig, next_best_view, optimize_waypoints

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Ellipsoid", "PriorOutput", "Ray", "SDDFModel", "Scene", "SensorModel",
    "TrainConfig", "ViewOptConfig", "augment_negative", "ellipsoid_forward", "evaluate",
    "initialize_model", "input_gradients", "load_checkpoint", "look_at", "model_forward",
    "multi_ellipsoid_init", "next_best_view", "optimize_waypoints", "predict_pointcloud",
    "prior_forward", "raycast_sddf", "render_distance_image", "save_checkpoint", "synthesize",
    "toy_room", "train",
]
