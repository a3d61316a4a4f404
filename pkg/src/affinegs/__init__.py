"""Physically structured velocity fields for dynamic Gaussian particles."""
from .dynamics import DynamicsModel, ModelConfig
from .scenes import generate, load_scene, preset, save_scene
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "DynamicsModel",
    "ModelConfig",
    "TrainConfig",
    "evaluate",
    "generate",
    "load_scene",
    "preset",
    "save_scene",
    "train",
]
