"""Learnable-template human mesh recovery at desk scale."""

from .config import TrainConfig, load_config, preset
from .model import MeshLeTemp, build_model

__all__ = ["MeshLeTemp", "TrainConfig", "build_model", "load_config", "preset"]
__version__ = "0.1.0"
