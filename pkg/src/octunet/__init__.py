"""Octree U-Net for joint point cloud upsampling and cleaning."""

from .model import Model, ModelConfig, count_match, load_checkpoint, save_checkpoint
from .octree import Octree, batch_octrees, build_octree, extract_targets
from .shapes import ShapeSpec, sample_surface, sdf
from .train import TrainConfig, make_sample, train_loop

__version__ = "0.1.0"

__all__ = [
    "Model",
    "ModelConfig",
    "Octree",
    "ShapeSpec",
    "TrainConfig",
    "batch_octrees",
    "build_octree",
    "count_match",
    "extract_targets",
    "load_checkpoint",
    "make_sample",
    "sample_surface",
    "save_checkpoint",
    "sdf",
    "train_loop",
]
