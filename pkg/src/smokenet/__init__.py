"""Lightweight smoke segmentation network on a small numpy autodiff core."""

from .model import ModelConfig, ModelOutput, SmokeNet, build, count_params, load_checkpoint, save_checkpoint
from .tensor_core import Tensor, no_grad

__all__ = [
    "ModelConfig",
    "ModelOutput",
    "SmokeNet",
    "Tensor",
    "build",
    "count_params",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
]
