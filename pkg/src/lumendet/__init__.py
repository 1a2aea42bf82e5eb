"""Desk-scale anchor-free object detection with a from-scratch autodiff core.

The package trains and evaluates two small detector variants (a pure C2f
model and one with area attention in its deepest stages) on deterministic
synthetic endoscopy-style scenes, entirely on CPU with numpy as the only
numeric dependency.
"""

__version__ = "0.1.0"

from .arch import DetectionModel, ModelConfig, build_model, v8_config, v12_config
from .estimator import LumenDetector
from .postprocess import BBox, Detection, decode, iou, letterbox, nms
from .tensor import Tensor, no_grad
from .train import TrainConfig, fit, load_checkpoint

__all__ = [
    "__version__",
    "BBox",
    "Detection",
    "DetectionModel",
    "LumenDetector",
    "ModelConfig",
    "Tensor",
    "TrainConfig",
    "build_model",
    "decode",
    "fit",
    "iou",
    "letterbox",
    "load_checkpoint",
    "nms",
    "no_grad",
    "v8_config",
    "v12_config",
]
