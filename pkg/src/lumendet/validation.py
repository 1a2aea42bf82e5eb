"""Input validation helpers shared by the estimator facade and the CLI."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import DatasetManifest


def as_manifest(source) -> DatasetManifest:
    """Coerce a manifest, a path to a manifest file, or a path string."""
    if isinstance(source, DatasetManifest):
        return source
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.is_file():
            raise FileNotFoundError(f"manifest file not found: {path}")
        return DatasetManifest.load(path)
    raise TypeError(
        f"expected DatasetManifest or path, got {type(source).__name__}")


def ensure_chw_image(image) -> np.ndarray:
    """Validate one RGB image as float32 (3, H, W) in [0, 1].

    uint8 arrays are rescaled; (H, W, 3) layouts are transposed.
    """
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise ValueError(f"image must be 3-D, got shape {arr.shape}")
    if arr.shape[0] != 3 and arr.shape[2] == 3:
        arr = arr.transpose(2, 0, 1)
    if arr.shape[0] != 3:
        raise ValueError(f"image must have 3 channels, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32, copy=False)
    if arr.size and (arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6):
        raise ValueError(
            f"float image values must lie in [0, 1], got "
            f"[{arr.min():.3f}, {arr.max():.3f}]")
    return np.clip(arr, 0.0, 1.0)


def ensure_image_batch(images) -> list:
    """Normalize predict() input to a list of CHW images."""
    arr = np.asarray(images) if not isinstance(images, (list, tuple)) else None
    if arr is not None and arr.ndim == 3:
        return [ensure_chw_image(arr)]
    if arr is not None and arr.ndim == 4:
        return [ensure_chw_image(a) for a in arr]
    if isinstance(images, (list, tuple)):
        return [ensure_chw_image(a) for a in images]
    raise ValueError("expected an image, a batch of images, or a list of images")


def check_fitted(estimator, attribute: str = "model_") -> None:
    if not hasattr(estimator, attribute):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit() or "
            f"load a checkpoint first")
