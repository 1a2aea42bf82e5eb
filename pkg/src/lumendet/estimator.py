"""Scikit-learn style estimator facade over the detection pipeline."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .arch import build_model
from .postprocess import (DEFAULT_CONF_THRESH, DEFAULT_IOU_THRESH, decode,
                          letterbox, nms, unletterbox)
from .tensor import Tensor, no_grad
from .train import TrainConfig, evaluate_manifest, fit as fit_model, load_checkpoint
from .validation import as_manifest, check_fitted, ensure_image_batch


class LumenDetector(BaseEstimator):
    """Anchor-free single-class detector with a fit/predict interface.

    Parameters mirror the training configuration; ``fit`` trains a model on a
    dataset manifest and ``predict`` returns per-image detection lists.
    """

    def __init__(self, variant="v8", base_channels=8, image_size=160,
                 epochs=12, batch_size=16, lr0=1e-3, weight_decay=0.01,
                 warmup_epochs=3.0, conf_thresh=DEFAULT_CONF_THRESH,
                 iou_thresh=DEFAULT_IOU_THRESH, seed=0, out_dir=None,
                 quiet=True):
        self.variant = variant
        self.base_channels = base_channels
        self.image_size = image_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.conf_thresh = conf_thresh
        self.iou_thresh = iou_thresh
        self.seed = seed
        self.out_dir = out_dir
        self.quiet = quiet

    def _build(self):
        model = build_model(self.variant, seed=self.seed,
                            base_channels=self.base_channels)
        cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            image_size=self.image_size,
            lr0=self.lr0,
            weight_decay=self.weight_decay,
            warmup_epochs=self.warmup_epochs,
            seed=self.seed,
            model=model.cfg,
        )
        return model, cfg

    def fit(self, X, y=None, val=None):
        """Train on a dataset manifest (labels travel with the manifest).

        ``X`` is a DatasetManifest or a path to one; ``y`` must be None.
        ``val`` optionally names a validation manifest used for checkpoint
        selection; without it the training split doubles as validation.
        """
        if y is not None:
            raise ValueError(
                "y must be None; box labels are read from the manifest")
        train_manifest = as_manifest(X)
        val_manifest = as_manifest(val) if val is not None else train_manifest
        model, cfg = self._build()
        if self.out_dir is not None:
            out_dir = Path(self.out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            result = fit_model(model, train_manifest, val_manifest, cfg,
                               out_dir, quiet=self.quiet)
            self.checkpoint_path_ = result.checkpoint_path
        else:
            with tempfile.TemporaryDirectory(prefix="lumendet_fit_") as tmp:
                result = fit_model(model, train_manifest, val_manifest, cfg,
                                   Path(tmp), quiet=self.quiet)
        self.model_ = model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.best_map50_ = result.best_map50
        return self

    def load(self, checkpoint_path):
        """Restore a trained model from a checkpoint file."""
        model, meta = load_checkpoint(checkpoint_path)
        self.model_ = model
        self.checkpoint_meta_ = meta
        return self

    def predict(self, X):
        """Detect objects in images.

        Accepts one CHW/HWC image, a 4-D batch, or a list of images and
        returns one list of Detection records per image (a bare list for a
        single image input).
        """
        check_fitted(self)
        single = isinstance(X, np.ndarray) and X.ndim == 3
        images = ensure_image_batch(X)
        self.model_.eval()
        results = []
        with no_grad():
            for img in images:
                boxed, lbmap = letterbox(img, self.image_size)
                raw = self.model_(Tensor(boxed[None]))
                dets = nms(decode(raw, self.conf_thresh), self.iou_thresh)
                results.append([unletterbox(d, lbmap) for d in dets])
        return results[0] if single else results

    def score(self, X, y=None):
        """Mean average precision at IoU 0.5 over a dataset manifest."""
        if y is not None:
            raise ValueError(
                "y must be None; box labels are read from the manifest")
        check_fitted(self)
        report = evaluate_manifest(
            self.model_, as_manifest(X), self.image_size,
            conf_thresh=self.conf_thresh, iou_thresh=self.iou_thresh)
        return report.map50

    def evaluate(self, X):
        """Full evaluation report (mAP@0.5, mAP@0.5:0.95, PR curve)."""
        check_fitted(self)
        return evaluate_manifest(
            self.model_, as_manifest(X), self.image_size,
            conf_thresh=self.conf_thresh, iou_thresh=self.iou_thresh)
