"""Decode raw head maps into detections: confidence filter, greedy NMS,
and letterbox coordinate plumbing between original and network frames."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arch import RawPrediction, STRIDES
from .tensor import ShapeError

DEFAULT_CONF_THRESH = 0.25
DEFAULT_IOU_THRESH = 0.45
PAD_GRAY = 114.0 / 255.0


@dataclass
class BBox:
    """Axis-aligned box in pixel space of a stated frame (x1 <= x2, y1 <= y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(
                f"degenerate box: ({self.x1},{self.y1})..({self.x2},{self.y2})")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class Detection:
    bbox: BBox
    confidence: float
    class_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class LetterboxMap:
    """Invertible mapping original frame -> padded network canvas."""

    scale: float
    pad_x: float
    pad_y: float
    orig_w: int
    orig_h: int
    canvas: int

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        if self.pad_x < 0 or self.pad_y < 0:
            raise ValueError("pads must be >= 0")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def decode(raw: RawPrediction, conf_thresh: float = DEFAULT_CONF_THRESH,
           image_index: int = 0) -> list:
    """Raw maps -> detections in the network-input frame.

    Cell (row r, col c) at stride s has center ((c+0.5)s, (r+0.5)s); the
    four box channels are softplus-activated distances in stride units to
    the left/top/right/bottom edges.  Confidence is sigmoid(obj) times
    sigmoid of the best class logit.
    """
    if not 0.0 <= conf_thresh <= 1.0:
        raise ValueError(f"conf_thresh {conf_thresh} outside [0, 1]")
    if len(raw.levels) != len(STRIDES):
        raise ShapeError(f"expected {len(STRIDES)} scales, got {len(raw.levels)}")
    sizes = set()
    for lv, stride in zip(raw.levels, STRIDES):
        if lv.stride != stride:
            raise ShapeError(f"stride mismatch: level claims {lv.stride}, expected {stride}")
        if lv.box.shape[2:] != lv.obj.shape[2:] or lv.box.shape[2:] != lv.cls.shape[2:]:
            raise ShapeError("box/obj/cls spatial dims differ within a scale")
        sizes.add((lv.box.shape[2] * stride, lv.box.shape[3] * stride))
    if len(sizes) != 1:
        raise ShapeError(f"scales disagree about the input size: {sorted(sizes)}")
    (in_h, in_w), = sizes

    dets = []
    for lv in raw.levels:
        s = float(lv.stride)
        box = lv.box.data[image_index]          # (4, H, W)
        obj = _sigmoid(lv.obj.data[image_index][0])
        cls = _sigmoid(lv.cls.data[image_index])  # (C, H, W)
        best_cls = cls.max(axis=0)
        best_id = cls.argmax(axis=0)
        conf = obj * best_cls
        rows, cols = np.nonzero(conf >= conf_thresh)
        if rows.size == 0:
            continue
        d = _softplus(box[:, rows, cols]) * s   # (4, K)
        cx = (cols + 0.5) * s
        cy = (rows + 0.5) * s
        x1 = np.clip(cx - d[0], 0.0, in_w)
        y1 = np.clip(cy - d[1], 0.0, in_h)
        x2 = np.clip(cx + d[2], 0.0, in_w)
        y2 = np.clip(cy + d[3], 0.0, in_h)
        for i in range(rows.size):
            dets.append(Detection(
                bbox=BBox(float(x1[i]), float(y1[i]), float(x2[i]), float(y2[i])),
                confidence=float(conf[rows[i], cols[i]]),
                class_id=int(best_id[rows[i], cols[i]])))
    return dets


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union has zero area."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def nms(dets: list, iou_thresh: float = DEFAULT_IOU_THRESH) -> list:
    """Greedy suppression.

    Candidates are visited by confidence descending (ties broken by larger
    area, then input order); each survivor suppresses later boxes whose IoU
    with it exceeds the threshold.
    """
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh {iou_thresh} outside [0, 1]")
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].confidence, -dets[i].bbox.area, i))
    kept = []
    for i in order:
        if all(iou(dets[i].bbox, dets[j].bbox) <= iou_thresh for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-major bilinear resize (half-pixel-center convention)."""
    c, h, w = img.shape
    if out_h == h and out_w == w:
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(np.float32)
    wx = np.clip(xs - x0, 0.0, 1.0).astype(np.float32)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    out = top * (1 - wy)[None, :, None] + bot * wy[None, :, None]
    return out.astype(np.float32)


def letterbox(image: np.ndarray, target: int,
              canvas: int | None = None) -> tuple:
    """Aspect-preserving resize onto a gray square canvas.

    The longer image side is scaled to ``target`` and the result is
    centered on a ``canvas`` x ``canvas`` board (default: the target
    itself, which must then be divisible by 32; an explicit larger canvas
    lets non-multiple-of-32 content sizes ride on a valid input).
    """
    if canvas is None:
        canvas = target
        if target % 32:
            raise ValueError(f"letterbox target {target} not divisible by 32")
    if canvas % 32:
        raise ValueError(f"letterbox canvas {canvas} not divisible by 32")
    if target <= 0 or canvas < target:
        raise ValueError(f"need 0 < target <= canvas, got {target}, {canvas}")
    c, h, w = image.shape
    if h <= 0 or w <= 0:
        raise ValueError(f"zero-sized image {h}x{w}")
    scale = target / max(h, w)
    new_h = max(1, int(round(h * scale)))
    new_w = max(1, int(round(w * scale)))
    resized = bilinear_resize(image, new_h, new_w)
    out = np.full((c, canvas, canvas), PAD_GRAY, dtype=np.float32)
    pad_y = (canvas - new_h) / 2.0
    pad_x = (canvas - new_w) / 2.0
    top, left = int(pad_y), int(pad_x)
    out[:, top:top + new_h, left:left + new_w] = resized
    return out, LetterboxMap(scale=scale, pad_x=pad_x, pad_y=pad_y,
                             orig_w=w, orig_h=h, canvas=canvas)


def unletterbox(det: Detection, m: LetterboxMap) -> Detection:
    """Map a network-frame detection back to original-image pixels."""
    b = det.bbox
    x1 = np.clip((b.x1 - m.pad_x) / m.scale, 0.0, m.orig_w)
    x2 = np.clip((b.x2 - m.pad_x) / m.scale, 0.0, m.orig_w)
    y1 = np.clip((b.y1 - m.pad_y) / m.scale, 0.0, m.orig_h)
    y2 = np.clip((b.y2 - m.pad_y) / m.scale, 0.0, m.orig_h)
    return Detection(bbox=BBox(float(x1), float(y1), float(x2), float(y2)),
                     confidence=det.confidence, class_id=det.class_id)


def apply_letterbox_box(b: BBox, m: LetterboxMap) -> BBox:
    """Forward mapping original-frame box -> network canvas (for training)."""
    return BBox(b.x1 * m.scale + m.pad_x, b.y1 * m.scale + m.pad_y,
                b.x2 * m.scale + m.pad_x, b.y2 * m.scale + m.pad_y)


def detection_record(frame: str, det: Detection) -> dict:
    return {"frame": frame, "class_id": det.class_id,
            "confidence": round(det.confidence, 6),
            "x1": round(det.bbox.x1, 2), "y1": round(det.bbox.y1, 2),
            "x2": round(det.bbox.x2, 2), "y2": round(det.bbox.y2, 2)}


def write_detections_jsonl(path, records: list) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_detections_jsonl(path) -> list:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records
