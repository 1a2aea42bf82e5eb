"""Evaluation protocol: greedy IoU matching, 101-point average precision,
mAP over the 0.50:0.05:0.95 threshold sweep, PR curves, and the best-F1
precision/recall operating point."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .postprocess import BBox, Detection, iou

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
# exact k/100 divisions so threshold comparisons at rational recalls are stable
RECALL_SAMPLES = tuple(k / 100.0 for k in range(101))


@dataclass
class Annotation:
    """One ground-truth box in original-image pixels."""

    image_id: str
    bbox: BBox
    class_id: int = 0


def _check_frames(boxes_by_image: dict, image_sizes: dict, kind: str) -> None:
    tol = 1e-6
    for image_id, items in boxes_by_image.items():
        if image_id not in image_sizes:
            continue
        w, h = image_sizes[image_id]
        for item in items:
            b = item.bbox
            if b.x2 > w + tol or b.y2 > h + tol or b.x1 < -tol or b.y1 < -tol:
                raise ValueError(
                    f"{kind} box {b.as_tuple()} exceeds image '{image_id}' "
                    f"bounds {w}x{h}; coordinate frames are mixed")


def match(preds: dict, gts: dict, iou_thresh: float,
          image_sizes: dict | None = None) -> tuple:
    """Greedy matching over all images.

    `preds` maps image_id -> list of Detection, `gts` maps image_id ->
    list of Annotation.  Predictions are visited in one global pass by
    descending confidence (ties: image_id, then per-image index); each
    claims the unmatched same-image, same-class GT of highest IoU when
    that IoU reaches the threshold.  Returns ([(confidence, is_tp), ...]
    in visit order, total_gt).
    """
    if image_sizes:
        _check_frames(preds, image_sizes, "prediction")
        _check_frames(
            gts, image_sizes, "ground-truth")
    flat = []
    for image_id, dets in preds.items():
        for idx, det in enumerate(dets):
            flat.append((-det.confidence, str(image_id), idx, det))
    flat.sort(key=lambda rec: rec[:3])

    unmatched = {image_id: list(range(len(g))) for image_id, g in gts.items()}
    results = []
    for neg_conf, image_id, _, det in flat:
        candidates = unmatched.get(image_id, [])
        best_iou, best_pos = 0.0, -1
        for pos, gt_idx in enumerate(candidates):
            gt = gts[image_id][gt_idx]
            if gt.class_id != det.class_id:
                continue
            value = iou(det.bbox, gt.bbox)
            if value > best_iou:
                best_iou, best_pos = value, pos
        is_tp = best_iou >= iou_thresh and best_pos >= 0
        if is_tp:
            candidates.pop(best_pos)
        results.append((-neg_conf, is_tp))
    total_gt = sum(len(g) for g in gts.values())
    return results, total_gt


def average_precision(matches: list, total_gt: int) -> float:
    """101-point interpolated AP with a monotone precision envelope."""
    if total_gt < 0:
        raise ValueError("total_gt must be >= 0")
    if total_gt == 0:
        return 0.0
    ordered = sorted(matches, key=lambda m: -m[0])
    if not ordered:
        return 0.0
    tp = np.cumsum([1.0 if is_tp else 0.0 for _, is_tp in ordered])
    fp = np.cumsum([0.0 if is_tp else 1.0 for _, is_tp in ordered])
    recall = tp / total_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in RECALL_SAMPLES:
        idx = np.searchsorted(recall, r, side="left")
        ap += envelope[idx] if idx < len(envelope) else 0.0
    return float(ap / len(RECALL_SAMPLES))


@dataclass
class ThresholdEval:
    threshold: float
    ap: float
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    per_threshold: list = field(default_factory=list)
    pr_curve: list = field(default_factory=list)  # (recall, precision, confidence)
    map50: float = 0.0
    map5095: float = 0.0
    precision_best_f1: float = 0.0
    recall_best_f1: float = 0.0
    best_f1_confidence: float = 0.0
    undefined_ap: bool = False
    degenerate_curve: bool = False

    def to_dict(self) -> dict:
        return {
            "per_threshold": [vars(t).copy() for t in self.per_threshold],
            "pr_curve": [list(p) for p in self.pr_curve],
            "map50": self.map50,
            "map5095": self.map5095,
            "precision_best_f1": self.precision_best_f1,
            "recall_best_f1": self.recall_best_f1,
            "best_f1_confidence": self.best_f1_confidence,
            "undefined_ap": self.undefined_ap,
            "degenerate_curve": self.degenerate_curve,
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def precision_recall_at_best_f1(matches: list, total_gt: int) -> tuple:
    """Sweep every distinct confidence as a cutoff; return (P, R, cutoff)
    at maximum F1, preferring the higher cutoff on ties."""
    if not matches:
        raise ValueError("best-F1 sweep needs a non-empty match list")
    ordered = sorted(matches, key=lambda m: -m[0])
    confs = [c for c, _ in ordered]
    tp = np.cumsum([1 if is_tp else 0 for _, is_tp in ordered])
    fp = np.cumsum([0 if is_tp else 1 for _, is_tp in ordered])
    best = None
    for i in range(len(ordered)):
        # cutoff at confs[i] keeps predictions 0..i (and any equal-conf ties)
        j = i
        while j + 1 < len(ordered) and confs[j + 1] == confs[i]:
            j += 1
        p = tp[j] / max(tp[j] + fp[j], 1)
        r = tp[j] / total_gt if total_gt else 0.0
        f1 = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
        key = (f1, confs[i])
        if best is None or key > best[0]:
            best = (key, (float(p), float(r), float(confs[i])))
    return best[1]


def map_range(preds: dict, gts: dict, image_sizes: dict | None = None) -> EvalReport:
    """Full report: AP at 10 IoU thresholds plus the 0.5-threshold PR data."""
    report = EvalReport()
    matches50 = None
    total_gt = 0
    for t in IOU_THRESHOLDS:
        matches, total_gt = match(preds, gts, t, image_sizes=image_sizes)
        ap = average_precision(matches, total_gt)
        tp = sum(1 for _, is_tp in matches if is_tp)
        fp = len(matches) - tp
        report.per_threshold.append(ThresholdEval(
            threshold=t, ap=ap, tp=tp, fp=fp, fn=total_gt - tp))
        if t == 0.5:
            matches50 = matches
    report.map50 = report.per_threshold[0].ap
    report.map5095 = float(np.mean([te.ap for te in report.per_threshold]))
    report.undefined_ap = total_gt == 0 and not matches50

    if matches50:
        ordered = sorted(matches50, key=lambda m: -m[0])
        tp = 0
        for i, (conf, is_tp) in enumerate(ordered, start=1):
            tp += 1 if is_tp else 0
            recall = tp / total_gt if total_gt else 0.0
            report.pr_curve.append((recall, tp / i, conf))
        p, r, c = precision_recall_at_best_f1(matches50, total_gt)
        report.precision_best_f1 = p
        report.recall_best_f1 = r
        report.best_f1_confidence = c
    else:
        report.pr_curve = [(0.0, 1.0, 1.0), (0.0, 0.0, 0.0)]
        report.degenerate_curve = True
    return report


def export_pr_curve(report: EvalReport, csv_path, svg_path=None) -> None:
    """Write the 0.5-threshold PR curve as CSV (confidence,recall,precision)
    in descending confidence, plus an optional SVG polyline rendering."""
    rows = sorted(report.pr_curve, key=lambda p: -p[2])
    with open(csv_path, "w") as fh:
        fh.write("confidence,recall,precision\n")
        for recall, precision, conf in rows:
            fh.write(f"{conf:.6f},{recall:.6f},{precision:.6f}\n")
    if svg_path is None:
        return
    size, margin = 400, 40
    span = size - 2 * margin

    def px(r):
        return margin + r * span

    def py(p):
        return size - margin - p * span

    points = " ".join(f"{px(r):.1f},{py(p):.1f}" for r, p, _ in report.pr_curve)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{margin}" y1="{size - margin}" x2="{size - margin}" '
        f'y2="{size - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{size - margin}" stroke="black"/>',
        f'<text x="{size // 2}" y="{size - 8}" text-anchor="middle" '
        f'font-size="12">recall</text>',
        f'<text x="12" y="{size // 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size // 2})">precision</text>',
        f'<polyline points="{points}" fill="none" stroke="crimson" stroke-width="2"/>',
        "</svg>",
    ]
    Path(svg_path).write_text("\n".join(parts) + "\n")
