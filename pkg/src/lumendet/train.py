"""Target assignment, the combined detection loss, and the seeded training
loop with per-epoch validation mAP and best-checkpoint retention."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import postprocess as pp
from . import tensor as T
from .arch import (DetectionModel, ModelConfig, RawPrediction, STRIDES,
                   config_from_text, config_to_text, v12_config, v8_config)
from .data import DatasetManifest, load_image, parse_label_file
from .metrics import EvalReport, map_range
from .optim import LrSchedule, OptimState, adamw_step, lr_at
from .tensor import Tensor


@dataclass
class TrainConfig:
    """Hyperparameters for one training run plus the data it consumes."""

    epochs: int = 50
    batch_size: int = 16
    image_size: int = 160
    lr0: float = 1e-3
    final_lr_fraction: float = 0.01
    warmup_epochs: float = 3.0
    weight_decay: float = 0.01
    seed: int = 0
    box_weight: float = 7.5
    obj_weight: float = 1.0
    cls_weight: float = 0.5
    hflip_prob: float = 0.5
    train_manifest: str = ""
    val_manifest: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.image_size % 32:
            raise ValueError(f"image_size must be divisible by 32, got {self.image_size}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")

    def schedule(self) -> LrSchedule:
        """Warmup-then-cosine schedule for this run.

        Runs shorter than twice the warmup clamp the warmup to half the run,
        so tiny smoke runs still ramp up and decay.
        """
        warmup = min(self.warmup_epochs, self.epochs / 2.0)
        return LrSchedule(lr0=self.lr0, final_fraction=self.final_lr_fraction,
                          warmup_epochs=warmup,
                          total_epochs=float(self.epochs))


_TRAIN_KEYS = ("epochs", "batch_size", "image_size", "lr0", "final_lr_fraction",
               "warmup_epochs", "weight_decay", "seed", "box_weight",
               "obj_weight", "cls_weight", "hflip_prob",
               "train_manifest", "val_manifest")
_INT_KEYS = {"epochs", "batch_size", "image_size", "seed"}
_STR_KEYS = {"train_manifest", "val_manifest"}


def train_config_to_text(cfg: TrainConfig) -> str:
    """Flat key=value form; model fields ride with a ``model.`` prefix.

    ``attention_stages`` is intentionally not written: the variant flag
    decides it, so one file serves both variants.
    """
    lines = [f"{k}={getattr(cfg, k)}" for k in _TRAIN_KEYS]
    for line in config_to_text(cfg.model).splitlines():
        if not line.startswith("attention_stages="):
            lines.append(f"model.{line}")
    return "\n".join(lines) + "\n"


def train_config_from_text(text: str) -> TrainConfig:
    kwargs = {}
    model_lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("model."):
            model_lines.append(line[len("model."):])
        elif key in _STR_KEYS:
            kwargs[key] = value
        elif key in _TRAIN_KEYS:
            kwargs[key] = int(value) if key in _INT_KEYS else float(value)
        else:
            raise ValueError(f"line {lineno}: unknown train config key '{key}'")
    model = config_from_text("\n".join(model_lines)) if model_lines else ModelConfig()
    return TrainConfig(model=model, **kwargs)


def load_train_config(path) -> TrainConfig:
    return train_config_from_text(Path(path).read_text())


def save_train_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(train_config_to_text(cfg))


def config_for_variant(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Same file, either variant: only attention_stages differs."""
    if variant == "v8":
        model = replace(cfg.model, attention_stages=frozenset())
    elif variant == "v12":
        model = replace(cfg.model, attention_stages=frozenset(
            {cfg.model.num_stages - 1, cfg.model.num_stages}))
    else:
        raise ValueError(f"unknown variant '{variant}', expected v8 or v12")
    return replace(cfg, model=model)


# -- target assignment -----------------------------------------------------------

@dataclass
class ScaleTargets:
    """Dense per-cell targets at one stride."""

    ltrb: np.ndarray   # (4, H, W) distances in stride units (valid where obj=1)
    obj: np.ndarray    # (H, W) 0/1
    cls: np.ndarray    # (num_classes, H, W) one-hot where assigned
    stride: int


@dataclass
class AssignedTargets:
    levels: list
    num_positive: int


def _route_stride(max_side: float, image_size: int) -> int:
    """Stride for a GT by its max side, thresholds scaled from 640-equivalents."""
    t_small = 64.0 * image_size / 640.0
    t_mid = 160.0 * image_size / 640.0
    if max_side < t_small:
        return 8
    if max_side < t_mid:
        return 16
    return 32


def assign_targets(gts: list, image_size: int,
                   num_classes: int = 1) -> AssignedTargets:
    """Route each GT box to one scale and stamp its cells.

    ``gts`` is a list of (x1, y1, x2, y2, class_id) in network-input
    pixels.  Each GT claims the cell containing its center plus the
    4-neighborhood cells whose centers fall inside the box.  Overlap
    conflicts go to the smaller box: GTs are stamped in descending area
    order so later (smaller) boxes overwrite.
    """
    levels = {
        s: ScaleTargets(
            ltrb=np.zeros((4, image_size // s, image_size // s), dtype=np.float32),
            obj=np.zeros((image_size // s, image_size // s), dtype=np.float32),
            cls=np.zeros((num_classes, image_size // s, image_size // s),
                         dtype=np.float32),
            stride=s)
        for s in STRIDES
    }
    clean = []
    for gt in gts:
        x1, y1, x2, y2 = (float(v) for v in gt[:4])
        class_id = int(gt[4]) if len(gt) > 4 else 0
        x1, x2 = max(0.0, x1), min(float(image_size), x2)
        y1, y2 = max(0.0, y1), min(float(image_size), y2)
        if x2 - x1 <= 0 or y2 - y1 <= 0:
            warnings.warn(f"GT box {gt[:4]} outside the image; skipped")
            continue
        if class_id >= num_classes:
            warnings.warn(f"GT class {class_id} >= num_classes {num_classes}; skipped")
            continue
        clean.append((x1, y1, x2, y2, class_id))

    clean.sort(key=lambda g: -((g[2] - g[0]) * (g[3] - g[1])))
    positive = 0
    for x1, y1, x2, y2, class_id in clean:
        max_side = max(x2 - x1, y2 - y1)
        stride = _route_stride(max_side, image_size)
        lv = levels[stride]
        grid = image_size // stride
        cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        cc = min(grid - 1, int(cx / stride))
        cr = min(grid - 1, int(cy / stride))
        cells = [(cr, cc)]
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            r, c = cr + dr, cc + dc
            if not (0 <= r < grid and 0 <= c < grid):
                continue
            ccx, ccy = (c + 0.5) * stride, (r + 0.5) * stride
            if x1 <= ccx <= x2 and y1 <= ccy <= y2:
                cells.append((r, c))
        for r, c in cells:
            ccx, ccy = (c + 0.5) * stride, (r + 0.5) * stride
            lv.ltrb[:, r, c] = ((ccx - x1) / stride, (ccy - y1) / stride,
                                (x2 - ccx) / stride, (y2 - ccy) / stride)
            lv.obj[r, c] = 1.0
            lv.cls[:, r, c] = 0.0
            lv.cls[class_id, r, c] = 1.0
    for lv in levels.values():
        positive += int(lv.obj.sum())
    return AssignedTargets(levels=[levels[s] for s in STRIDES],
                           num_positive=positive)


def stack_targets(per_image: list) -> AssignedTargets:
    """Batch N per-image assignments into (N, ...) arrays per scale."""
    levels = []
    for k in range(len(STRIDES)):
        levels.append(ScaleTargets(
            ltrb=np.stack([t.levels[k].ltrb for t in per_image]),
            obj=np.stack([t.levels[k].obj for t in per_image]),
            cls=np.stack([t.levels[k].cls for t in per_image]),
            stride=STRIDES[k]))
    return AssignedTargets(levels=levels,
                           num_positive=sum(t.num_positive for t in per_image))


# -- loss ------------------------------------------------------------------------

def ciou(pred: Tensor, gt: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Complete IoU between (K, 4) predicted xyxy boxes and constant GTs.

    CIoU = IoU - center_dist^2 / enclosing_diag^2 - alpha * v, with the
    aspect term v weighted by a detached alpha = v / (1 - IoU + v).
    """
    px1, py1 = pred.index_columns(0), pred.index_columns(1)
    px2, py2 = pred.index_columns(2), pred.index_columns(3)
    gx1, gy1, gx2, gy2 = (gt[:, i].astype(np.float32) for i in range(4))

    iw = px2.minimum(gx2) - px1.maximum(gx1)
    ih = py2.minimum(gy2) - py1.maximum(gy1)
    inter = iw.maximum(0.0) * ih.maximum(0.0)
    area_p = (px2 - px1).maximum(eps) * (py2 - py1).maximum(eps)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    iou_t = inter / (union + eps)

    pcx, pcy = (px1 + px2) * 0.5, (py1 + py2) * 0.5
    gcx, gcy = (gx1 + gx2) * 0.5, (gy1 + gy2) * 0.5
    rho2 = (pcx - gcx) ** 2 + (pcy - gcy) ** 2
    ex = px2.maximum(gx2) - px1.minimum(gx1)
    ey = py2.maximum(gy2) - py1.minimum(gy1)
    c2 = ex ** 2 + ey ** 2 + eps

    wp = (px2 - px1).maximum(eps)
    hp = (py2 - py1).maximum(eps)
    ang_g = np.arctan((gx2 - gx1) / np.maximum(gy2 - gy1, eps)).astype(np.float32)
    v = ((ang_g - (wp / hp).atan()) ** 2) * (4.0 / math.pi ** 2)
    alpha = (v / ((1.0 - iou_t) + v + eps)).detach()
    return iou_t - rho2 / c2 - alpha * v


def compute_loss(raw: RawPrediction, targets: AssignedTargets,
                 box_weight: float = 7.5, obj_weight: float = 1.0,
                 cls_weight: float = 0.5) -> tuple:
    """Weighted sum of CIoU box loss (assigned cells), BCE objectness
    (every cell), and BCE classification (assigned cells).

    Returns (total scalar Tensor, {"box","obj","cls"} floats).
    """
    obj_losses = []
    total_cells = 0
    box_terms, cls_terms = [], []
    n_pos = 0
    for lv_raw, lv_t in zip(raw.levels, targets.levels):
        n, _, h, w = lv_raw.obj.shape
        if lv_t.obj.shape != (n, h, w):
            raise T.ShapeError(
                f"targets {lv_t.obj.shape} do not align with raw maps {(n, h, w)}")
        obj_losses.append(T.bce_with_logits(
            lv_raw.obj.reshape(n * h * w), lv_t.obj.reshape(n * h * w)).sum())
        total_cells += n * h * w

        mask = lv_t.obj.reshape(-1) > 0.5
        idx = np.nonzero(mask)[0]
        if idx.size == 0:
            continue
        n_pos += idx.size
        s = float(lv_t.stride)
        # gather assigned cells: (N,4,H,W) -> (N*H*W, 4) rows
        box_rows = lv_raw.box.transpose(0, 2, 3, 1).reshape(n * h * w, 4)
        dists = box_rows.index_rows(idx).softplus() * s
        cells = np.stack(np.unravel_index(idx, (n, h, w)), axis=1)
        ccx = ((cells[:, 2] + 0.5) * s).astype(np.float32)
        ccy = ((cells[:, 1] + 0.5) * s).astype(np.float32)
        l, t = dists.index_columns(0), dists.index_columns(1)
        r, b = dists.index_columns(2), dists.index_columns(3)
        pred_boxes = T.concat([(ccx - l).reshape(-1, 1), (ccy - t).reshape(-1, 1),
                               (ccx + r).reshape(-1, 1), (ccy + b).reshape(-1, 1)],
                              axis=1)
        t_ltrb = lv_t.ltrb.transpose(0, 2, 3, 1).reshape(n * h * w, 4)[idx] * s
        gt_boxes = np.stack([ccx - t_ltrb[:, 0], ccy - t_ltrb[:, 1],
                             ccx + t_ltrb[:, 2], ccy + t_ltrb[:, 3]], axis=1)
        box_terms.append((1.0 - ciou(pred_boxes, gt_boxes)).sum())

        c = lv_raw.cls.shape[1]
        cls_rows = lv_raw.cls.transpose(0, 2, 3, 1).reshape(n * h * w, c)
        cls_t = lv_t.cls.transpose(0, 2, 3, 1).reshape(n * h * w, c)[idx]
        cls_terms.append(T.bce_with_logits(cls_rows.index_rows(idx), cls_t).sum())

    obj_loss = sum(obj_losses[1:], obj_losses[0]) * (1.0 / total_cells)
    if box_terms:
        box_loss = sum(box_terms[1:], box_terms[0]) * (1.0 / n_pos)
        cls_loss = sum(cls_terms[1:], cls_terms[0]) * (1.0 / (n_pos *
                       raw.levels[0].cls.shape[1]))
    else:
        box_loss = Tensor(0.0)
        cls_loss = Tensor(0.0)
    total = box_loss * box_weight + obj_loss * obj_weight + cls_loss * cls_weight
    parts = {"box": float(box_loss.data), "obj": float(obj_loss.data),
             "cls": float(cls_loss.data)}
    return total, parts


# -- inference helpers (shared by fit validation, eval, detect, ablate) ----------

def forward_batch(model: DetectionModel, batch: np.ndarray) -> RawPrediction:
    with T.no_grad():
        return model(Tensor(batch))


def predict_manifest(model: DetectionModel, manifest: DatasetManifest,
                     image_size: int, conf_thresh: float = pp.DEFAULT_CONF_THRESH,
                     iou_thresh: float = pp.DEFAULT_IOU_THRESH,
                     batch_size: int = 16, canvas: int | None = None) -> tuple:
    """Detect over a manifest; returns (preds, gts, image_sizes) keyed by
    image path, with boxes mapped back to original-image pixels."""
    was_training = model.training
    model.eval()
    preds, gts, sizes = {}, {}, {}
    batch_imgs, batch_maps, batch_keys = [], [], []

    def flush():
        if not batch_imgs:
            return
        raw = forward_batch(model, np.stack(batch_imgs))
        for bi, key in enumerate(batch_keys):
            dets = pp.decode(raw, conf_thresh=conf_thresh, image_index=bi)
            dets = pp.nms(dets, iou_thresh=iou_thresh)
            preds[key] = [pp.unletterbox(d, batch_maps[bi]) for d in dets]
        batch_imgs.clear()
        batch_maps.clear()
        batch_keys.clear()

    for entry in manifest.entries:
        img = load_image(entry.image_path)
        _, h, w = img.shape
        sizes[entry.image_path] = (w, h)
        gts[entry.image_path] = parse_label_file(
            Path(entry.label_path).read_text(), w, h, image_id=entry.image_path)
        boxed, m = pp.letterbox(img, image_size, canvas=canvas)
        batch_imgs.append(boxed)
        batch_maps.append(m)
        batch_keys.append(entry.image_path)
        if len(batch_imgs) == batch_size:
            flush()
    flush()
    if was_training:
        model.train()
    return preds, gts, sizes


def evaluate_manifest(model: DetectionModel, manifest: DatasetManifest,
                      image_size: int, conf_thresh: float = pp.DEFAULT_CONF_THRESH,
                      iou_thresh: float = pp.DEFAULT_IOU_THRESH,
                      canvas: int | None = None) -> EvalReport:
    preds, gts, sizes = predict_manifest(model, manifest, image_size,
                                         conf_thresh, iou_thresh, canvas=canvas)
    return map_range(preds, gts, image_sizes=sizes)


# -- the training loop -------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss_box: float
    loss_obj: float
    loss_cls: float
    val_map50: float
    val_map5095: float


@dataclass
class FitResult:
    history: list
    best_epoch: int
    best_map50: float
    checkpoint_path: str
    log_path: str


def _load_split(manifest: DatasetManifest, image_size: int) -> list:
    """Preload (image, boxes) pairs letterboxed to the training size."""
    samples = []
    for entry in manifest.entries:
        img = load_image(entry.image_path)
        _, h, w = img.shape
        anns = parse_label_file(Path(entry.label_path).read_text(), w, h,
                                image_id=entry.image_path)
        boxed, m = pp.letterbox(img, image_size)
        boxes = []
        for ann in anns:
            b = pp.apply_letterbox_box(ann.bbox, m)
            boxes.append((b.x1, b.y1, b.x2, b.y2, ann.class_id))
        samples.append((boxed, boxes))
    return samples


def write_log_csv(path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "loss_box", "loss_obj", "loss_cls",
                         "val_map50", "val_map5095"])
        for row in history:
            writer.writerow([row.epoch, f"{row.lr:.8f}", f"{row.loss_box:.6f}",
                             f"{row.loss_obj:.6f}", f"{row.loss_cls:.6f}",
                             f"{row.val_map50:.6f}", f"{row.val_map5095:.6f}"])


def fit(model: DetectionModel, train_manifest: DatasetManifest,
        val_manifest: DatasetManifest, cfg: TrainConfig, out_dir,
        quiet: bool = False) -> FitResult:
    """Seeded mini-batch training with per-epoch validation mAP.

    Writes ``checkpoint.lmdt`` (best val map50 state, with config text
    embedded) and ``train_log.csv`` under out_dir.
    """
    if not train_manifest.entries:
        raise ValueError("training manifest is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = _load_split(train_manifest, cfg.image_size)
    params = dict(model.named_parameters())
    state = OptimState(lr0=cfg.lr0, weight_decay=cfg.weight_decay)
    schedule = cfg.schedule()
    rng = np.random.default_rng(cfg.seed)
    num_classes = model.cfg.num_classes

    history = []
    best = (-1.0, -1)  # (map50, epoch)
    best_arrays = None
    meta = {"model_config": config_to_text(model.cfg),
            "train_config": train_config_to_text(cfg)}

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        flips = rng.uniform(size=len(samples)) < cfg.hflip_prob
        sums = {"box": 0.0, "obj": 0.0, "cls": 0.0}
        steps = 0
        lr = cfg.lr0
        for start in range(0, len(order), cfg.batch_size):
            picked = order[start:start + cfg.batch_size]
            imgs, per_image = [], []
            for j in picked:
                img, boxes = samples[int(j)]
                if flips[int(j)]:
                    img = img[:, :, ::-1].copy()
                    size = cfg.image_size
                    boxes = [(size - x2, y1, size - x1, y2, cid)
                             for (x1, y1, x2, y2, cid) in boxes]
                imgs.append(img)
                per_image.append(assign_targets(boxes, cfg.image_size, num_classes))
            batch = np.stack(imgs)
            targets = stack_targets(per_image)
            raw = model(Tensor(batch))
            loss, parts = compute_loss(raw, targets, cfg.box_weight,
                                       cfg.obj_weight, cfg.cls_weight)
            if not math.isfinite(float(loss.data)):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch + 1}, step {steps + 1}: {parts}")
            model.zero_grad()
            T.backward(loss, params.values())
            frac = epoch + min(1.0, (start + len(picked)) / len(order))
            lr = lr_at(schedule, min(frac, schedule.total_epochs))
            adamw_step(params, state, lr)
            for k in sums:
                sums[k] += parts[k]
            steps += 1

        report = evaluate_manifest(model, val_manifest, cfg.image_size) \
            if val_manifest.entries else EvalReport()
        row = EpochLog(epoch=epoch + 1, lr=lr,
                       loss_box=sums["box"] / steps, loss_obj=sums["obj"] / steps,
                       loss_cls=sums["cls"] / steps,
                       val_map50=report.map50, val_map5095=report.map5095)
        history.append(row)
        if not quiet:
            print(f"epoch {row.epoch:3d}  lr {row.lr:.6f}  "
                  f"box {row.loss_box:.4f}  obj {row.loss_obj:.4f}  "
                  f"cls {row.loss_cls:.4f}  val map50 {row.val_map50:.4f}")
        if report.map50 > best[0]:
            best = (report.map50, epoch + 1)
            best_arrays = {k: v.copy() for k, v in model.named_state()}

    if best_arrays is None:
        best_arrays = {k: v.copy() for k, v in model.named_state()}
        best = (history[-1].val_map50 if history else 0.0, cfg.epochs)

    ckpt_path = out_dir / "checkpoint.lmdt"
    meta["best_epoch"] = str(best[1])
    arrays = dict(best_arrays)
    for key, text in meta.items():
        arrays[ck.META_PREFIX + key] = ck.encode_text(text)
    ck.save_arrays(ckpt_path, arrays)
    log_path = out_dir / "train_log.csv"
    write_log_csv(log_path, history)
    model.load_state(best_arrays)
    return FitResult(history=history, best_epoch=best[1], best_map50=best[0],
                     checkpoint_path=str(ckpt_path), log_path=str(log_path))


def load_checkpoint(path) -> tuple:
    """Rebuild the model recorded in a checkpoint; returns (model, meta)."""
    arrays = ck.load_arrays(path)
    meta = {}
    state = {}
    for name, arr in arrays.items():
        if name.startswith(ck.META_PREFIX):
            meta[name[len(ck.META_PREFIX):]] = ck.decode_text(arr)
        else:
            state[name] = arr
    if "model_config" not in meta:
        raise ValueError(f"checkpoint '{path}' lacks an embedded model config")
    model = DetectionModel(config_from_text(meta["model_config"]))
    model.load_state(state)
    model.eval()
    return model, meta
