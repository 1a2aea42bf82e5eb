"""Command line interface: generate, train, eval, detect, bench, ablate.

Exit codes: 0 on success, 1 on runtime failure, 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ck
from .arch import DetectionModel
from .data import (DatasetManifest, ImageFormatError, SynthSpec,
                   generate_corpus, load_image, load_spec, save_image,
                   save_spec, synth_generate)
from .metrics import export_pr_curve
from .postprocess import (DEFAULT_CONF_THRESH, DEFAULT_IOU_THRESH, decode,
                          detection_record, letterbox, nms, unletterbox,
                          write_detections_jsonl)
from .tensor import Tensor, no_grad
from .train import (TrainConfig, config_for_variant, evaluate_manifest, fit,
                    load_checkpoint, load_train_config, save_train_config,
                    train_config_from_text)

DEFAULT_FRACTIONS = (0.735, 0.11, 0.065, 0.09)
FRAME_EXTENSIONS = (".ppm",)


class UsageError(Exception):
    """Bad arguments or an unusable config file (exit code 2)."""


# -- overlay drawing ----------------------------------------------------------------

# 3x5 pixel glyphs for digits; row-major strings, '#' marks a lit pixel.
_GLYPHS = {
    "0": ("###", "#.#", "#.#", "#.#", "###"),
    "1": (".#.", "##.", ".#.", ".#.", "###"),
    "2": ("###", "..#", "###", "#..", "###"),
    "3": ("###", "..#", "###", "..#", "###"),
    "4": ("#.#", "#.#", "###", "..#", "..#"),
    "5": ("###", "#..", "###", "..#", "###"),
    "6": ("###", "#..", "###", "#.#", "###"),
    "7": ("###", "..#", "..#", "..#", "..#"),
    "8": ("###", "#.#", "###", "#.#", "###"),
    "9": ("###", "#.#", "###", "..#", "###"),
}
BOX_COLOR = (0.1, 0.95, 0.2)
TEXT_COLOR = (0.98, 0.98, 0.1)
BANNER_COLOR = (0.25, 0.35, 0.85)
BANNER_HEIGHT = 6
BANNER_WIDTH = 42


def _paint(image: np.ndarray, mask: np.ndarray, rows, cols, color) -> None:
    _, h, w = image.shape
    rows = np.clip(rows, 0, h - 1)
    cols = np.clip(cols, 0, w - 1)
    for ch in range(3):
        image[ch, rows, cols] = color[ch]
    mask[rows, cols] = True


def draw_rect(image, mask, x1, y1, x2, y2, color, thickness: int = 2) -> None:
    """Paint an axis-aligned rectangle outline in place."""
    _, h, w = image.shape
    x1, x2 = int(round(x1)), int(round(x2))
    y1, y2 = int(round(y1)), int(round(y2))
    xs = np.arange(max(x1, 0), min(x2 + 1, w))
    ys = np.arange(max(y1, 0), min(y2 + 1, h))
    if xs.size == 0 or ys.size == 0:
        return
    for t in range(thickness):
        _paint(image, mask, np.full_like(xs, y1 + t), xs, color)
        _paint(image, mask, np.full_like(xs, y2 - t), xs, color)
        _paint(image, mask, ys, np.full_like(ys, x1 + t), color)
        _paint(image, mask, ys, np.full_like(ys, x2 - t), color)


def draw_digits(image, mask, x, y, text: str, color) -> None:
    """Paint a short digit string with 3x5 glyphs starting at (x, y)."""
    cx = int(round(x))
    cy = int(round(y))
    for chcode in text:
        glyph = _GLYPHS.get(chcode)
        if glyph is None:
            cx += 4
            continue
        for r, rowbits in enumerate(glyph):
            for c, bit in enumerate(rowbits):
                if bit == "#":
                    _paint(image, mask,
                           np.array([cy + r]), np.array([cx + c]), color)
        cx += 4


def annotate_frame(image: np.ndarray, detections) -> tuple:
    """Overlay detection boxes and confidence (percent) on a copy.

    Returns (annotated, mask) where mask flags exactly the painted pixels;
    pixels outside the mask are byte-identical to the input.  An empty
    detection list paints a small status banner instead, so every processed
    frame is visually distinguishable from an untouched file.
    """
    out = image.copy()
    _, h, w = out.shape
    mask = np.zeros((h, w), dtype=bool)
    if not detections:
        strip_h = min(BANNER_HEIGHT, h)
        strip_w = min(BANNER_WIDTH, w)
        rr, cc = np.meshgrid(np.arange(strip_h), np.arange(strip_w),
                             indexing="ij")
        _paint(out, mask, rr.ravel(), cc.ravel(), BANNER_COLOR)
        return out, mask
    for det in detections:
        b = det.bbox
        draw_rect(out, mask, b.x1, b.y1, b.x2, b.y2, BOX_COLOR)
        label = str(int(round(det.confidence * 100)))
        ty = b.y1 - 7 if b.y1 >= 7 else b.y1 + 2
        draw_digits(out, mask, b.x1 + 2, ty, label, TEXT_COLOR)
    return out, mask


# -- shared helpers -----------------------------------------------------------------

def _load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"manifest file not found: {path}")
    try:
        return DatasetManifest.load(path)
    except ValueError as exc:
        raise UsageError(f"bad manifest {path}: {exc}") from exc


def _load_model(checkpoint_path) -> tuple:
    path = Path(checkpoint_path)
    if not path.is_file():
        raise UsageError(f"checkpoint file not found: {path}")
    try:
        model, meta = load_checkpoint(path)
    except (ck.CheckpointError, ValueError) as exc:
        raise UsageError(f"bad checkpoint {path}: {exc}") from exc
    return model, meta


def _model_variant(model: DetectionModel) -> str:
    return "v12" if model.cfg.attention_stages else "v8"


def _checkpoint_size(meta: dict, override) -> int:
    if override is not None:
        return override
    if "train_config" in meta:
        try:
            return train_config_from_text(meta["train_config"]).image_size
        except ValueError:
            pass
    raise UsageError(
        "checkpoint does not record an input size; pass --size explicitly")


def _canvas_for(size: int) -> tuple:
    """Content size plus a stride-aligned canvas (next multiple of 32)."""
    canvas = size if size % 32 == 0 else ((size // 32) + 1) * 32
    return size, canvas


def _list_frames(frames_dir) -> list:
    frames_dir = Path(frames_dir)
    if not frames_dir.is_dir():
        raise UsageError(f"frames directory not found: {frames_dir}")
    files = sorted(p for p in frames_dir.iterdir()
                   if p.suffix.lower() in FRAME_EXTENSIONS)
    if not files:
        raise UsageError(
            f"no {'/'.join(FRAME_EXTENSIONS)} frames in {frames_dir}")
    return files


def _detect_one(model, image, size, canvas, conf, iou):
    boxed, lbmap = letterbox(image, size, canvas=canvas)
    with no_grad():
        raw = model(Tensor(boxed[None]))
    dets = nms(decode(raw, conf), iou)
    return [unletterbox(d, lbmap) for d in dets]


# -- subcommands --------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.spec is not None:
        spec_path = Path(args.spec)
        if not spec_path.is_file():
            raise UsageError(f"spec file not found: {spec_path}")
        try:
            spec = load_spec(spec_path)
        except ValueError as exc:
            raise UsageError(f"bad spec {spec_path}: {exc}") from exc
    else:
        spec = SynthSpec()
    try:
        if args.size is not None:
            spec = replace(spec, size=args.size)
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
        spec.validate()
    except ValueError as exc:
        raise UsageError(f"bad spec: {exc}") from exc
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.splits:
        fractions = tuple(float(f) for f in args.fractions.split(","))
        if len(fractions) != 4 or any(f < 0 for f in fractions) or \
                abs(sum(fractions) - 1.0) > 1e-9:
            raise UsageError(
                f"--fractions needs four non-negative values summing to 1, "
                f"got {args.fractions}")
        try:
            splits = generate_corpus(spec, args.count, fractions, out_dir)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        for name in ("train", "val", "test1", "test2"):
            manifest = splits[name]
            print(f"{name}: {len(manifest.entries)} images -> "
                  f"{out_dir / (name + '.manifest')}")
    else:
        manifest = synth_generate(spec, args.count, out_dir,
                                  domain="synthetic")
        manifest.name = "dataset"
        manifest_path = out_dir / "dataset.manifest"
        manifest.save(manifest_path)
        save_spec(spec, out_dir / "dataset.spec")
        print(f"dataset: {len(manifest.entries)} images -> {manifest_path}")
    return 0


def cmd_train(args) -> int:
    if args.config is not None:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise UsageError(f"config file not found: {cfg_path}")
        try:
            cfg = load_train_config(cfg_path)
        except ValueError as exc:
            raise UsageError(f"bad config {cfg_path}: {exc}") from exc
    else:
        cfg = TrainConfig()
    try:
        cfg = config_for_variant(cfg, args.variant)
        if args.data is not None:
            cfg = replace(cfg, train_manifest=args.data)
        if args.val is not None:
            cfg = replace(cfg, val_manifest=args.val)
        if args.epochs is not None:
            cfg = replace(cfg, epochs=args.epochs)
        if args.batch_size is not None:
            cfg = replace(cfg, batch_size=args.batch_size)
        if args.lr is not None:
            cfg = replace(cfg, lr0=args.lr)
        if args.size is not None:
            cfg = replace(cfg, image_size=args.size)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not cfg.train_manifest:
        raise UsageError("no training manifest; pass --data or set it in the config")
    train_manifest = _load_manifest(cfg.train_manifest)
    val_manifest = (_load_manifest(cfg.val_manifest)
                    if cfg.val_manifest else train_manifest)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = DetectionModel(cfg.model, seed=cfg.seed)
    save_train_config(cfg, out_dir / "train_config.txt")
    result = fit(model, train_manifest, val_manifest, cfg, out_dir,
                 quiet=args.quiet)
    print(f"best epoch {result.best_epoch}  val map50 {result.best_map50:.4f}  "
          f"checkpoint {out_dir / 'checkpoint.lmdt'}")
    return 0


def cmd_eval(args) -> int:
    model, meta = _load_model(args.checkpoint)
    manifest = _load_manifest(args.data)
    size = _checkpoint_size(meta, args.size)
    content, canvas = _canvas_for(size)

    if args.self_oracle:
        from .data import load_annotations
        from .metrics import map_range
        from .postprocess import Detection
        gts = load_annotations(manifest)
        oracle_preds = {
            img: [Detection(bbox=a.bbox, confidence=1.0, class_id=a.class_id)
                  for a in anns]
            for img, anns in gts.items()}
        report = map_range(oracle_preds, gts)
    else:
        report = evaluate_manifest(model, manifest, content,
                                   conf_thresh=args.conf, iou_thresh=args.iou,
                                   canvas=canvas if canvas != content else None)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save_json(out_dir / "report.json")
    export_pr_curve(report, out_dir / "pr_curve.csv", out_dir / "pr_curve.svg")

    dataset = manifest.name or Path(args.data).stem
    header = f"{'Model':<8}{'Dataset':<12}{'Precision':<12}{'mAP@0.5':<10}{'mAP@0.5:0.95':<14}"
    row = (f"{_model_variant(model):<8}{dataset:<12}"
           f"{report.precision_best_f1:<12.4f}{report.map50:<10.4f}"
           f"{report.map5095:<14.4f}")
    print(header)
    print(row)
    print(f"report {out_dir / 'report.json'}")
    return 0


def cmd_detect(args) -> int:
    model, meta = _load_model(args.checkpoint)
    size = _checkpoint_size(meta, args.size)
    content, canvas = _canvas_for(size)
    frames = _list_frames(args.frames)
    out_dir = Path(args.out)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    model.eval()

    records = []
    skipped = []
    n_dets = 0
    for frame_path in frames:
        try:
            image = load_image(frame_path)
        except (ImageFormatError, OSError) as exc:
            skipped.append(frame_path.name)
            print(f"warning: skipping unreadable frame {frame_path.name}: {exc}",
                  file=sys.stderr)
            continue
        dets = _detect_one(model, image, content, canvas, args.conf, args.iou)
        n_dets += len(dets)
        annotated, _ = annotate_frame(image, dets)
        save_image(annotated, out_dir / "frames" / frame_path.name)
        records.extend(detection_record(frame_path.name, d) for d in dets)
    write_detections_jsonl(out_dir / "detections.jsonl", records)
    processed = len(frames) - len(skipped)
    print(f"processed {processed} frames, {n_dets} detections, "
          f"skipped {len(skipped)} -> {out_dir}")
    if processed == 0:
        raise RuntimeError("no frame could be read")
    return 0


def cmd_bench(args) -> int:
    model, meta = _load_model(args.checkpoint)
    size = _checkpoint_size(meta, args.size)
    content, canvas = _canvas_for(size)
    frames = _list_frames(args.frames)
    if args.limit is not None:
        frames = frames[:args.limit]
    model.eval()

    # One untimed warmup so allocation effects stay out of the averages.
    warm = load_image(frames[0])
    _detect_one(model, warm, content, canvas, args.conf, args.iou)

    pre_s = fwd_s = post_s = 0.0
    n = 0
    wall_start = time.perf_counter()
    for frame_path in frames:
        t0 = time.perf_counter()
        image = load_image(frame_path)
        boxed, lbmap = letterbox(image, content, canvas=canvas)
        t1 = time.perf_counter()
        with no_grad():
            raw = model(Tensor(boxed[None]))
        t2 = time.perf_counter()
        dets = nms(decode(raw, args.conf), args.iou)
        dets = [unletterbox(d, lbmap) for d in dets]
        t3 = time.perf_counter()
        pre_s += t1 - t0
        fwd_s += t2 - t1
        post_s += t3 - t2
        n += 1
    wall = time.perf_counter() - wall_start

    stable = n >= 30
    report = {
        "frames": n,
        "input_size": content,
        "canvas_size": canvas,
        "wall_time_s": wall,
        "fps": n / wall,
        "stage_ms": {
            "preprocess": 1000.0 * pre_s / n,
            "forward": 1000.0 * fwd_s / n,
            "postprocess": 1000.0 * post_s / n,
        },
        "stable": stable,
    }
    if not stable:
        print(f"warning: only {n} frames; timing is marked unstable",
              file=sys.stderr)
    text = json.dumps(report, indent=2)
    if args.out is not None:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_ablate(args) -> int:
    model, meta = _load_model(args.checkpoint)
    manifest = _load_manifest(args.data)
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --sizes value: {args.sizes}") from exc
    if not sizes or any(s < 32 for s in sizes):
        raise UsageError(f"--sizes needs values >= 32, got {args.sizes}")
    model.eval()

    timing_frames = manifest.entries[:min(len(manifest.entries), 48)]
    rows = []
    for size in sizes:
        content, canvas = _canvas_for(size)
        report = evaluate_manifest(
            model, manifest, content, conf_thresh=args.conf,
            iou_thresh=args.iou, canvas=canvas if canvas != content else None)
        t0 = time.perf_counter()
        for entry in timing_frames:
            image = load_image(entry.image_path)
            _detect_one(model, image, content, canvas, args.conf, args.iou)
        wall = time.perf_counter() - t0
        fps = len(timing_frames) / wall
        note = (f"content {content} letterboxed into canvas {canvas}"
                if canvas != content else "")
        rows.append((size, report.map50, report.map5095, fps, note))
        print(f"size {size:>4}  map50 {report.map50:.4f}  "
              f"map5095 {report.map5095:.4f}  fps {fps:.2f}"
              + (f"  ({note})" if note else ""))

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        fh.write("size,map50,map5095,fps,note\n")
        for size, m50, m5095, fps, note in rows:
            fh.write(f"{size},{m50:.6f},{m5095:.6f},{fps:.4f},{note}\n")
    print(f"ablation table -> {out_path}")
    return 0


# -- parser -------------------------------------------------------------------------

def _add_threshold_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--conf", type=float, default=DEFAULT_CONF_THRESH,
                   help="confidence threshold (default %(default)s)")
    p.add_argument("--iou", type=float, default=DEFAULT_IOU_THRESH,
                   help="NMS IoU threshold (default %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lumendet",
        description="Desk-scale anchor-free lumen detection pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=100, help="number of images")
    p.add_argument("--spec", default=None, help="generator spec file")
    p.add_argument("--size", type=int, default=None, help="square image size")
    p.add_argument("--seed", type=int, default=None, help="generator seed")
    p.add_argument("--splits", action="store_true",
                   help="produce train/val/test1/test2 manifests; test2 uses "
                        "a photometrically shifted generator")
    p.add_argument("--fractions", default=",".join(str(f) for f in DEFAULT_FRACTIONS),
                   help="split fractions for --splits (default %(default)s)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--data", default=None, help="training manifest")
    p.add_argument("--val", default=None, help="validation manifest")
    p.add_argument("--config", default=None, help="train config file")
    p.add_argument("--variant", choices=("v8", "v12"), default="v8")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--size", type=int, default=None, help="train image size")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="evaluation manifest")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--size", type=int, default=None,
                   help="input size (default: the checkpoint's train size)")
    p.add_argument("--self-oracle", action="store_true",
                   help="score ground truth against itself (pipeline check)")
    _add_threshold_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="run detection over a frame directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True, help="directory of PPM frames")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, default=None)
    _add_threshold_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bench", help="measure per-stage latency and fps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True, help="directory of PPM frames")
    p.add_argument("--out", default=None, help="JSON report path")
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--limit", type=int, default=None,
                   help="benchmark at most this many frames")
    _add_threshold_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="input-size ablation table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="evaluation manifest")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--sizes", default="160,96,64",
                   help="comma separated input sizes (default %(default)s)")
    _add_threshold_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
