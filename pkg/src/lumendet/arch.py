"""Detector architectures: Focus stem, C2f backbone, optional area attention,
PANet-style neck, and an anchor-free decoupled head.

Two variants are exposed: ``v8`` (pure C2f) and ``v12`` (C2f plus area
attention in the deepest stages).  They share every other component, so a
v12 config with no attention stages computes exactly the same function as
the v8 config under the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor

STRIDES = (8, 16, 32)


@dataclass
class ModelConfig:
    """Width/depth/attention layout for one backbone-neck-head instance."""

    base_channels: int = 8
    depth_per_stage: list = field(default_factory=lambda: [1, 1, 1, 1])
    num_stages: int = 4
    attention_stages: frozenset = frozenset()
    attention_areas: int = 4
    heads: int = 2
    num_classes: int = 1
    reg_branch_channels: int = 16
    cls_branch_channels: int = 16
    neck_depth: int = 1

    def __post_init__(self):
        self.attention_stages = frozenset(int(s) for s in self.attention_stages)
        self.depth_per_stage = [int(d) for d in self.depth_per_stage]
        self.validate()

    def validate(self):
        if self.num_stages != 4:
            raise ValueError("num_stages must be 4 (strides 4..32 with taps 8/16/32)")
        if len(self.depth_per_stage) != self.num_stages:
            raise ValueError(
                f"depth_per_stage needs {self.num_stages} entries, "
                f"got {len(self.depth_per_stage)}")
        if any(d < 0 for d in self.depth_per_stage):
            raise ValueError("stage depths must be >= 0")
        valid = set(range(1, self.num_stages + 1))
        if not self.attention_stages <= valid:
            raise ValueError(
                f"attention_stages {sorted(self.attention_stages)} not within {sorted(valid)}")
        if self.base_channels < self.heads:
            raise ValueError(
                f"base_channels ({self.base_channels}) must be >= heads ({self.heads})")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ValueError("base_channels must be even and >= 2")
        if self.attention_areas < 1:
            raise ValueError("attention_areas must be >= 1")
        if min(self.reg_branch_channels, self.cls_branch_channels, self.neck_depth) < 1:
            raise ValueError("branch channels and neck_depth must be >= 1")

    def stage_channels(self) -> list:
        """Per-stage widths: base * 2^i, capped at 8 * base."""
        return [min(self.base_channels * 2 ** i, 8 * self.base_channels)
                for i in range(1, self.num_stages + 1)]


def v8_config(**overrides) -> ModelConfig:
    """Pure C2f variant."""
    return ModelConfig(**overrides)


def v12_config(**overrides) -> ModelConfig:
    """C2f variant with area attention in the two deepest stages."""
    cfg = ModelConfig(**overrides)
    return replace(cfg, attention_stages=frozenset({cfg.num_stages - 1, cfg.num_stages}))


_CONFIG_FIELDS = ("base_channels", "depth_per_stage", "num_stages",
                  "attention_stages", "attention_areas", "heads", "num_classes",
                  "reg_branch_channels", "cls_branch_channels", "neck_depth")


def config_to_text(cfg: ModelConfig) -> str:
    lines = []
    for name in _CONFIG_FIELDS:
        value = getattr(cfg, name)
        if isinstance(value, (frozenset, set)):
            value = ",".join(str(v) for v in sorted(value))
        elif isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{name}={value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    """Parse flat key=value lines; '#' starts a comment; unknown keys rejected."""
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_FIELDS:
            raise ValueError(f"line {lineno}: unknown model config key '{key}'")
        if key == "depth_per_stage":
            kwargs[key] = [int(v) for v in value.split(",") if v.strip()]
        elif key == "attention_stages":
            kwargs[key] = frozenset(int(v) for v in value.split(",") if v.strip())
        else:
            kwargs[key] = int(value)
    return ModelConfig(**kwargs)


def load_config(path) -> ModelConfig:
    return config_from_text(Path(path).read_text())


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(config_to_text(cfg))


@dataclass
class FeaturePyramid:
    """Taps at strides 8, 16, 32 relative to the network input."""

    p3: Tensor
    p4: Tensor
    p5: Tensor

    def as_list(self):
        return [self.p3, self.p4, self.p5]


@dataclass
class ScalePrediction:
    """Raw head maps at one stride: ltrb distances, objectness, class logits."""

    box: Tensor   # (N, 4, H, W) pre-activation distances in stride units
    obj: Tensor   # (N, 1, H, W) logit
    cls: Tensor   # (N, num_classes, H, W) logits
    stride: int


@dataclass
class RawPrediction:
    levels: list  # three ScalePrediction entries at strides 8/16/32


class Focus(nn.Module):
    """Space-to-depth stem: 2x2 rearrangement then Conv-BN-SiLU."""

    def __init__(self, in_ch: int, out_ch: int, rng):
        super().__init__()
        self.conv = nn.ConvBnSilu(in_ch * 4, out_ch, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(T.space_to_depth2x(x))


class Bottleneck(nn.Module):
    """Two 3x3 Conv-BN-SiLU with a residual add when channels match."""

    def __init__(self, in_ch: int, out_ch: int, rng):
        super().__init__()
        self.cv1 = nn.ConvBnSilu(in_ch, out_ch, 3, rng)
        self.cv2 = nn.ConvBnSilu(out_ch, out_ch, 3, rng)
        self.residual = in_ch == out_ch

    def forward(self, x: Tensor) -> Tensor:
        out = self.cv2(self.cv1(x))
        return x + out if self.residual else out


class C2f(nn.Module):
    """Split-transform-fuse block that retains every intermediate map."""

    def __init__(self, in_ch: int, out_ch: int, n: int, rng):
        super().__init__()
        if out_ch % 2:
            raise ShapeError(f"C2f needs even output channels, got {out_ch}")
        self.h = out_ch // 2
        self.entry = nn.ConvBnSilu(in_ch, out_ch, 1, rng)
        self.blocks = nn.ModuleList(
            Bottleneck(self.h, self.h, rng) for _ in range(n))
        self.fuse = nn.ConvBnSilu((2 + n) * self.h, out_ch, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.entry(x)
        n, c, hh, ww = y.shape
        parts = [y.index_channels(0, self.h), y.index_channels(self.h, 2 * self.h)]
        for blk in self.blocks:
            parts.append(blk(parts[-1]))
        return self.fuse(T.concat(parts, axis=1))


class A2Attention(nn.Module):
    """Area attention: per-band multi-head self-attention with a residual add.

    The map is cut into equal horizontal bands and every pixel in a band is
    a token.  When the requested band count does not divide the height the
    block falls back to the largest divisor that does, down to global
    attention at height 1.
    """

    def __init__(self, ch: int, areas: int, heads: int, rng):
        super().__init__()
        if ch % heads:
            raise ShapeError(f"channels ({ch}) not divisible by heads ({heads})")
        self.requested_areas = areas
        self.heads = heads
        self.q = nn.Conv2d(ch, ch, 1, rng)
        self.k = nn.Conv2d(ch, ch, 1, rng)
        self.v = nn.Conv2d(ch, ch, 1, rng)

    def effective_areas(self, height: int) -> int:
        areas = min(self.requested_areas, height)
        while height % areas:
            areas -= 1
        return areas

    def forward(self, x: Tensor) -> Tensor:
        areas = self.effective_areas(x.shape[2])
        return self.attend(x, areas)

    def attend(self, x: Tensor, areas: int) -> Tensor:
        n, c, h, w = x.shape
        if h % areas:
            raise ShapeError(f"height {h} not divisible by areas {areas}")
        hb = h // areas

        def to_tokens(t: Tensor) -> Tensor:
            return (t.reshape(n, c, areas, hb * w)
                    .transpose(0, 2, 3, 1)
                    .reshape(n * areas, hb * w, c))

        att = T.attention(to_tokens(self.q(x)), to_tokens(self.k(x)),
                          to_tokens(self.v(x)), heads=self.heads)
        att = (att.reshape(n, areas, hb * w, c)
               .transpose(0, 3, 1, 2)
               .reshape(n, c, h, w))
        return x + att


class Backbone(nn.Module):
    """Focus stem then four stride-2 stages; taps the last three stages."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        chans = cfg.stage_channels()
        self.stem = Focus(3, cfg.base_channels, rng)
        downs, blocks, atts = [], [], []
        prev = cfg.base_channels
        for i, ch in enumerate(chans, start=1):
            downs.append(nn.ConvBnSilu(prev, ch, 3, rng, stride=2))
            blocks.append(C2f(ch, ch, cfg.depth_per_stage[i - 1], rng))
            if i in cfg.attention_stages:
                atts.append(A2Attention(ch, cfg.attention_areas, cfg.heads, rng))
            else:
                atts.append(nn.Module())  # placeholder, no parameters
            prev = ch
        self.downs = nn.ModuleList(downs)
        self.blocks = nn.ModuleList(blocks)
        self.atts = nn.ModuleList(atts)

    def forward(self, x: Tensor) -> FeaturePyramid:
        n, c, h, w = x.shape
        if h != w:
            raise ShapeError(f"input must be square, got {h}x{w}")
        if h % 32:
            raise ShapeError(f"input size {h} not divisible by 32")
        y = self.stem(x)
        taps = []
        for i in range(self.cfg.num_stages):
            y = self.blocks[i](self.downs[i](y))
            if (i + 1) in self.cfg.attention_stages:
                y = self.atts[i](y)
            taps.append(y)
        return FeaturePyramid(p3=taps[-3], p4=taps[-2], p5=taps[-1])


class Neck(nn.Module):
    """PANet-style fusion: top-down then bottom-up, C2f at every merge."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        c3, c4, c5 = cfg.stage_channels()[-3:]
        n = cfg.neck_depth
        self.td4 = C2f(c5 + c4, c4, n, rng)
        self.td3 = C2f(c4 + c3, c3, n, rng)
        self.down3 = nn.ConvBnSilu(c3, c3, 3, rng, stride=2)
        self.bu4 = C2f(c3 + c4, c4, n, rng)
        self.down4 = nn.ConvBnSilu(c4, c4, 3, rng, stride=2)
        self.bu5 = C2f(c4 + c5, c5, n, rng)

    def forward(self, pyr: FeaturePyramid) -> FeaturePyramid:
        t4 = self.td4(T.concat_channels(T.nearest_upsample2x(pyr.p5), pyr.p4))
        t3 = self.td3(T.concat_channels(T.nearest_upsample2x(t4), pyr.p3))
        d4 = self.bu4(T.concat_channels(self.down3(t3), t4))
        d5 = self.bu5(T.concat_channels(self.down4(d4), pyr.p5))
        return FeaturePyramid(p3=t3, p4=d4, p5=d5)


class HeadLevel(nn.Module):
    """Decoupled per-scale head: independent regression and class stacks."""

    def __init__(self, in_ch: int, cfg: ModelConfig, rng):
        super().__init__()
        self.reg_stem = nn.ConvBnSilu(in_ch, cfg.reg_branch_channels, 3, rng)
        self.reg_out = nn.Conv2d(cfg.reg_branch_channels, 4, 1, rng)
        self.cls_stem = nn.ConvBnSilu(in_ch, cfg.cls_branch_channels, 3, rng)
        # objectness starts strongly negative: most cells are background
        self.obj_out = nn.Conv2d(cfg.cls_branch_channels, 1, 1, rng, bias_init=-4.0)
        self.cls_out = nn.Conv2d(cfg.cls_branch_channels, cfg.num_classes, 1, rng)

    def forward(self, x: Tensor, stride: int) -> ScalePrediction:
        r = self.reg_stem(x)
        c = self.cls_stem(x)
        return ScalePrediction(box=self.reg_out(r), obj=self.obj_out(c),
                               cls=self.cls_out(c), stride=stride)


class Head(nn.Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        chans = cfg.stage_channels()[-3:]
        self.levels = nn.ModuleList(
            HeadLevel(ch, cfg, rng) for ch in chans)

    def forward(self, pyr: FeaturePyramid) -> RawPrediction:
        maps = pyr.as_list()
        return RawPrediction(levels=[
            self.levels[i](maps[i], STRIDES[i]) for i in range(3)])


class DetectionModel(nn.Module):
    """Backbone + neck + head; forward maps an image batch to raw predictions."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng)
        self.neck = Neck(cfg, rng)
        self.head = Head(cfg, rng)

    def forward(self, x: Tensor) -> RawPrediction:
        return self.head(self.neck(self.backbone(x)))


def build_model(variant: str, seed: int = 0, **overrides) -> DetectionModel:
    if variant == "v8":
        cfg = v8_config(**overrides)
    elif variant == "v12":
        cfg = v12_config(**overrides)
    else:
        raise ValueError(f"unknown variant '{variant}', expected v8 or v12")
    return DetectionModel(cfg, seed=seed)
