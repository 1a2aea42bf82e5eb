"""Dataset plumbing: label files, PPM image I/O, manifests, splits, and a
deterministic synthetic lumen-scene generator.

Images are channel-major float32 RGB in [0, 1].  Labels are one object
per line, ``class cx cy w h``, normalized to image dimensions.  The
generator draws dark soft-edged ellipses ("orifices") on a low-frequency
pinkish wall texture, optionally nesting a child ellipse inside a parent,
then applies per-image motion blur, contrast compression, and a
vignette/highlight exposure field.  Every byte is a pure function of
(spec, seed, image index).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .metrics import Annotation
from .postprocess import BBox, bilinear_resize


# -- label files ---------------------------------------------------------------

def parse_label_file(text: str, image_w: int, image_h: int,
                     image_id: str = "") -> list:
    """Normalized label lines -> pixel-frame annotations.

    Malformed lines raise with their line number; out-of-range normalized
    values are clamped into [0, 1] with a warning.
    """
    annotations = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(
                f"label line {lineno}: expected 5 fields, got {len(parts)}: {raw!r}")
        try:
            class_id = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError as exc:
            raise ValueError(f"label line {lineno}: non-numeric field: {raw!r}") from exc
        if class_id < 0:
            raise ValueError(f"label line {lineno}: negative class id {class_id}")
        clamped = [min(1.0, max(0.0, v)) for v in (cx, cy, w, h)]
        if clamped != [cx, cy, w, h]:
            warnings.warn(f"label line {lineno}: values clamped into [0, 1]")
            cx, cy, w, h = clamped
        x1 = max(0.0, (cx - w / 2) * image_w)
        y1 = max(0.0, (cy - h / 2) * image_h)
        x2 = min(float(image_w), (cx + w / 2) * image_w)
        y2 = min(float(image_h), (cy + h / 2) * image_h)
        annotations.append(Annotation(image_id=image_id,
                                      bbox=BBox(x1, y1, x2, y2),
                                      class_id=class_id))
    return annotations


def write_label_file(annotations: list, image_w: int, image_h: int) -> str:
    lines = []
    for ann in annotations:
        b = ann.bbox
        cx = (b.x1 + b.x2) / 2 / image_w
        cy = (b.y1 + b.y2) / 2 / image_h
        w = (b.x2 - b.x1) / image_w
        h = (b.y2 - b.y1) / image_h
        lines.append(f"{ann.class_id} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}")
    return "\n".join(lines) + ("\n" if lines else "")


# -- PPM (P6) images -----------------------------------------------------------

class ImageFormatError(ValueError):
    """Malformed image file; the message carries the byte offset."""


def _ppm_tokens(blob: bytes, count: int):
    """Yield `count` whitespace/comment-delimited header tokens with offsets."""
    pos = 0
    for _ in range(count):
        while pos < len(blob):
            ch = blob[pos:pos + 1]
            if ch == b"#":
                while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"byte offset {start}: truncated PPM header")
        yield blob[start:pos], start
    yield None, pos


def load_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens = _ppm_tokens(blob, 4)
    magic, off = next(tokens)
    if magic != b"P6":
        raise ImageFormatError(f"byte offset {off}: bad magic {magic!r}, expected b'P6'")
    fields = []
    for name in ("width", "height", "maxval"):
        token, off = next(tokens)
        try:
            fields.append(int(token))
        except ValueError:
            raise ImageFormatError(
                f"byte offset {off}: non-numeric {name} {token!r}") from None
    w, h, maxval = fields
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"byte offset {off}: non-positive dimensions {w}x{h}")
    if maxval != 255:
        raise ImageFormatError(f"byte offset {off}: unsupported maxval {maxval}")
    _, pos = next(tokens)
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    data = blob[pos:pos + need]
    if len(data) != need:
        raise ImageFormatError(
            f"byte offset {pos + len(data)}: pixel data truncated "
            f"({len(data)} of {need} bytes)")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def save_ppm(image: np.ndarray, path) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {image.shape}")
    c, h, w = image.shape
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())


_EXTRA_CODECS: dict = {}


def register_codec(suffix: str, loader, saver) -> None:
    """Plug in another image format (e.g. PNG) by file suffix."""
    _EXTRA_CODECS[suffix.lower()] = (loader, saver)


def _pillow_codec():
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageFormatError(
            "PNG support needs Pillow (or register_codec); PPM works without it"
        ) from exc

    def loader(path):
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
        return arr.transpose(2, 0, 1) / 255.0

    def saver(image, path):
        pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels.transpose(1, 2, 0)).save(path)

    return loader, saver


def load_image(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        return load_ppm(path)
    codec = _EXTRA_CODECS.get(suffix)
    if codec is None and suffix == ".png":
        codec = _pillow_codec()
    if codec is None:
        raise ImageFormatError(f"no codec for '{suffix}' files")
    return codec[0](path)


def save_image(image: np.ndarray, path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        save_ppm(image, path)
        return
    codec = _EXTRA_CODECS.get(suffix)
    if codec is None and suffix == ".png":
        codec = _pillow_codec()
    if codec is None:
        raise ImageFormatError(f"no codec for '{suffix}' files")
    codec[1](image, path)


# -- manifests -----------------------------------------------------------------

@dataclass
class ManifestEntry:
    image_path: str
    label_path: str
    domain: str = "synthetic"


@dataclass
class DatasetManifest:
    name: str = "dataset"
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def save(self, path) -> None:
        lines = [f"{e.image_path}\t{e.label_path}\t{e.domain}" for e in self.entries]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        entries = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(
                    f"{path} line {lineno}: expected 3 tab-separated fields")
            entries.append(ManifestEntry(*parts))
        return cls(name=path.stem, entries=entries)


# -- synthetic scene generator ---------------------------------------------------

@dataclass
class SynthSpec:
    """Knobs for the synthetic lumen-scene generator."""

    size: int = 160
    min_count: int = 1
    max_count: int = 3
    nesting_prob: float = 0.35
    darkness_min: float = 0.45
    darkness_max: float = 0.8
    texture_amplitude: float = 0.06
    radius_frac_min: float = 0.10
    radius_frac_max: float = 0.26
    blur_min: int = 1
    blur_max: int = 4
    contrast_min: float = 0.65
    contrast_max: float = 1.0
    exposure_min: float = 0.9
    exposure_max: float = 1.1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.size % 32:
            raise ValueError(f"size must be divisible by 32, got {self.size}")
        if not 1 <= self.min_count <= self.max_count:
            raise ValueError("need 1 <= min_count <= max_count")
        if not 0.0 <= self.nesting_prob <= 1.0:
            raise ValueError("nesting_prob must be in [0, 1]")
        for lo, hi, nm in ((self.darkness_min, self.darkness_max, "darkness"),
                           (self.radius_frac_min, self.radius_frac_max, "radius_frac"),
                           (self.blur_min, self.blur_max, "blur"),
                           (self.contrast_min, self.contrast_max, "contrast"),
                           (self.exposure_min, self.exposure_max, "exposure")):
            if lo > hi:
                raise ValueError(f"empty {nm} range [{lo}, {hi}]")
        if not 0.0 < self.darkness_max <= 1.0 or self.darkness_min < 0:
            raise ValueError("darkness range must sit inside (0, 1]")
        if self.texture_amplitude < 0:
            raise ValueError("texture_amplitude must be >= 0")
        if self.radius_frac_min * self.size < 2.0:
            raise ValueError(
                f"radius_frac_min {self.radius_frac_min} allows ellipses under "
                f"2 px at size {self.size}; spec rejected as degenerate")
        if self.radius_frac_max > 0.5:
            raise ValueError("radius_frac_max above 0.5 overflows the image")
        if self.blur_min < 1:
            raise ValueError("blur_min must be >= 1")
        if self.contrast_min <= 0 or self.exposure_min <= 0:
            raise ValueError("contrast and exposure must stay positive")


_SPEC_FIELDS = tuple(SynthSpec.__dataclass_fields__)


def spec_to_text(spec: SynthSpec) -> str:
    return "\n".join(f"{name}={getattr(spec, name)}" for name in _SPEC_FIELDS) + "\n"


def spec_from_text(text: str) -> SynthSpec:
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _SPEC_FIELDS:
            raise ValueError(f"line {lineno}: unknown spec key '{key}'")
        target = SynthSpec.__dataclass_fields__[key].type
        kwargs[key] = int(value) if target == "int" else float(value)
    return SynthSpec(**kwargs)


def load_spec(path) -> SynthSpec:
    return spec_from_text(Path(path).read_text())


def save_spec(spec: SynthSpec, path) -> None:
    Path(path).write_text(spec_to_text(spec))


def _line_kernel(length: int, angle: float) -> np.ndarray:
    """Normalized motion-blur kernel: a bilinearly splatted line segment."""
    if length <= 1:
        return np.ones((1, 1), dtype=np.float32)
    k = np.zeros((length, length), dtype=np.float64)
    c = (length - 1) / 2.0
    for t in np.linspace(-c, c, 2 * length + 1):
        y = c + t * math.sin(angle)
        x = c + t * math.cos(angle)
        y0, x0 = int(math.floor(y)), int(math.floor(x))
        for dy in (0, 1):
            for dx in (0, 1):
                yy, xx = y0 + dy, x0 + dx
                if 0 <= yy < length and 0 <= xx < length:
                    wgt = (1 - abs(y - yy)) * (1 - abs(x - xx))
                    k[yy, xx] += wgt
    k /= k.sum()
    return k.astype(np.float32)


def _convolve2d_nearest(channel: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    py, px = kh // 2, kw // 2
    padded = np.pad(channel, ((py, kh - 1 - py), (px, kw - 1 - px)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw))
    return np.einsum("ijkl,kl->ij", windows, kernel).astype(np.float32)


@dataclass
class _Ellipse:
    cx: float
    cy: float
    rx: float
    ry: float
    darkness: float


def _ellipse_aabb(e: _Ellipse, size: int) -> BBox | None:
    """Clamped bounding box, or None when under 30% of the area is visible."""
    x1, y1 = e.cx - e.rx, e.cy - e.ry
    x2, y2 = e.cx + e.rx, e.cy + e.ry
    full = (x2 - x1) * (y2 - y1)
    cx1, cy1 = max(0.0, x1), max(0.0, y1)
    cx2, cy2 = min(float(size), x2), min(float(size), y2)
    visible = max(0.0, cx2 - cx1) * max(0.0, cy2 - cy1)
    if full <= 0 or visible / full < 0.30:
        return None
    return BBox(cx1, cy1, cx2, cy2)


def _render_scene(spec: SynthSpec, rng: np.random.Generator):
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5

    # pinkish airway wall: jittered base color + low-frequency luminance noise
    base = np.array([rng.uniform(0.70, 0.82),
                     rng.uniform(0.46, 0.58),
                     rng.uniform(0.44, 0.56)], dtype=np.float32)
    grid = max(4, size // 20)
    noise = rng.uniform(-1.0, 1.0, (1, grid, grid)).astype(np.float32)
    texture = bilinear_resize(noise, size, size)[0] * spec.texture_amplitude
    img = base[:, None, None] * (1.0 + texture)[None, :, :]

    # place parents with limited mutual overlap, then optional nested children
    ellipses: list[_Ellipse] = []
    parents: list[_Ellipse] = []
    count = int(rng.integers(spec.min_count, spec.max_count + 1))
    for _ in range(count):
        placed = None
        for _attempt in range(40):
            rx = rng.uniform(spec.radius_frac_min, spec.radius_frac_max) * size
            ry = rx * rng.uniform(0.7, 1.3)
            ry = min(ry, spec.radius_frac_max * size)
            cand = _Ellipse(cx=rng.uniform(0.08, 0.92) * size,
                            cy=rng.uniform(0.08, 0.92) * size,
                            rx=rx, ry=ry,
                            darkness=rng.uniform(spec.darkness_min, spec.darkness_max))
            box = BBox(cand.cx - cand.rx, cand.cy - cand.ry,
                       cand.cx + cand.rx, cand.cy + cand.ry)
            clash = False
            for other in parents:
                ob = BBox(other.cx - other.rx, other.cy - other.ry,
                          other.cx + other.rx, other.cy + other.ry)
                ix = max(0.0, min(box.x2, ob.x2) - max(box.x1, ob.x1))
                iy = max(0.0, min(box.y2, ob.y2) - max(box.y1, ob.y1))
                inter = ix * iy
                if inter > 0.2 * min(box.area, ob.area):
                    clash = True
                    break
            if not clash:
                placed = cand
                break
        if placed is None:
            continue
        parents.append(placed)
        ellipses.append(placed)
        if rng.uniform() < spec.nesting_prob:
            frac = rng.uniform(0.30, 0.45)
            crx, cry = placed.rx * frac, placed.ry * frac
            max_dx = placed.rx - crx
            max_dy = placed.ry - cry
            child = _Ellipse(
                cx=placed.cx + rng.uniform(-0.5, 0.5) * max_dx,
                cy=placed.cy + rng.uniform(-0.5, 0.5) * max_dy,
                rx=crx, ry=cry,
                darkness=min(0.95, placed.darkness + rng.uniform(0.1, 0.2)))
            ellipses.append(child)

    for e in ellipses:
        m = ((xx - e.cx) / e.rx) ** 2 + ((yy - e.cy) / e.ry) ** 2
        inside = np.clip(1.0 - m, 0.0, 1.0) ** 0.45  # plateau with a soft rim
        img *= (1.0 - e.darkness * inside)[None, :, :]

    labels = []
    for e in ellipses:
        box = _ellipse_aabb(e, size)
        if box is not None:
            labels.append(Annotation(image_id="", bbox=box, class_id=0))

    # photometric augmentations: directional blur, contrast, exposure field
    blur_len = int(rng.integers(spec.blur_min, spec.blur_max + 1))
    angle = float(rng.uniform(0.0, math.pi))
    if blur_len > 1:
        kernel = _line_kernel(blur_len, angle)
        img = np.stack([_convolve2d_nearest(ch, kernel) for ch in img])
    contrast = float(rng.uniform(spec.contrast_min, spec.contrast_max))
    img = (img - 0.5) * contrast + 0.5
    exposure = float(rng.uniform(spec.exposure_min, spec.exposure_max))
    rnorm = (((xx / size) - 0.5) ** 2 + ((yy / size) - 0.5) ** 2) * 2.0
    img *= (exposure * (1.0 - 0.30 * rnorm))[None, :, :]
    return np.clip(img, 0.0, 1.0).astype(np.float32), labels


def image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def synth_generate(spec: SynthSpec, n_images: int, out_dir,
                   domain: str = "synthetic", start_index: int = 0,
                   prefix: str = "img") -> DatasetManifest:
    """Write n_images scenes + labels under out_dir; returns the manifest."""
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(start_index, start_index + n_images):
        rng = image_rng(spec.seed, i)
        img, labels = _render_scene(spec, rng)
        stem = f"{prefix}{i:05d}"
        image_path = out_dir / "images" / f"{stem}.ppm"
        label_path = out_dir / "labels" / f"{stem}.txt"
        save_ppm(img, image_path)
        label_path.write_text(write_label_file(labels, spec.size, spec.size))
        entries.append(ManifestEntry(str(image_path), str(label_path), domain))
    return DatasetManifest(name=out_dir.name, entries=entries)


def _apportion(n: int, fractions) -> list:
    """Largest-remainder split of n items into len(fractions) buckets."""
    exact = [n * f for f in fractions]
    counts = [int(math.floor(e)) for e in exact]
    rema = sorted(range(len(exact)), key=lambda i: exact[i] - counts[i],
                  reverse=True)
    short = int(round(sum(exact))) - sum(counts)
    for i in rema[:short]:
        counts[i] += 1
    return counts


def make_splits(manifest: DatasetManifest, fractions, seed: int) -> tuple:
    """Deterministic shuffled partition into train/val/test1/test2 manifests.

    `fractions` is a 4-tuple summing to at most 1 (leftover items are
    dropped).  A positive fraction that would round to zero images raises.
    """
    if len(fractions) != 4:
        raise ValueError("fractions must have 4 entries (train, val, test1, test2)")
    if any(f < 0 for f in fractions) or sum(fractions) > 1.0 + 1e-9:
        raise ValueError(f"fractions must be >= 0 and sum <= 1, got {fractions}")
    n = len(manifest.entries)
    counts = _apportion(n, fractions)
    for f, cnt in zip(fractions, counts):
        if f > 0 and cnt == 0:
            raise ValueError(
                f"too few images ({n}) to honor split fractions {fractions}")
    order = np.random.default_rng(seed).permutation(n)
    names = ("train", "val", "test1", "test2")
    out, pos = [], 0
    for name, cnt in zip(names, counts):
        picked = [manifest.entries[int(i)] for i in order[pos:pos + cnt]]
        out.append(DatasetManifest(name=name, entries=picked))
        pos += cnt
    return tuple(out)


def shifted_spec(spec: SynthSpec) -> SynthSpec:
    """Harder photometric domain for the cross-domain test split:
    longer blur, stronger contrast compression, wilder exposure."""
    return replace(
        spec,
        blur_min=spec.blur_max + 2,
        blur_max=spec.blur_max + 5,
        contrast_min=max(0.2, spec.contrast_min * 0.55),
        contrast_max=max(0.25, spec.contrast_min * 0.75),
        exposure_min=spec.exposure_min * 0.82,
        exposure_max=spec.exposure_max * 1.12,
        texture_amplitude=spec.texture_amplitude * 1.5,
    )


def generate_corpus(spec: SynthSpec, total: int, fractions, out_dir,
                    seed: int | None = None) -> dict:
    """Generate a full split corpus: train/val/test1 from `spec`, test2 from
    the shifted spec.  Returns {split name: manifest}; also writes
    <split>.manifest files under out_dir."""
    if seed is not None:
        spec = replace(spec, seed=seed)
    counts = _apportion(total, fractions)
    for f, cnt in zip(fractions, counts):
        if f > 0 and cnt == 0:
            raise ValueError(f"too few images ({total}) for fractions {fractions}")
    n_base = sum(counts[:3])
    out_dir = Path(out_dir)
    base = synth_generate(spec, n_base, out_dir / "base", domain="synthetic")
    train, val, test1, _ = make_splits(
        base, (counts[0] / n_base, counts[1] / n_base, counts[2] / n_base, 0.0),
        seed=spec.seed)
    hard = shifted_spec(spec)
    test2 = synth_generate(hard, counts[3], out_dir / "shifted",
                           domain="synthetic-shifted", start_index=n_base)
    test2.name = "test2"
    splits = {"train": train, "val": val, "test1": test1, "test2": test2}
    for name, manifest in splits.items():
        manifest.name = name
        manifest.save(out_dir / f"{name}.manifest")
    save_spec(spec, out_dir / "base.spec")
    save_spec(hard, out_dir / "shifted.spec")
    return splits


def load_annotations(manifest: DatasetManifest) -> dict:
    """Ground truth per image id (the image path) in original pixels."""
    gts = {}
    for entry in manifest.entries:
        img = load_image(entry.image_path)
        _, h, w = img.shape
        text = Path(entry.label_path).read_text()
        anns = parse_label_file(text, w, h, image_id=entry.image_path)
        gts[entry.image_path] = anns
    return gts
