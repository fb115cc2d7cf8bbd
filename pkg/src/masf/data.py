"""Synthetic small-object scenes, annotation parsing and letterbox preprocessing.

Randomness comes from SplitMix64. Output ``i`` (0-based) of a stream with
state ``s`` is ``mix(s + (i + 1) * 0x9E3779B97F4A7C15 mod 2**64)`` where::

    mix(z): z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
            z = (z ^ (z >> 27)) * 0x94D049BB133111EB
            return z ^ (z >> 31)

all in wrapping 64-bit arithmetic. A scene with seed ``k`` uses the stream
whose state is ``mix(k + 0x9E3779B97F4A7C15)``. Uniform reals take the top 53
bits: ``(z >> 11) * 2**-53``.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from masf.errors import AnnotationFormatError, AnnotationNotFoundError, ConfigError, DataError
from masf.postproc import GroundTruth
from masf.tensor import Tensor

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
PAD_VALUE = 114.0 / 255.0
SHAPES = ("square", "circle", "triangle")
SUPERSAMPLE = 4


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based SplitMix64; ``next_u64(n)`` returns the next ``n`` outputs at once."""

    def __init__(self, state: int):
        self.state = np.uint64(state % 2**64)
        self.counter = 0

    @classmethod
    def for_seed(cls, seed: int) -> "SplitMix64":
        with np.errstate(over="ignore"):
            return cls(int(_mix(np.uint64(seed % 2**64) + GOLDEN)))

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(self.state + idx * GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 128
    num_classes: int = 3
    class_probs: tuple | None = None
    objects: tuple = (5, 25)
    size_range: tuple = (0.02, 0.08)  # side, as a fraction of the image side
    noise: float = 0.08
    occlusion: float = 0.2

    def __post_init__(self):
        lo, hi = self.size_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"size_range {self.size_range} must satisfy 0 < lo <= hi <= 1")
        if self.image_size < 8:
            raise ConfigError(f"image_size {self.image_size} too small")
        if not 1 <= self.objects[0] <= self.objects[1]:
            raise ConfigError(f"objects range {self.objects} invalid")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.class_probs is not None:
            p = np.asarray(self.class_probs, dtype=np.float64)
            if p.shape != (self.num_classes,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
                raise ConfigError("class_probs must be a distribution over num_classes")

    @property
    def probs(self) -> np.ndarray:
        if self.class_probs is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        return np.asarray(self.class_probs, dtype=np.float64)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        for k in ("objects", "size_range", "class_probs"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Scene:
    image: Tensor  # (1, 3, H, W) in [0, 1]
    gts: list
    seed: int


def class_color(cls: int, num_classes: int, jitter: float, value: float) -> np.ndarray:
    hue = (cls / num_classes + 0.04 * (jitter - 0.5)) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, value))


def _background(rng: SplitMix64, size: int, noise: float) -> np.ndarray:
    g = 6
    coarse = 0.35 + 0.3 * rng.uniform(g * g).reshape(g, g)
    tint = 0.06 * (rng.uniform(3) - 0.5)
    pos = np.linspace(0, g - 1, size)
    interp = np.clip(1 - np.abs(pos[:, None] - np.arange(g)[None, :]), 0, None)
    smooth = interp @ coarse @ interp.T
    fine = noise * (rng.uniform(3 * size * size).reshape(3, size, size) - 0.5)
    return smooth[None] + tint[:, None, None] + fine


def _coverage(shape: str, box, x0: int, y0: int, x1: int, y1: int) -> np.ndarray:
    """Fraction of each pixel in the window covered by the shape, by supersampling."""
    s = SUPERSAMPLE
    ys = y0 + (np.arange((y1 - y0) * s) + 0.5) / s
    xs = x0 + (np.arange((x1 - x0) * s) + 0.5) / s
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    bx1, by1, bx2, by2 = box
    if shape == "square":
        inside = (xx >= bx1) & (xx <= bx2) & (yy >= by1) & (yy <= by2)
    elif shape == "circle":
        cx, cy, rx, ry = (bx1 + bx2) / 2, (by1 + by2) / 2, (bx2 - bx1) / 2, (by2 - by1) / 2
        inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1
    else:  # apex top-centre, base along the bottom edge
        t = (yy - by1) / (by2 - by1)
        half = t * (bx2 - bx1) / 2
        cx = (bx1 + bx2) / 2
        inside = (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= half)
    h, w = y1 - y0, x1 - x0
    return inside.reshape(h, s, w, s).mean(axis=(1, 3))


def generate_scene(cfg: GenConfig, seed: int) -> Scene:
    rng = SplitMix64.for_seed(seed)
    size = cfg.image_size
    lo_n, hi_n = cfg.objects
    n_obj = lo_n + int(rng.uniform(1)[0] * (hi_n - lo_n + 1))
    img = _background(rng, size, cfg.noise)
    cum = np.cumsum(cfg.probs)
    lo, hi = cfg.size_range[0] * size, cfg.size_range[1] * size
    gts: list[GroundTruth] = []
    for _ in range(n_obj):
        u = rng.uniform(8)
        cls = min(int(np.searchsorted(cum, u[0], side="right")), cfg.num_classes - 1)
        w, h = lo + u[1] * (hi - lo), lo + u[2] * (hi - lo)
        if gts and u[3] < cfg.occlusion:
            ref = gts[int(u[4] * len(gts))]
            cx = (ref.x1 + ref.x2) / 2 + (u[5] - 0.5) * w
            cy = (ref.y1 + ref.y2) / 2 + (u[6] - 0.5) * h
        else:
            cx = w / 2 + u[5] * (size - w)
            cy = h / 2 + u[6] * (size - h)
        cx = min(max(cx, w / 2), size - w / 2)
        cy = min(max(cy, h / 2), size - h / 2)
        box = tuple(float(v) for v in (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
        x0, y0 = int(math.floor(box[0])), int(math.floor(box[1]))
        x1, y1 = min(int(math.ceil(box[2])), size), min(int(math.ceil(box[3])), size)
        alpha = _coverage(SHAPES[cls % len(SHAPES)], box, x0, y0, x1, y1)
        color = class_color(cls, cfg.num_classes, u[7], 0.75 + 0.25 * u[4])
        patch = img[:, y0:y1, x0:x1]
        img[:, y0:y1, x0:x1] = patch * (1 - alpha) + color[:, None, None] * alpha
        gts.append(GroundTruth(*box, cls))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)[None]
    return Scene(Tensor(img), gts, seed)


# --------------------------------------------------------------------------- annotations


def parse_annotations(path, fmt: str, image_size=None, stats: dict | None = None) -> list[GroundTruth]:
    """Ground truth of one image. ``image_size`` is ``(width, height)`` or a side length.

    Internal lines are ``class_id cx cy w h`` normalised to [0, 1] and need
    ``image_size``. VisDrone lines are ``x,y,w,h,score,category,truncation,occlusion``
    in pixels; category 0, score 0 and non-positive sizes are dropped and tallied.
    """
    path = Path(path)
    if not path.is_file():
        raise AnnotationNotFoundError(path)
    if isinstance(image_size, (int, float)):
        image_size = (image_size, image_size)
    if fmt == "internal" and image_size is None:
        raise ConfigError("internal annotations need image_size")
    dropped = 0
    out: list[GroundTruth] = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.strip()
        if not text:
            continue
        if fmt == "internal":
            parts = text.split()
            if len(parts) != 5:
                raise AnnotationFormatError(path, line_no, line, "expected 5 fields")
            try:
                cls = int(parts[0])
                cx, cy, w, h = (float(p) for p in parts[1:])
            except ValueError as exc:
                raise AnnotationFormatError(path, line_no, line, str(exc)) from None
            if cls < 0 or not all(map(math.isfinite, (cx, cy, w, h))):
                raise AnnotationFormatError(path, line_no, line, "negative class or non-finite value")
            iw, ih = image_size
            box = ((cx - w / 2) * iw, (cy - h / 2) * ih, (cx + w / 2) * iw, (cy + h / 2) * ih)
            if w <= 0 or h <= 0:
                dropped += 1
                continue
        elif fmt == "visdrone":
            parts = [p for p in text.rstrip(",").split(",")]
            if len(parts) < 6:
                raise AnnotationFormatError(path, line_no, line, "expected 8 comma-separated fields")
            try:
                x, y, w, h = (float(p) for p in parts[:4])
                score, cls = int(parts[4]), int(parts[5])
            except ValueError as exc:
                raise AnnotationFormatError(path, line_no, line, str(exc)) from None
            if cls == 0 or score == 0 or w <= 0 or h <= 0:
                dropped += 1
                continue
            box = (x, y, x + w, y + h)
        else:
            raise ConfigError(f"unknown annotation format {fmt!r}")
        if image_size is not None:
            iw, ih = image_size
            box = (max(box[0], 0.0), max(box[1], 0.0), min(box[2], float(iw)), min(box[3], float(ih)))
            if box[2] <= box[0] or box[3] <= box[1]:
                dropped += 1
                continue
        out.append(GroundTruth(*box, cls))
    if stats is not None:
        stats["dropped"] = stats.get("dropped", 0) + dropped
    return out


def format_internal(gts, image_size) -> str:
    if isinstance(image_size, (int, float)):
        image_size = (image_size, image_size)
    iw, ih = image_size
    lines = []
    for g in gts:
        cx, cy = (g.x1 + g.x2) / 2 / iw, (g.y1 + g.y2) / 2 / ih
        w, h = (g.x2 - g.x1) / iw, (g.y2 - g.y1) / ih
        lines.append(f"{g.class_id} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_annotations(path, gts, image_size):
    Path(path).write_text(format_internal(gts, image_size))


# --------------------------------------------------------------------------- letterbox


@dataclass(frozen=True)
class LetterboxTransform:
    """Maps source pixels to letterboxed pixels: ``dst = src * scale + pad``."""

    scale: float
    pad_x: float
    pad_y: float

    def forward_box(self, box):
        s = self.scale
        return (box[0] * s + self.pad_x, box[1] * s + self.pad_y,
                box[2] * s + self.pad_x, box[3] * s + self.pad_y)

    def inverse_box(self, box):
        s = self.scale
        return ((box[0] - self.pad_x) / s, (box[1] - self.pad_y) / s,
                (box[2] - self.pad_x) / s, (box[3] - self.pad_y) / s)

    def forward_gt(self, g: GroundTruth) -> GroundTruth:
        return GroundTruth(*self.forward_box(g.box), g.class_id)


def letterbox(image: Tensor | np.ndarray, target: int) -> tuple[Tensor, LetterboxTransform]:
    """Aspect-preserving resize into ``target``² with symmetric 114/255 padding."""
    if target % 32:
        raise ConfigError(f"letterbox target {target} must be divisible by 32")
    arr = np.asarray(getattr(image, "data", image))
    _, c, h, w = arr.shape
    scale = min(target / h, target / w)
    nh, nw = int(round(h * scale)), int(round(w * scale))
    if (nh, nw) == (h, w):
        resized = arr[0]
    else:
        resized = np.stack([
            np.asarray(Image.fromarray(arr[0, k].astype(np.float32))
                       .resize((nw, nh), Image.BILINEAR)) for k in range(c)])
    top, left = (target - nh) // 2, (target - nw) // 2
    out = np.full((1, c, target, target), PAD_VALUE, dtype=arr.dtype)
    out[0, :, top:top + nh, left:left + nw] = resized
    return Tensor(out), LetterboxTransform(scale, float(left), float(top))


# --------------------------------------------------------------------------- datasets


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return rgb.transpose(2, 0, 1)[None]


def write_image(path, image):
    arr = np.asarray(getattr(image, "data", image))[0].transpose(1, 2, 0)
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)


class SyntheticDataset:
    """Scenes for a list of seeds; images cached after first generation."""

    def __init__(self, cfg: GenConfig, seeds):
        self.cfg = cfg
        self.seeds = list(seeds)
        self._cache: dict = {}

    def __len__(self):
        return len(self.seeds)

    def __getitem__(self, i):
        if i not in self._cache:
            s = generate_scene(self.cfg, self.seeds[i])
            self._cache[i] = (s.image.data[0], s.gts, f"scene_{self.seeds[i]}")
        return self._cache[i]


class FileDataset:
    """Image and annotation pairs letterboxed to ``image_size``."""

    def __init__(self, entries, fmt: str, image_size: int, stats: dict | None = None):
        self.entries = list(entries)
        self.fmt = fmt
        self.image_size = image_size
        self.stats = stats if stats is not None else {}
        self._cache: dict = {}

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        if i not in self._cache:
            img_path, ann_path = self.entries[i]
            try:
                raw = read_image(img_path)
            except (FileNotFoundError, OSError) as exc:
                raise DataError(f"cannot read image {img_path}: {exc}") from None
            h, w = raw.shape[2:]
            gts = parse_annotations(ann_path, self.fmt, (w, h), self.stats)
            boxed, tf = letterbox(raw, self.image_size)
            self._cache[i] = (boxed.data[0], [tf.forward_gt(g) for g in gts], Path(img_path).stem)
        return self._cache[i]


@dataclass
class SyntheticSpec:
    train: int = 2000
    val: int = 500
    seed: int = 0
    gen: GenConfig = field(default_factory=GenConfig)

    def splits(self) -> dict:
        base = self.seed * 10_000_000
        return {
            "train": SyntheticDataset(self.gen, range(base, base + self.train)),
            "val": SyntheticDataset(self.gen, range(base + 5_000_000, base + 5_000_000 + self.val)),
        }


def load_data(spec, image_size: int, fmt: str | None = None) -> dict:
    """Splits from ``"synthetic"``, a JSON manifest path, or a manifest dict.

    Manifest layout::

        {"format": "internal", "splits": {"train": [{"image": ..., "annotations": ...}], ...}}
        {"synthetic": {"train": 2000, "val": 500, "seed": 0, "gen": {...}}}

    Relative paths resolve against the manifest directory. ``fmt`` overrides the
    manifest's annotation format.
    """
    root = Path(".")
    if spec == "synthetic":
        manifest = {"synthetic": {}}
    elif isinstance(spec, dict):
        manifest = spec
    else:
        path = Path(spec)
        if not path.is_file():
            raise DataError(f"dataset manifest not found: {path}")
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        root = path.parent
    if "synthetic" in manifest:
        s = dict(manifest["synthetic"])
        gen = dict(s.pop("gen", {}))
        gen.setdefault("image_size", image_size)
        return SyntheticSpec(gen=GenConfig.from_dict(gen), **s).splits()
    if "splits" not in manifest:
        raise DataError("manifest needs a 'splits' or 'synthetic' entry")
    fmt = fmt or manifest.get("format", "internal")
    out = {}
    for name, items in manifest["splits"].items():
        entries = [(root / it["image"], root / it["annotations"]) for it in items]
        out[name] = FileDataset(entries, fmt, image_size)
    return out


def export_synthetic(out_dir, spec: SyntheticSpec) -> Path:
    """Write scenes as PNG plus internal annotations and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    manifest = {"format": "internal", "splits": {}}
    for name, ds in spec.splits().items():
        (out_dir / name).mkdir(parents=True, exist_ok=True)
        items = []
        for i in range(len(ds)):
            img, gts, image_id = ds[i]
            write_image(out_dir / name / f"{image_id}.png", img[None])
            write_annotations(out_dir / name / f"{image_id}.txt", gts, img.shape[-1])
            items.append({"image": f"{name}/{image_id}.png", "annotations": f"{name}/{image_id}.txt"})
        manifest["splits"][name] = items
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path
