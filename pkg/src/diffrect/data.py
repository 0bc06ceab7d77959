"""Synthetic multi-class shape data, labeled/unlabeled splits, and dataset I/O.

Directory layout::

    images/<id>.png   16-bit grayscale
    masks/<id>.png    palette PNG, palette = semantic color set
    meta.json         num_classes, size, seed, ids, geometry, split
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from diffrect import scs
from diffrect.errors import require
from diffrect.metrics import one_hot

SHAPES = ("disk", "ring", "ellipse")
NOISE_SIGMA = 0.05
RING_INNER = 0.5
ELLIPSE_MINOR = 0.6
MAX_PLACEMENT_TRIES = 200

_U16 = np.float32(65535.0)


class DatasetFormatError(Exception):
    """A dataset file could not be parsed."""


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W, C) uint8 one-hot
    geometry: list = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        return self.mask.argmax(-1)

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
            and self.geometry == other.geometry
        )


def radius_bounds(size: int) -> tuple[float, float]:
    return 0.1 * size, 0.2 * size


def class_intensities(num_classes: int) -> np.ndarray:
    """Foreground intensity per class (index 0 is the background level)."""
    return np.concatenate([[0.25], np.linspace(0.55, 0.65, num_classes - 1)])


def shape_area(g: dict) -> float:
    """Continuous area of a stored shape; rasterised areas track this closely."""
    r = g["radius"]
    if g["kind"] == "disk":
        return math.pi * r * r
    if g["kind"] == "ring":
        return math.pi * r * r * (1 - RING_INNER**2)
    return math.pi * r * r * ELLIPSE_MINOR


def rasterize(g: dict, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - g["cy"], xx - g["cx"]
    r = g["radius"]
    if g["kind"] == "disk":
        return dy * dy + dx * dx <= r * r
    if g["kind"] == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 > (RING_INNER * r) ** 2)
    c, s = math.cos(g["angle"]), math.sin(g["angle"])
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / r) ** 2 + (v / (ELLIPSE_MINOR * r)) ** 2 <= 1.0


def _place(rng: np.random.Generator, num_classes: int, size: int) -> list[dict] | None:
    lo, hi = radius_bounds(size)
    placed: list[dict] = []
    for k in range(1, num_classes):
        for _ in range(MAX_PLACEMENT_TRIES):
            r = float(rng.uniform(lo, hi))
            cy, cx = (float(v) for v in rng.uniform(r + 1, size - r - 1, size=2))
            # bounding circles at least 2 px apart, so shapes never touch
            if all(math.hypot(cy - p["cy"], cx - p["cx"]) >= r + p["radius"] + 2 for p in placed):
                placed.append(
                    {
                        "cls": k,
                        "kind": SHAPES[(k - 1) % len(SHAPES)],
                        "cy": cy,
                        "cx": cx,
                        "radius": r,
                        "angle": float(rng.uniform(0, math.pi)),
                    }
                )
                break
        else:
            return None
    return placed


def _illumination(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    gy, gx = rng.uniform(-0.2, 0.2, size=2)
    by, bx = rng.uniform(-0.5, 0.5, size=2)
    amp = rng.uniform(-0.15, 0.15)
    blob = amp * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / 0.1)
    return gy * yy + gx * xx + blob


def _quantize(x: np.ndarray) -> np.ndarray:
    # images live on the 16-bit grid so they survive PNG round trips exactly
    q = np.round(np.clip(x, 0.0, 1.0) * 65535).astype(np.uint16)
    return _from_u16(q)


def _from_u16(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float32) / _U16


def make_sample(rng: np.random.Generator, sample_id: str, num_classes: int, size: int) -> Sample:
    while True:
        geometry = _place(rng, num_classes, size)
        if geometry is not None:
            break
    labels = np.zeros((size, size), dtype=np.int64)
    for g in geometry:
        labels[rasterize(g, size)] = g["cls"]
    levels = class_intensities(num_classes)
    image = levels[labels] + _illumination(rng, size) + rng.normal(0.0, NOISE_SIGMA, size=(size, size))
    return Sample(sample_id, _quantize(image), one_hot(labels, num_classes), geometry)


def synth_generate(n: int, num_classes: int, size: int, seed: int) -> list[Sample]:
    """Generate ``n`` samples, each with one non-overlapping shape per foreground class."""
    require(n >= 1, f"n must be positive, got {n}")
    require(2 <= num_classes <= scs.MAX_CLASSES, f"need 2 <= classes <= {scs.MAX_CLASSES}, got {num_classes}")
    require(size >= 32, f"size must be at least 32, got {size}")
    width = len(str(n - 1))
    seqs = np.random.SeedSequence(seed).spawn(n)
    return [make_sample(np.random.default_rng(s), f"{i:0{width}d}", num_classes, size) for i, s in enumerate(seqs)]


@dataclass(frozen=True)
class SplitSpec:
    labeled_ratio: float
    seed: int = 0

    def __post_init__(self):
        require(0.0 < self.labeled_ratio <= 1.0, f"labeled ratio must be in (0, 1], got {self.labeled_ratio}")


def split_labeled(ds: list[Sample], spec: SplitSpec) -> tuple[list[Sample], list[Sample]]:
    """Deterministically shuffle and split into labeled / unlabeled pools."""
    require(len(ds) > 0, "cannot split an empty dataset")
    n_lab = max(1, round(spec.labeled_ratio * len(ds)))
    order = np.random.default_rng(spec.seed).permutation(len(ds))
    lab = sorted(order[:n_lab].tolist())
    unl = sorted(order[n_lab:].tolist())
    return [ds[i] for i in lab], [ds[i] for i in unl]


# -- I/O -----------------------------------------------------------------------


def _palette_bytes(colors: np.ndarray) -> list[int]:
    return [int(v) for v in np.asarray(colors, dtype=np.uint8).reshape(-1)]


def save_mask_png(path, labels: np.ndarray, colors: np.ndarray) -> None:
    im = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    im.putpalette(_palette_bytes(colors))
    im.save(path, optimize=False)


def load_mask_png(path, colors: np.ndarray) -> np.ndarray:
    """Read a palette PNG back to an integer label map, validating every color."""
    path = Path(path)
    try:
        im = Image.open(path)
        im.load()
    except Exception as exc:  # PIL raises several unrelated types
        raise DatasetFormatError(f"{path}: unreadable mask ({exc})") from exc
    if im.mode != "P":
        raise DatasetFormatError(f"{path}: expected a palette PNG, got mode {im.mode}")
    idx = np.asarray(im)
    pal = np.array(im.getpalette() or [], dtype=np.int64).reshape(-1, 3)
    used = np.unique(idx)
    if used.size and used.max() >= len(pal):
        raise DatasetFormatError(f"{path}: pixel index beyond the palette")
    lut = np.full(256, -1, dtype=np.int64)
    colors = np.asarray(colors, dtype=np.int64)
    for i in used:
        hit = np.flatnonzero((colors == pal[i]).all(-1))
        if hit.size == 0:
            raise DatasetFormatError(f"{path}: palette color {tuple(pal[i])} is not in the class color set")
        lut[i] = hit[0]
    return lut[idx]


def save_image_png(path, image: np.ndarray) -> None:
    q = np.round(np.clip(image, 0, 1) * 65535).astype(np.uint16)
    Image.fromarray(q).save(path, optimize=False)


def load_image_png(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except Exception as exc:
        raise DatasetFormatError(f"{path}: unreadable image ({exc})") from exc
    if arr.dtype != np.uint16 or arr.ndim != 2:
        raise DatasetFormatError(f"{path}: expected 16-bit grayscale, got {arr.dtype} {arr.shape}")
    return _from_u16(arr)


def save_dataset(ds: list[Sample], out_dir, *, seed: int | None = None, split: dict | None = None) -> None:
    require(len(ds) > 0, "refusing to save an empty dataset")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    num_classes = ds[0].mask.shape[-1]
    colors = scs.build_color_set(num_classes)
    for s in ds:
        save_image_png(out / "images" / f"{s.id}.png", s.image)
        save_mask_png(out / "masks" / f"{s.id}.png", s.labels, colors)
    meta = {
        "num_classes": int(num_classes),
        "size": int(ds[0].image.shape[0]),
        "seed": seed,
        "colors": colors.tolist(),
        "ids": [s.id for s in ds],
        "geometry": {s.id: s.geometry for s in ds},
        "split": split,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def read_meta(data_dir) -> dict:
    path = Path(data_dir) / "meta.json"
    try:
        meta = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc
    for key in ("num_classes", "ids"):
        if key not in meta:
            raise DatasetFormatError(f"{path}: missing key {key!r}")
    return meta


def load_dataset(data_dir) -> list[Sample]:
    d = Path(data_dir)
    meta = read_meta(d)
    num_classes = int(meta["num_classes"])
    colors = scs.build_color_set(num_classes)
    geometry = meta.get("geometry") or {}
    out = []
    for sid in meta["ids"]:
        image = load_image_png(d / "images" / f"{sid}.png")
        labels = load_mask_png(d / "masks" / f"{sid}.png", colors)
        if labels.shape != image.shape:
            raise DatasetFormatError(f"{d / 'masks' / f'{sid}.png'}: shape {labels.shape} does not match its image")
        out.append(Sample(sid, image, one_hot(labels, num_classes), geometry.get(sid, [])))
    return out
