"""Segmentation metrics and the calibration-guidance scalar.

Masks are one-hot arrays of shape (H, W, C); class 0 is background.
Overlap scores are returned per class. Surface distances are in pixels,
Euclidean, measured between 4-connected boundaries.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from diffrect.errors import ContractError, require

GUIDANCE_MODES = ("dice", "jaccard", "fixed", "random", "both")

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def one_hot(labels, num_classes: int) -> np.ndarray:
    """(H, W) integer label map -> (H, W, C) uint8 one-hot mask."""
    labels = np.asarray(labels)
    require(labels.ndim == 2, f"label map must be 2-D, got shape {labels.shape}")
    require(
        labels.size == 0 or (labels.min() >= 0 and labels.max() < num_classes),
        f"labels outside [0, {num_classes})",
    )
    return np.eye(num_classes, dtype=np.uint8)[labels]


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 3:
        raise ContractError(f"mask shapes differ or are not (H, W, C): {a.shape} vs {b.shape}")
    return a.astype(bool), b.astype(bool)


def dice(a, b) -> np.ndarray:
    """Per-class Dice; a class absent from both masks scores 1.0."""
    a, b = _check_pair(a, b)
    inter = np.logical_and(a, b).sum(axis=(0, 1)).astype(np.float64)
    total = a.sum(axis=(0, 1)) + b.sum(axis=(0, 1))
    out = np.ones(a.shape[-1])
    nz = total > 0
    out[nz] = 2.0 * inter[nz] / total[nz]
    return out


def jaccard(a, b) -> np.ndarray:
    """Per-class intersection over union; empty union scores 1.0."""
    a, b = _check_pair(a, b)
    inter = np.logical_and(a, b).sum(axis=(0, 1)).astype(np.float64)
    union = np.logical_or(a, b).sum(axis=(0, 1))
    out = np.ones(a.shape[-1])
    nz = union > 0
    out[nz] = inter[nz] / union[nz]
    return out


class SurfaceDistances(NamedTuple):
    hd95: float
    asd: float


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour; pixels on the image edge count."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_FOUR_CONNECTED, border_value=0)
    return mask & ~eroded


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # exact Euclidean distance from every src pixel to the nearest dst pixel
    dt = ndimage.distance_transform_edt(~dst)
    return dt[src]


def binary_surface_distances(a, b) -> SurfaceDistances | None:
    """HD95 and ASD between two binary masks, or None when either is empty.

    HD95 is the larger of the two directed 95th percentiles; ASD is the
    mean of the two directed mean distances.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape or a.ndim != 2:
        raise ContractError(f"binary masks must share a 2-D shape: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return None
    ba, bb = boundary(a), boundary(b)
    d_ab = _directed(ba, bb)
    d_ba = _directed(bb, ba)
    hd95 = max(np.percentile(d_ab, 95), np.percentile(d_ba, 95))
    asd = 0.5 * (d_ab.mean() + d_ba.mean())
    return SurfaceDistances(float(hd95), float(asd))


def surface_distances(a, b) -> SurfaceDistances | None:
    """Surface distances between the foreground unions (classes >= 1) of two one-hot masks."""
    a, b = _check_pair(a, b)
    return binary_surface_distances(a[..., 1:].any(-1), b[..., 1:].any(-1))


@dataclass(frozen=True)
class GuidanceMode:
    mode: str = "dice"
    fixed_value: float = 0.5

    def __post_init__(self):
        require(self.mode in GUIDANCE_MODES, f"unknown guidance mode {self.mode!r}")
        require(0.0 <= self.fixed_value <= 1.0, "fixed_value must lie in [0, 1]")


def calibration_guidance(y_hi, y_lo, mode: GuidanceMode, rng: np.random.Generator | None = None) -> float:
    """Quality scalar between two masks, averaged over foreground classes."""
    a, b = _check_pair(y_hi, y_lo)
    if mode.mode == "fixed":
        return float(mode.fixed_value)
    if mode.mode == "random":
        require(rng is not None, "random guidance needs an rng")
        return float(rng.uniform(0.0, 1.0))
    d = float(dice(a, b)[1:].mean())
    if mode.mode == "dice":
        return d
    j = float(jaccard(a, b)[1:].mean())
    if mode.mode == "jaccard":
        return j
    return d + j


# -- reports -----------------------------------------------------------------


@dataclass
class ClassMetrics:
    cls: int
    dice: float
    jaccard: float
    hd95: float
    asd: float


@dataclass
class MetricsReport:
    dice_mean: float
    jaccard_mean: float
    hd95: float
    asd: float
    per_class: list[ClassMetrics] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"dice": self.dice_mean, "jaccard": self.jaccard_mean, "hd95": self.hd95, "asd": self.asd}


def case_metrics(pred, gt) -> list[ClassMetrics]:
    """Foreground per-class metrics for one case.

    Undefined surface distances (a class empty in either mask) are replaced
    by the image diagonal so empty predictions are penalised.
    """
    pred, gt = _check_pair(pred, gt)
    h, w, c = gt.shape
    penalty = math.hypot(h, w)
    d = dice(pred, gt)
    j = jaccard(pred, gt)
    rows = []
    for k in range(1, c):
        sd = binary_surface_distances(pred[..., k], gt[..., k])
        if sd is None:
            # both empty is a perfect match; one empty is a miss
            hd, asd = (0.0, 0.0) if not pred[..., k].any() and not gt[..., k].any() else (penalty, penalty)
        else:
            hd, asd = sd
        rows.append(ClassMetrics(k, float(d[k]), float(j[k]), hd, asd))
    return rows


def summarize(cases: Sequence[Sequence[ClassMetrics]]) -> MetricsReport:
    """Average per-case class rows into a report (class mean, then foreground mean)."""
    require(len(cases) > 0, "cannot summarise an empty evaluation")
    classes = sorted({r.cls for rows in cases for r in rows})
    per_class = []
    for k in classes:
        rs = [r for rows in cases for r in rows if r.cls == k]
        per_class.append(
            ClassMetrics(
                k,
                float(np.mean([r.dice for r in rs])),
                float(np.mean([r.jaccard for r in rs])),
                float(np.mean([r.hd95 for r in rs])),
                float(np.mean([r.asd for r in rs])),
            )
        )
    return MetricsReport(
        dice_mean=float(np.mean([r.dice for r in per_class])),
        jaccard_mean=float(np.mean([r.jaccard for r in per_class])),
        hd95=float(np.mean([r.hd95 for r in per_class])),
        asd=float(np.mean([r.asd for r in per_class])),
        per_class=per_class,
    )


CSV_FIELDS = ("case_id", "class", "dice", "jaccard", "hd95", "asd")


def write_case_csv(path, cases: Iterable[tuple[str, Sequence[ClassMetrics]]]) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for case_id, rows in cases:
            for r in rows:
                writer.writerow([case_id, r.cls, repr(r.dice), repr(r.jaccard), repr(r.hd95), repr(r.asd)])
