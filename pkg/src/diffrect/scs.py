"""Semantic coloring: a bijection between class indices and RGB colors.

Background is black; the remaining classes take evenly spaced hues at full
saturation and value, which keeps neighbouring classes far apart in RGB.
"""

from __future__ import annotations

import colorsys
from functools import lru_cache

import numpy as np

from diffrect.errors import ContractError, require

MIN_CLASSES, MAX_CLASSES = 2, 64


@lru_cache(maxsize=None)
def _colors(num_classes: int) -> tuple[tuple[int, int, int], ...]:
    out = [(0, 0, 0)]
    for k in range(1, num_classes):
        hue = (k - 1) / (num_classes - 1)
        r, g, b = colorsys.hsv_to_rgb(hue, 1.0, 1.0)
        out.append((round(r * 255), round(g * 255), round(b * 255)))
    return tuple(out)


def build_color_set(num_classes: int) -> np.ndarray:
    """Return the (C, 3) uint8 color table for ``num_classes`` classes."""
    require(
        isinstance(num_classes, (int, np.integer)) and MIN_CLASSES <= num_classes <= MAX_CLASSES,
        f"number of classes must be in [{MIN_CLASSES}, {MAX_CLASSES}], got {num_classes!r}",
    )
    return np.array(_colors(int(num_classes)), dtype=np.uint8)


def min_color_distance(colors) -> float:
    c = np.asarray(colors, dtype=np.float64)
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    d[np.diag_indices(len(c))] = np.inf
    return float(d.min())


def encode(y, colors) -> np.ndarray:
    """One-hot (H, W, C) mask -> (H, W, 3) uint8 semantic label."""
    y = np.asarray(y)
    colors = np.asarray(colors, dtype=np.uint8)
    if y.ndim != 3:
        raise ContractError(f"expected a one-hot (H, W, C) mask, got shape {y.shape}")
    if y.shape[-1] != len(colors):
        raise ContractError(f"mask has {y.shape[-1]} classes but the color set has {len(colors)}")
    require(np.all(y.sum(-1) == 1), "mask is not one-hot")
    return colors[y.argmax(-1)]


def encode_labels(labels, colors) -> np.ndarray:
    """Integer label map (H, W) -> (H, W, 3) semantic label."""
    labels = np.asarray(labels)
    colors = np.asarray(colors, dtype=np.uint8)
    if labels.size and (labels.min() < 0 or labels.max() >= len(colors)):
        raise ContractError(f"class index outside the {len(colors)}-color set")
    return colors[labels]


def decode_labels(m, colors) -> np.ndarray:
    """Nearest-color class index for each pixel; ties go to the lower index."""
    m = np.asarray(m, dtype=np.float64)
    require(m.ndim >= 1 and m.shape[-1] == 3, f"expected (..., 3) colors, got shape {m.shape}")
    c = np.asarray(colors, dtype=np.float64)
    d2 = ((m[..., None, :] - c) ** 2).sum(-1)
    return d2.argmin(-1)


def decode(m, colors) -> np.ndarray:
    """(H, W, 3) real-valued image -> one-hot (H, W, C) mask by nearest color."""
    return np.eye(len(colors), dtype=np.uint8)[decode_labels(m, colors)]
