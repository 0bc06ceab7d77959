"""Weak (geometric) and strong (photometric) perturbations.

Arrays are (H, W) images or (H, W, C) masks; geometry acts on the first two axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from diffrect.errors import ContractError, require

# 3x3 smoothing kernel used as the "degenerate" image for sharpness, as in PIL's ImageEnhance
_SMOOTH = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0


@dataclass(frozen=True)
class PerturbSpec:
    flip_prob: float = 0.5
    rot_choices: tuple[int, ...] = (0, 90, 180, 270)
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    contrast_range: tuple[float, float] = (0.5, 1.5)
    sharpness_range: tuple[float, float] = (0.5, 1.5)
    brightness_range: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        require(all(r % 90 == 0 for r in self.rot_choices), "rotations must be right angles")


def apply_geometry(x: np.ndarray, quarter_turns: int, flip: bool) -> np.ndarray:
    """Horizontal flip (optional) followed by a counter-clockwise rotation."""
    if flip:
        x = x[:, ::-1]
    return np.ascontiguousarray(np.rot90(x, k=quarter_turns % 4, axes=(0, 1)))


def sample_geometry(rng: np.random.Generator, spec: PerturbSpec = PerturbSpec()) -> tuple[int, bool]:
    flip = bool(rng.random() < spec.flip_prob)
    angle = spec.rot_choices[int(rng.integers(len(spec.rot_choices)))]
    return angle // 90, flip


def weak_perturb(image, mask, rng: np.random.Generator, spec: PerturbSpec = PerturbSpec()):
    """Apply one random flip/rotation to the image and (if given) its mask."""
    image = np.asarray(image)
    if image.shape[0] != image.shape[1]:
        raise ContractError(f"weak perturbation needs square inputs, got {image.shape[:2]}")
    if mask is not None and np.asarray(mask).shape[:2] != image.shape[:2]:
        raise ContractError("mask and image are not aligned")
    k, flip = sample_geometry(rng, spec)
    out_mask = None if mask is None else apply_geometry(np.asarray(mask), k, flip)
    return apply_geometry(image, k, flip), out_mask


def adjust(image, sigma: float, contrast: float, sharpness: float, brightness: float) -> np.ndarray:
    """Deterministic photometric chain: blur, contrast, sharpness, brightness, clip to [0, 1]."""
    x = np.asarray(image, dtype=np.float64)
    if sigma > 0:
        x = ndimage.gaussian_filter(x, sigma=sigma, mode="reflect")
    mean = x.mean()
    x = mean + contrast * (x - mean)
    smooth = ndimage.convolve(x, _SMOOTH, mode="reflect")
    x = smooth + sharpness * (x - smooth)
    x = brightness * x
    return np.clip(x, 0.0, 1.0)


def strong_perturb(image, rng: np.random.Generator, spec: PerturbSpec = PerturbSpec()) -> np.ndarray:
    """Random blur followed by random contrast, sharpness and brightness changes."""
    sigma = rng.uniform(*spec.blur_sigma_range)
    c = rng.uniform(*spec.contrast_range)
    s = rng.uniform(*spec.sharpness_range)
    b = rng.uniform(*spec.brightness_range)
    return adjust(image, sigma, c, s, b).astype(np.asarray(image).dtype, copy=False)
