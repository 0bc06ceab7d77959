"""Training objectives.

Logits and one-hot targets are (N, C, H, W) tensors. The total objective is

    seg_semi + rect + lat_semi + lambda1 * lat_u + lambda2 * lat_l
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from diffrect.errors import ContractError, require

DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    pseudo_threshold: float = 0.95

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            require(math.isfinite(v) and v >= 0, f"{name} must be finite and non-negative, got {v}")
        require(0.0 <= self.pseudo_threshold <= 1.0, "pseudo_threshold must lie in [0, 1]")


@dataclass
class LossBreakdown:
    seg_semi: torch.Tensor | float
    rect: torch.Tensor | float
    lat_semi: torch.Tensor | float
    lat_u: torch.Tensor | float
    lat_l: torch.Tensor | float
    total: torch.Tensor | float

    FIELDS = ("seg_semi", "rect", "lat_semi", "lat_u", "lat_l", "total")

    def as_floats(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def _check_one_hot(y: torch.Tensor, what: str) -> None:
    ok = bool(((y == 0) | (y == 1)).all()) and bool((y.sum(1) == 1).all())
    if not ok:
        raise ContractError(f"{what} is not a one-hot mask")


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - mean class soft Dice of softmax(logits) against a one-hot target."""
    _check_same(logits, target, "soft_dice_loss")
    p = logits.softmax(1)
    g = target.to(p.dtype)
    dims = (0, 2, 3)
    inter = (p * g).sum(dims)
    denom = p.sum(dims) + g.sum(dims)
    return 1.0 - ((2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)).mean()


def cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean pixel cross-entropy against a one-hot target."""
    _check_same(logits, target, "cross_entropy")
    return F.cross_entropy(logits, target.argmax(1))


def rect_loss(y_w_logits: torch.Tensor, y_r: torch.Tensor) -> torch.Tensor:
    """CE + soft Dice of the weak-view logits against the rectified label (a constant target)."""
    _check_same(y_w_logits, y_r, "rect_loss")
    _check_one_hot(y_r, "rectified label")
    y_r = y_r.detach()
    return cross_entropy(y_w_logits, y_r) + soft_dice_loss(y_w_logits, y_r)


def latent_loss(z_clean: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between a clean latent and its reconstruction."""
    _check_same(z_clean, r, "latent_loss")
    return (z_clean - r).pow(2).mean()


def pseudo_label_loss(strong_logits: torch.Tensor, weak_probs: torch.Tensor, threshold: float) -> torch.Tensor:
    """CE of strong logits against argmax(weak_probs), over pixels whose confidence reaches ``threshold``."""
    _check_same(strong_logits, weak_probs, "pseudo_label_loss")
    weak_probs = weak_probs.detach()
    if bool((weak_probs < -1e-6).any()) or not torch.allclose(
        weak_probs.sum(1), torch.ones_like(weak_probs[:, 0]), atol=1e-4
    ):
        raise ContractError("weak_probs is not a per-pixel probability distribution")
    conf, pseudo = weak_probs.max(1)
    keep = conf >= threshold
    n = int(keep.sum())
    if n == 0:
        return strong_logits.sum() * 0.0
    ce = F.cross_entropy(strong_logits, pseudo, reduction="none")
    return ce[keep].sum() / n


def semi_seg_loss(
    labeled_logits: torch.Tensor,
    y_l: torch.Tensor,
    strong_logits: torch.Tensor,
    weak_probs: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """Supervised CE + Dice on labeled items plus thresholded weak-to-strong pseudo-label CE."""
    sup = cross_entropy(labeled_logits, y_l) + soft_dice_loss(labeled_logits, y_l)
    return sup + pseudo_label_loss(strong_logits, weak_probs, weights.pseudo_threshold)


def total_loss(
    seg_semi, rect, lat_semi, lat_u, lat_l, weights: LossWeights
) -> LossBreakdown:
    parts = {"seg_semi": seg_semi, "rect": rect, "lat_semi": lat_semi, "lat_u": lat_u, "lat_l": lat_l}
    for name, v in parts.items():
        v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise ContractError(f"loss term {name!r} is not finite ({v})")
    total = seg_semi + rect + lat_semi + weights.lambda1 * lat_u + weights.lambda2 * lat_l
    return LossBreakdown(total=total, **parts)
