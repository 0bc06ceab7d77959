"""DDPM math: cosine schedule, closed-form forward diffusion, ancestral reverse steps.

Timesteps are 1-based: t = 1 is the last (deterministic) reverse step and
t = T is pure noise. ``alpha_bar[t - 1]`` holds the cumulative product up to t.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from diffrect.errors import ContractError, require

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def __post_init__(self):
        for arr in (self.alpha, self.alpha_bar, self.posterior_var):
            arr.setflags(write=False)

    @property
    def beta(self) -> np.ndarray:
        return 1.0 - self.alpha

    def check_t(self, t) -> None:
        if isinstance(t, torch.Tensor):
            ok = bool(((t >= 1) & (t <= self.T)).all())
        else:
            ok = 1 <= int(t) <= self.T
        if not ok:
            raise ContractError(f"timestep {t} outside [1, {self.T}]")

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "alpha", "alpha_bar", "posterior_var"])
            for i in range(self.T):
                w.writerow([i + 1, repr(float(self.alpha[i])), repr(float(self.alpha_bar[i])), repr(float(self.posterior_var[i]))])


def make_cosine_schedule(T: int) -> NoiseSchedule:
    """Cosine schedule; per-step betas clipped at 0.999."""
    require(isinstance(T, (int, np.integer)) and T >= 1, f"T must be a positive integer, got {T!r}")

    def f(t):
        return math.cos((t / T + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2

    f0 = f(0)
    target = np.array([f(t) / f0 for t in range(T + 1)])
    beta = np.minimum(1.0 - target[1:] / target[:-1], MAX_BETA)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = (1.0 - prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(int(T), alpha, alpha_bar, posterior_var)


def _coef(values: np.ndarray, t, like: torch.Tensor):
    """Per-timestep coefficient as a float, or a broadcastable tensor for batched t."""
    if isinstance(t, torch.Tensor):
        v = torch.tensor(values, dtype=like.dtype, device=like.device)[t.long() - 1]
        return v.reshape(-1, *([1] * (like.dim() - 1)))
    return float(values[int(t) - 1])


def q_sample(z0: torch.Tensor, t, eta: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Diffuse a clean latent to step t in closed form."""
    sched.check_t(t)
    require(eta.shape == z0.shape, f"noise shape {tuple(eta.shape)} != latent shape {tuple(z0.shape)}")
    ab = _coef(sched.alpha_bar, t, z0)
    if isinstance(ab, float):
        return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eta
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eta


def predict_z0(z_t: torch.Tensor, t, eps_hat: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Invert q_sample given a noise estimate."""
    sched.check_t(t)
    ab = _coef(sched.alpha_bar, t, z_t)
    if isinstance(ab, float):
        return (z_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    return (z_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()


def reverse_step(z_t: torch.Tensor, t: int, eps_hat: torch.Tensor, eta: torch.Tensor | None, sched: NoiseSchedule) -> torch.Tensor:
    """One ancestral step z_t -> z_{t-1} with fixed posterior variance."""
    sched.check_t(t)
    t = int(t)
    require(eps_hat.shape == z_t.shape, "predicted noise must match the latent shape")
    a = float(sched.alpha[t - 1])
    ab = float(sched.alpha_bar[t - 1])
    mean = (z_t - (1.0 - a) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)
    if eta is None:
        return mean
    require(eta.shape == z_t.shape, "step noise must match the latent shape")
    if t == 1:
        require(not bool(eta.abs().max() > 0), "the final reverse step is deterministic; eta must be zero at t=1")
        return mean
    return mean + math.sqrt(float(sched.posterior_var[t - 1])) * eta


Denoiser = Callable[[torch.Tensor, int, torch.Tensor, object], torch.Tensor]


def sample_loop(
    denoiser: Denoiser,
    cond: torch.Tensor,
    aux,
    sched: NoiseSchedule,
    rng: torch.Generator,
    callback=None,
) -> torch.Tensor:
    """Ancestral sampling from N(0, I) down to a clean latent, conditioned on ``cond``.

    ``denoiser(z_t, t, cond, aux)`` must return a noise estimate shaped like z_t.
    It is called exactly ``sched.T`` times. ``callback(t, z)``, if given, sees
    each new latent z_{t-1} as it is produced.
    """
    r = torch.randn(cond.shape, generator=rng, dtype=cond.dtype, device=cond.device)
    for t in range(sched.T, 0, -1):
        eps = denoiser(r, t, cond, aux)
        if eps.shape != r.shape:
            raise ContractError(f"denoiser returned shape {tuple(eps.shape)}, expected {tuple(r.shape)}")
        eta = torch.randn(r.shape, generator=rng, dtype=r.dtype, device=r.device) if t > 1 else None
        r = reverse_step(r, t, eps, eta, sched)
        if callback is not None:
            callback(t - 1, r)
    return r
