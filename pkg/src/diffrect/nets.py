"""Learnable components.

* ``SegUNet``       - segmentation U-Net; also exposes multi-scale encoder features.
* ``SemanticEmbed`` - embeds a color-coded label into a (256, H/16, W/16) latent,
                      modulated by the calibration-guidance scalar.
* ``LatentDenoiser``- small U-Net predicting diffusion noise on label latents,
                      conditioned on a second latent and on image features.
* ``LatentDecoder`` - maps a latent back to full-resolution class logits.

All tensors are channels-first: images (N, 1, H, W), logits (N, C, H, W),
semantic labels (N, 3, H, W) scaled to [-1, 1], latents (N, 256, H/16, W/16).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from diffrect.errors import ContractError, require
from diffrect.schedule import make_cosine_schedule

LATENT_FACTOR = 16


def embed_sinusoidal(x, dim: int) -> torch.Tensor:
    """Interleaved sin/cos embedding at geometrically spaced frequencies.

    ``x`` may be a Python scalar or a 1-D tensor; the result has shape
    (dim,) or (len(x), dim) respectively.
    """
    if dim % 2:
        raise ContractError(f"embedding dimension must be even, got {dim}")
    x = torch.as_tensor(x)
    scalar = x.dim() == 0
    if not x.is_floating_point():
        x = x.to(torch.get_default_dtype())
    x = x.reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=x.dtype, device=x.device) / half)
    ang = x * freqs
    out = torch.stack([ang.sin(), ang.cos()], dim=-1).reshape(x.shape[0], dim)
    return out[0] if scalar else out


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ConvBlock(nn.Module):
    """Two 3x3 conv -> norm -> LeakyReLU layers with an optional additive embedding."""

    def __init__(self, cin: int, cout: int, emb_dim: int = 0, batch_norm: bool = False):
        super().__init__()

        def norm(c):
            return nn.BatchNorm2d(c) if batch_norm else nn.GroupNorm(_groups(c), c)

        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = norm(cout)
        self.emb = nn.Linear(emb_dim, cout) if emb_dim else None

    def forward(self, x, emb=None):
        h = F.leaky_relu(self.norm1(self.conv1(x)), 0.01)
        if self.emb is not None:
            h = h + self.emb(emb)[:, :, None, None]
        return F.leaky_relu(self.norm2(self.conv2(h)), 0.01)


@dataclass
class SegNetConfig:
    in_channels: int = 1
    num_classes: int = 4
    base_width: int = 16
    depth: int = 4


class SegUNet(nn.Module):
    def __init__(self, cfg: SegNetConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_width * 2**i for i in range(cfg.depth)]
        self.widths = widths
        self.down = nn.ModuleList()
        cin = cfg.in_channels
        for w in widths:
            self.down.append(ConvBlock(cin, w))
            cin = w
        self.up = nn.ModuleList()
        self.up_proj = nn.ModuleList()
        for w_hi, w_lo in zip(reversed(widths[:-1]), reversed(widths[1:])):
            self.up_proj.append(nn.Conv2d(w_lo, w_hi, 1))
            self.up.append(ConvBlock(2 * w_hi, w_hi))
        self.head = nn.Conv2d(widths[0], cfg.num_classes, 1)

    @property
    def feature_channels(self) -> int:
        return sum(self.widths)

    def forward(self, image: torch.Tensor, latent_size: tuple[int, int] | None = None):
        """Return (logits, features); features are the encoder stages pooled to ``latent_size``."""
        if not torch.isfinite(image).all():
            raise ContractError("segmentation input contains non-finite values")
        h, w = image.shape[-2:]
        require(
            h % 2 ** (self.cfg.depth - 1) == 0 and w % 2 ** (self.cfg.depth - 1) == 0,
            f"input size {h}x{w} not divisible by {2 ** (self.cfg.depth - 1)}",
        )
        skips = []
        x = image
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        for proj, block, skip in zip(self.up_proj, self.up, reversed(skips[:-1])):
            x = F.interpolate(proj(x), scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
        logits = self.head(x)
        if latent_size is None:
            latent_size = (max(1, h // LATENT_FACTOR), max(1, w // LATENT_FACTOR))
        feats = torch.cat([F.adaptive_avg_pool2d(s, latent_size) for s in skips], dim=1)
        return logits, feats


@dataclass
class EmbedConfig:
    widths: tuple[int, ...] = (16, 32, 64, 256)
    guidance_dim: int = 32

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    @property
    def factor(self) -> int:
        return 2 ** len(self.widths)


class SemanticEmbed(nn.Module):
    """Color label -> latent; each stage is two conv-BN-LeakyReLU layers then 2x average pooling."""

    def __init__(self, cfg: EmbedConfig = EmbedConfig()):
        super().__init__()
        self.cfg = cfg
        self.guidance_dim = cfg.guidance_dim
        self.stages = nn.ModuleList()
        cin = 3
        for w in cfg.widths:
            self.stages.append(ConvBlock(cin, w, emb_dim=cfg.guidance_dim, batch_norm=True))
            cin = w

    def forward(self, m: torch.Tensor, tau) -> torch.Tensor:
        f = self.cfg.factor
        if m.dim() != 4 or m.shape[1] != 3:
            raise ContractError(f"expected (N, 3, H, W) semantic labels, got {tuple(m.shape)}")
        if m.shape[-2] % f or m.shape[-1] % f:
            raise ContractError(f"semantic label size {tuple(m.shape[-2:])} not divisible by {f}")
        tau = torch.as_tensor(tau, dtype=m.dtype, device=m.device).reshape(-1)
        if tau.numel() == 1:
            tau = tau.expand(m.shape[0])
        require(tau.numel() == m.shape[0], "need one guidance value per item")
        emb = embed_sinusoidal(tau, self.guidance_dim)
        x = m
        for stage in self.stages:
            x = F.avg_pool2d(stage(x, emb), 2)
        return x


@dataclass
class DenoiserConfig:
    latent_channels: int = 256
    feature_channels: int = 240
    width: int = 32
    levels: int = 2  # each level halves the resolution: 2 levels = 4x down and up
    time_dim: int = 64
    T: int = 100
    parameterization: str = "skip"  # "skip", "x0" (clean latent) or "eps" (noise); see LatentDenoiser
    residual_std: float = 0.1


class LatentDenoiser(nn.Module):
    """Noise predictor on latents. Noisy latent, condition and image features enter by channel concatenation.

    With "x0" the U-Net output F is read as a clean-latent estimate. With "skip"
    F refines the residual d = z_0 - z_cond, whose scale is ``residual_std`` (s):

        n      = z_t - sqrt(ab) * z_cond            (= sqrt(ab) d + sqrt(1 - ab) eta)
        z0_hat = z_cond + c_skip * n + c_out * F
        c_skip = sqrt(ab) s^2 / (ab s^2 + 1 - ab),  c_out = s sqrt(1 - ab) / sqrt(ab s^2 + 1 - ab)

    c_skip * n is the least-squares estimate of d from n, so the estimate is the
    noisy input at small t and the condition at large t, and the narrow U-Net
    never has to carry all latent channels by itself.
    Either estimate is converted to the equivalent noise, so callers always
    receive eps_hat and ``predict_z0`` hands back the clean-latent estimate.
    """

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        w, td = cfg.width, cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, 2 * td), nn.SiLU(), nn.Linear(2 * td, 2 * td))
        # 1x1 stem: the wide concatenated input is projected once instead of through a 3x3 conv
        self.stem = nn.Conv2d(2 * cfg.latent_channels + cfg.feature_channels, w, 1)
        cin = w
        widths = [w * 2**i for i in range(cfg.levels + 1)]
        self.down = nn.ModuleList()
        for wi in widths:
            self.down.append(ConvBlock(cin, wi, emb_dim=2 * td))
            cin = wi
        self.up = nn.ModuleList()
        for w_hi, w_lo in zip(reversed(widths[:-1]), reversed(widths[1:])):
            self.up.append(ConvBlock(w_lo + w_hi, w_hi, emb_dim=2 * td))
        self.out = nn.Conv2d(widths[0], cfg.latent_channels, 1)
        require(cfg.parameterization in ("skip", "x0", "eps"), f"unknown parameterization {cfg.parameterization!r}")
        ab = torch.tensor(make_cosine_schedule(cfg.T).alpha_bar, dtype=torch.float64)
        self.register_buffer("alpha_bar", ab, persistent=False)

    def forward(self, z_noisy: torch.Tensor, t, z_cond: torch.Tensor, feats: torch.Tensor | None) -> torch.Tensor:
        if z_cond.shape != z_noisy.shape:
            raise ContractError(f"condition shape {tuple(z_cond.shape)} != latent shape {tuple(z_noisy.shape)}")
        n = z_noisy.shape[0]
        if feats is None:
            feats = z_noisy.new_zeros(n, self.cfg.feature_channels, *z_noisy.shape[-2:])
        if feats.shape[0] != n or feats.shape[-2:] != z_noisy.shape[-2:] or feats.shape[1] != self.cfg.feature_channels:
            raise ContractError(f"image features {tuple(feats.shape)} do not match latent {tuple(z_noisy.shape)}")
        div = 2**self.cfg.levels
        require(
            z_noisy.shape[-1] % div == 0 and z_noisy.shape[-2] % div == 0,
            f"latent size {tuple(z_noisy.shape[-2:])} not divisible by {div}",
        )
        t = torch.as_tensor(t, dtype=z_noisy.dtype, device=z_noisy.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(n)
        emb = self.time_mlp(embed_sinusoidal(t, self.cfg.time_dim))
        x = self.stem(torch.cat([z_noisy, z_cond, feats], dim=1))
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.avg_pool2d(x, 2)
            x = block(x, emb)
            skips.append(x)
        for block, skip in zip(self.up, reversed(skips[:-1])):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skip], dim=1), emb)
        out = self.out(x)
        if self.cfg.parameterization == "eps":
            return out
        idx = t.round().long() - 1
        require(bool((idx >= 0).all()) and bool((idx < self.cfg.T).all()), f"t outside [1, {self.cfg.T}]")
        ab = self.alpha_bar[idx].to(out.dtype)[:, None, None, None]
        if self.cfg.parameterization == "skip":
            s2 = self.cfg.residual_std**2
            d2 = ab * s2 + 1 - ab
            n_res = z_noisy - ab.sqrt() * z_cond
            out = z_cond + (ab.sqrt() * s2 / d2) * n_res + (self.cfg.residual_std * (1 - ab).sqrt() / d2.sqrt()) * out
        return (z_noisy - ab.sqrt() * out) / (1 - ab).sqrt()


class LatentDecoder(nn.Module):
    """Upsampling decoder from a latent to full-resolution class logits.

    Each stage is 2x nearest upsampling, a 3x3 conv, group norm and LeakyReLU;
    a 1x1 conv gives the class logits. Convs pad by replication, so a constant
    latent decodes to spatially constant logits.
    """

    def __init__(self, latent_channels: int = 256, num_classes: int = 4, factor: int = LATENT_FACTOR, width: int = 64):
        super().__init__()
        stages = int(round(math.log2(factor)))
        require(2**stages == factor, f"decoder factor must be a power of two, got {factor}")
        self.num_classes = num_classes
        self.factor = factor
        layers: list[nn.Module] = []
        cin = latent_channels
        for i in range(stages):
            w = max(width >> i, min(width, 16))
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(cin, w, 3, padding=1, padding_mode="replicate"),
                nn.GroupNorm(_groups(w), w),
                nn.LeakyReLU(0.01),
            ]
            cin = w
        layers.append(nn.Conv2d(cin, num_classes, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(r).all():
            raise ContractError("latent contains non-finite values")
        return self.net(r)


@dataclass
class NetConfig:
    seg: SegNetConfig = field(default_factory=SegNetConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    denoiser_width: int = 32
    denoiser_levels: int = 2
    time_dim: int = 64
    decoder_width: int = 64
    T: int = 100
    parameterization: str = "skip"
    residual_std: float = 0.1


class Networks(nn.Module):
    """All trainable parts of the framework under one parameter namespace."""

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        self.seg = SegUNet(cfg.seg)
        self.bsem = SemanticEmbed(cfg.embed)
        self.denoiser = LatentDenoiser(
            DenoiserConfig(
                latent_channels=cfg.embed.out_channels,
                feature_channels=self.seg.feature_channels,
                width=cfg.denoiser_width,
                levels=cfg.denoiser_levels,
                time_dim=cfg.time_dim,
                T=cfg.T,
                parameterization=cfg.parameterization,
                residual_std=cfg.residual_std,
            )
        )
        self.decoder = LatentDecoder(cfg.embed.out_channels, cfg.seg.num_classes, cfg.embed.factor, cfg.decoder_width)

    @property
    def num_classes(self) -> int:
        return self.cfg.seg.num_classes

    def latent_size(self, h: int, w: int) -> tuple[int, int]:
        f = self.cfg.embed.factor
        return h // f, w // f

    def seg_forward(self, image):
        return self.seg(image, self.latent_size(*image.shape[-2:]))

    def bsem_forward(self, m, tau):
        return self.bsem(m, tau)

    def denoiser_forward(self, z_noisy, t, z_cond, feats):
        return self.denoiser(z_noisy, t, z_cond, feats)

    def decode_latent(self, r):
        return self.decoder(r)
