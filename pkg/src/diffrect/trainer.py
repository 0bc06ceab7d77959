"""Training loop: pseudo labels, label-context embedding, latent rectification, evaluation, checkpoints.

Randomness is split into independent streams so that switching the
rectification branch on or off never perturbs the segmentation side:

* ``data_rng``  - batch selection and image perturbations (numpy)
* ``guide_rng`` - random calibration guidance (numpy)
* ``diff_rng``  - diffusion timesteps and noise (torch)
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from diffrect import augment, data, metrics, scs
from diffrect.errors import require
from diffrect.losses import (
    LossBreakdown,
    LossWeights,
    latent_loss,
    rect_loss,
    semi_seg_loss,
    total_loss,
)
from diffrect.metrics import GuidanceMode
from diffrect.nets import EmbedConfig, NetConfig, Networks, SegNetConfig
from diffrect.schedule import NoiseSchedule, make_cosine_schedule, predict_z0, q_sample, sample_loop

logger = logging.getLogger(__name__)

VARIANTS = {
    "diffrect": dict(lcc=True, lfr=True, rect=True),
    "lcc": dict(lcc=True, lfr=False, rect=True),
    "baseline": dict(lcc=False, lfr=False, rect=False),
}

LOSS_FIELDS = ("iter",) + LossBreakdown.FIELDS
METRIC_FIELDS = ("iter", "class", "dice", "jaccard", "hd95", "asd")


@dataclass
class TrainConfig:
    iterations: int = 2000
    labeled_bs: int = 2
    unlabeled_bs: int = 2
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    # B_sem, denoiser and decoder: "adam" gives them their own optimizer, "sgd" shares the segmentation one
    rect_optimizer: str = "adam"
    rect_lr: float = 1e-3
    T: int = 100
    weights: LossWeights = field(default_factory=LossWeights)
    guidance: GuidanceMode = field(default_factory=GuidanceMode)
    lcc: bool = True
    lfr: bool = True
    rect: bool = True
    rect_every: int = 1
    latent_clip: float = 5.0
    eval_every: int = 200
    labeled_ratio: float = 0.05
    val_fraction: float = 0.2
    seed: int = 0
    split_seed: int | None = None  # None: split with ``seed``
    base_width: int = 16
    depth: int = 4
    embed_widths: tuple[int, ...] = (16, 32, 64, 256)
    denoiser_width: int = 32
    decoder_width: int = 64
    parameterization: str = "skip"
    residual_std: float = 0.1
    perturb: augment.PerturbSpec = field(default_factory=augment.PerturbSpec)

    def __post_init__(self):
        for name in ("iterations", "labeled_bs", "unlabeled_bs", "T", "eval_every", "rect_every"):
            v = getattr(self, name)
            require(isinstance(v, int) and v > 0, f"{name} must be a positive integer, got {v!r}")
        require(0.0 < self.labeled_ratio <= 1.0, f"labeled ratio must be in (0, 1], got {self.labeled_ratio}")
        require(0.0 <= self.val_fraction < 1.0, "val_fraction must be in [0, 1)")
        require(not self.lfr or self.lcc, "latent rectification needs the label-context embedding")
        require(self.rect_optimizer in ("adam", "sgd"), f"unknown rect_optimizer {self.rect_optimizer!r}")

    @classmethod
    def for_variant(cls, variant: str, **kw) -> "TrainConfig":
        require(variant in VARIANTS, f"unknown variant {variant!r}")
        return cls(**{**VARIANTS[variant], **kw})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["guidance"] = GuidanceMode(**d.get("guidance", {}))
        p = dict(d.get("perturb", {}))
        p = {k: tuple(v) if isinstance(v, list) else v for k, v in p.items()}
        d["perturb"] = augment.PerturbSpec(**p)
        d["embed_widths"] = tuple(d.get("embed_widths", (16, 32, 64, 256)))
        return cls(**d)

    def net_config(self, num_classes: int) -> NetConfig:
        return NetConfig(
            seg=SegNetConfig(1, num_classes, self.base_width, self.depth),
            embed=EmbedConfig(widths=tuple(self.embed_widths)),
            denoiser_width=self.denoiser_width,
            decoder_width=self.decoder_width,
            T=self.T,
            parameterization=self.parameterization,
            residual_std=self.residual_std,
        )


@dataclass
class TrainState:
    nets: Networks
    optimizer: torch.optim.Optimizer
    rect_optimizer: torch.optim.Optimizer | None
    sched: NoiseSchedule
    colors: np.ndarray
    iteration: int = 0
    data_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    guide_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    diff_rng: torch.Generator = field(default_factory=torch.Generator)

    @property
    def num_classes(self) -> int:
        return self.nets.num_classes


def init_state(cfg: TrainConfig, num_classes: int) -> TrainState:
    torch.manual_seed(cfg.seed)
    nets = Networks(cfg.net_config(num_classes))
    rest = [p for m in (nets.bsem, nets.denoiser, nets.decoder) for p in m.parameters()]
    if cfg.rect_optimizer == "adam":
        seg_params, rect_opt = list(nets.seg.parameters()), torch.optim.Adam(rest, lr=cfg.rect_lr)
    else:
        seg_params, rect_opt = list(nets.parameters()), None
    opt = torch.optim.SGD(seg_params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    seqs = np.random.SeedSequence(cfg.seed).spawn(2)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    return TrainState(
        nets=nets,
        optimizer=opt,
        rect_optimizer=rect_opt,
        sched=make_cosine_schedule(cfg.T),
        colors=scs.build_color_set(num_classes),
        data_rng=np.random.default_rng(seqs[0]),
        guide_rng=np.random.default_rng(seqs[1]),
        diff_rng=gen,
    )


# -- tensor helpers -------------------------------------------------------------


def to_image_batch(images) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(im, dtype=np.float32) for im in images]))[:, None]


def to_mask_batch(masks) -> torch.Tensor:
    """(H, W, C) one-hot arrays -> (N, C, H, W) float tensor."""
    return torch.from_numpy(np.stack([np.asarray(m, dtype=np.float32) for m in masks])).permute(0, 3, 1, 2).contiguous()


def argmax_one_hot(logits: torch.Tensor) -> torch.Tensor:
    return F.one_hot(logits.argmax(1), logits.shape[1]).permute(0, 3, 1, 2).to(logits.dtype)


def semantic_input(y: torch.Tensor, colors: np.ndarray) -> torch.Tensor:
    """One-hot (N, C, H, W) -> color-coded (N, 3, H, W) scaled to [-1, 1]."""
    table = torch.as_tensor(np.asarray(colors), dtype=y.dtype, device=y.device)
    m = torch.einsum("nchw,cd->ndhw", y, table)
    return m / 127.5 - 1.0


def _hwc(y: torch.Tensor) -> np.ndarray:
    return y.detach().permute(1, 2, 0).cpu().numpy().astype(np.uint8)


def guidance_batch(y_hi: torch.Tensor, y_lo: torch.Tensor, mode: GuidanceMode, rng) -> torch.Tensor:
    vals = [metrics.calibration_guidance(_hwc(a), _hwc(b), mode, rng) for a, b in zip(y_hi, y_lo)]
    return torch.tensor(vals, dtype=y_hi.dtype)


# -- per-iteration operations ------------------------------------------------------


class PseudoLabels(NamedTuple):
    y_w: torch.Tensor
    y_s: torch.Tensor
    weak_probs: torch.Tensor
    weak_logits: torch.Tensor
    strong_logits: torch.Tensor
    feats: torch.Tensor


def make_views(images, rng: np.random.Generator, spec: augment.PerturbSpec = augment.PerturbSpec()):
    """Weak view (flip/rotate) and strong view (photometric change of the same weak view)."""
    weak, strong = [], []
    for im in images:
        w, _ = augment.weak_perturb(im, None, rng, spec)
        weak.append(w)
        strong.append(augment.strong_perturb(w, rng, spec))
    return to_image_batch(weak), to_image_batch(strong)


def pseudo_labels(nets: Networks, x_weak: torch.Tensor, x_strong: torch.Tensor) -> PseudoLabels:
    """Segment both views; y_w / y_s are the argmax one-hot masks."""
    weak_logits, feats = nets.seg_forward(x_weak)
    strong_logits, _ = nets.seg_forward(x_strong)
    weak_probs = weak_logits.detach().softmax(1)
    return PseudoLabels(
        y_w=argmax_one_hot(weak_logits.detach()),
        y_s=argmax_one_hot(strong_logits.detach()),
        weak_probs=weak_probs,
        weak_logits=weak_logits,
        strong_logits=strong_logits,
        feats=feats,
    )


def lcc_embed(nets: Networks, y_a, y_b, colors, mode: GuidanceMode, rng):
    """Embed two masks of different quality with a shared guidance value per item.

    Returns (z_a, z_b, tau). The unlabeled call passes (y_s, y_w); the labeled call (y_w, y_l).
    """
    tau = guidance_batch(y_a, y_b, mode, rng)
    n = y_a.shape[0]
    m = semantic_input(torch.cat([y_a, y_b]), colors)
    z = nets.bsem_forward(m, torch.cat([tau, tau]))
    return z[:n], z[n:], tau


def lcc_embed_unlabeled(nets, y_s, y_w, colors, mode, rng):
    return lcc_embed(nets, y_s, y_w, colors, mode, rng)


def lcc_embed_labeled(nets, y_w, y_l, colors, mode, rng):
    return lcc_embed(nets, y_w, y_l, colors, mode, rng)


def _denoise(nets, z_clean, z_cond, feats, t, eta, sched, clip):
    z_t = q_sample(z_clean, t, eta, sched)
    r = predict_z0(z_t, t, nets.denoiser_forward(z_t, t, z_cond, feats), sched)
    return r.clamp(-clip, clip) if clip else r


def lfr_train_losses(nets, z_s, z_w, z_wl, z_l, feats_u, feats_l, sched, gen, clip=5.0, t_u=None, t_l=None):
    """Strong-to-weak and weak-to-ground-truth latent reconstruction losses.

    Returns (lat_u, lat_l, r_w). ``z_wl`` is the weak-label latent of the labeled batch.
    Timesteps are drawn uniformly from [1, T] per item unless given.

    The latent losses train the denoiser only. Gradient through the target lets B_sem
    shrink every latent towards a constant, and gradient through the condition lets it
    map strong and weak labels to the same latent; both erase the detail the decoder needs.
    """
    if t_u is None:
        t_u = torch.randint(1, sched.T + 1, (z_w.shape[0],), generator=gen)
    if t_l is None:
        t_l = torch.randint(1, sched.T + 1, (z_l.shape[0],), generator=gen)
    eta_u = torch.randn(z_w.shape, generator=gen, dtype=z_w.dtype)
    eta_l = torch.randn(z_l.shape, generator=gen, dtype=z_l.dtype)
    z_s, z_w, z_wl, z_l = z_s.detach(), z_w.detach(), z_wl.detach(), z_l.detach()
    r_w = _denoise(nets, z_w, z_s, feats_u, t_u, eta_u, sched, clip)
    r_l = _denoise(nets, z_l, z_wl, feats_l, t_l, eta_l, sched, clip)
    return latent_loss(z_w, r_w), latent_loss(z_l, r_l), r_w


def decode_frozen(nets: Networks, r: torch.Tensor) -> torch.Tensor:
    """Decode with the decoder weights held constant.

    The decoder learns only from labeled pairs; pseudo-label losses on decoded
    latents train whatever produced the latent, not the readout.
    """
    params = {k: v.detach() for k, v in nets.decoder.named_parameters()}
    return torch.func.functional_call(nets.decoder, params, (r,))


class _eval_mode:
    """Temporarily switch modules to eval mode."""

    def __init__(self, *modules):
        self.modules = modules

    def __enter__(self):
        self.prev = [m.training for m in self.modules]
        for m in self.modules:
            m.eval()

    def __exit__(self, *exc):
        for m, p in zip(self.modules, self.prev):
            m.train(p)


@torch.no_grad()
def rectify(
    nets: Networks,
    y_w,
    feats,
    colors,
    sched: NoiseSchedule,
    gen: torch.Generator,
    use_diffusion: bool = True,
    callback=None,
):
    """Rectified one-hot label from the weak pseudo label.

    The weak label is embedded with guidance 1.0; with diffusion, a latent is
    sampled from noise conditioned on that embedding and the image features,
    then decoded. Without diffusion the embedding is decoded directly.
    ``callback(t, y)`` receives the decoded one-hot label after every reverse step.
    """
    with _eval_mode(nets.bsem, nets.denoiser, nets.decoder):
        z_w = nets.bsem_forward(semantic_input(y_w, colors), 1.0)
        if use_diffusion:
            feats = None if feats is None else feats.detach()
            hook = None
            if callback is not None:
                hook = lambda t, z: callback(t, argmax_one_hot(nets.decode_latent(z)))  # noqa: E731
            r = sample_loop(lambda z, t, c, a: nets.denoiser_forward(z, t, c, a), z_w, feats, sched, gen, hook)
        else:
            r = z_w
        return argmax_one_hot(nets.decode_latent(r))


def train_iteration(state: TrainState, labeled: list, unlabeled: list, cfg: TrainConfig) -> LossBreakdown:
    require(len(labeled) > 0 and len(unlabeled) > 0, "both batches must be non-empty")
    nets, w = state.nets, cfg.weights
    nets.train()
    decay = (1.0 - state.iteration / cfg.iterations) ** 0.9
    for g in state.optimizer.param_groups:
        g["lr"] = cfg.learning_rate * decay
    if state.rect_optimizer is not None:
        for g in state.rect_optimizer.param_groups:
            g["lr"] = cfg.rect_lr * decay

    # labeled items: the same weak geometry on image and mask
    xs, ys = [], []
    for s in labeled:
        im, mk = augment.weak_perturb(s.image, s.mask, state.data_rng, cfg.perturb)
        xs.append(im)
        ys.append(mk)
    x_l, y_l = to_image_batch(xs), to_mask_batch(ys)
    x_w, x_s = make_views([s.image for s in unlabeled], state.data_rng, cfg.perturb)

    logits_l, feats_l = nets.seg_forward(x_l)
    pl = pseudo_labels(nets, x_w, x_s)
    seg_semi = semi_seg_loss(logits_l, y_l, pl.strong_logits, pl.weak_probs, w)

    zero = torch.zeros(())
    rect = lat_semi = lat_u = lat_l = zero
    if cfg.lcc:
        y_wl = argmax_one_hot(logits_l.detach())
        z_s, z_w, _ = lcc_embed_unlabeled(nets, pl.y_s, pl.y_w, state.colors, cfg.guidance, state.guide_rng)
        z_wl, z_l, _ = lcc_embed_labeled(nets, y_wl, y_l, state.colors, cfg.guidance, state.guide_rng)
        if cfg.lfr:
            lat_u, lat_l, r_w = lfr_train_losses(
                nets, z_s, z_w, z_wl, z_l, pl.feats.detach(), feats_l.detach(), state.sched, state.diff_rng, cfg.latent_clip
            )
        else:
            r_w = z_s
        lat_semi = semi_seg_loss(nets.decode_latent(z_l), y_l, decode_frozen(nets, r_w), pl.weak_probs, w)
        if cfg.rect and state.iteration % cfg.rect_every == 0:
            y_r = rectify(nets, pl.y_w, pl.feats, state.colors, state.sched, state.diff_rng, use_diffusion=cfg.lfr)
            rect = rect_loss(pl.weak_logits, y_r)

    parts = total_loss(seg_semi, rect, lat_semi, lat_u, lat_l, w)
    state.nets.zero_grad(set_to_none=True)
    parts.total.backward()
    if cfg.grad_clip:
        # clipped per group, so the rectification branch never rescales the segmentation update
        torch.nn.utils.clip_grad_norm_(nets.seg.parameters(), cfg.grad_clip)
        rest = [p for m in (nets.bsem, nets.denoiser, nets.decoder) for p in m.parameters()]
        torch.nn.utils.clip_grad_norm_(rest, cfg.grad_clip)
    state.optimizer.step()
    if state.rect_optimizer is not None:
        state.rect_optimizer.step()
    state.iteration += 1
    return LossBreakdown(**parts.as_floats())


# -- evaluation -------------------------------------------------------------------


@torch.no_grad()
def predict(nets: Networks, image) -> np.ndarray:
    """Inference path: segmentation network only. Returns an (H, W, C) one-hot mask."""
    with _eval_mode(nets.seg):
        logits, _ = nets.seg(to_image_batch([image]))
    return _hwc(argmax_one_hot(logits)[0])


def evaluate(nets: Networks, ds: list) -> tuple[metrics.MetricsReport, list]:
    """Segment each sample (no diffusion, no embedding) and score against its mask."""
    require(len(ds) > 0, "cannot evaluate an empty dataset")
    cases = [(s.id, metrics.case_metrics(predict(nets, s.image), s.mask)) for s in ds]
    return metrics.summarize([rows for _, rows in cases]), cases


# -- checkpoints ----------------------------------------------------------------------


def _np_rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_np_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, extra: dict | None = None) -> None:
    payload = {
        "nets": state.nets.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "rect_optimizer": None if state.rect_optimizer is None else state.rect_optimizer.state_dict(),
        "iteration": state.iteration,
        "num_classes": state.num_classes,
        "config": json.dumps(cfg.to_dict()),
        "data_rng": json.dumps(_np_rng_state(state.data_rng)),
        "guide_rng": json.dumps(_np_rng_state(state.guide_rng)),
        "diff_rng": state.diff_rng.get_state(),
        "extra": json.dumps(extra or {}),
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[TrainState, TrainConfig, dict]:
    path = Path(path)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg = TrainConfig.from_dict(json.loads(payload["config"]))
    state = init_state(cfg, int(payload["num_classes"]))
    state.nets.load_state_dict(payload["nets"])
    state.optimizer.load_state_dict(payload["optimizer"])
    if state.rect_optimizer is not None:
        state.rect_optimizer.load_state_dict(payload["rect_optimizer"])
    state.iteration = int(payload["iteration"])
    state.data_rng = _restore_np_rng(json.loads(payload["data_rng"]))
    state.guide_rng = _restore_np_rng(json.loads(payload["guide_rng"]))
    state.diff_rng.set_state(payload["diff_rng"])
    return state, cfg, json.loads(payload["extra"])


# -- the full loop ---------------------------------------------------------------------


def make_splits(ds: list, cfg: TrainConfig):
    """Hold out a validation set, then split the rest into labeled and unlabeled pools."""
    seed = cfg.seed if cfg.split_seed is None else cfg.split_seed
    n_val = int(round(cfg.val_fraction * len(ds)))
    require(len(ds) - n_val >= 2, "dataset too small for a train split")
    order = np.random.default_rng(seed).permutation(len(ds))
    val = [ds[i] for i in sorted(order[:n_val].tolist())]
    train = [ds[i] for i in sorted(order[n_val:].tolist())]
    lab, unl = data.split_labeled(train, data.SplitSpec(cfg.labeled_ratio, seed))
    if not unl:
        unl = lab
    return lab, unl, val


def draw_batch(pool: list, k: int, rng: np.random.Generator) -> list:
    return [pool[i] for i in rng.integers(len(pool), size=k)]


def _truncate_csv(path: Path, upto: int) -> None:
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= upto]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)


def fit(
    cfg: TrainConfig, data_dir, out_dir, resume=None, ds: list | None = None, max_steps: int | None = None
) -> TrainState:
    """Train, evaluating every ``eval_every`` iterations; writes checkpoints and CSV logs to ``out_dir``.

    ``max_steps`` stops this call early (after a checkpoint), leaving the run resumable.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if ds is None:
        ds = data.load_dataset(data_dir)
    lab, unl, val = make_splits(ds, cfg)
    num_classes = ds[0].mask.shape[-1]

    best = -math.inf
    if resume is not None:
        state, saved_cfg, extra = load_checkpoint(resume)
        require(saved_cfg.to_dict() == cfg.to_dict(), "resume config differs from the checkpoint config")
        best = extra.get("best_dice", -math.inf)
        _truncate_csv(out / "losses.csv", state.iteration)
        _truncate_csv(out / "metrics.csv", state.iteration)
    else:
        state = init_state(cfg, num_classes)
        for name, fields_ in (("losses.csv", LOSS_FIELDS), ("metrics.csv", METRIC_FIELDS)):
            with open(out / name, "w", newline="") as fh:
                csv.writer(fh).writerow(fields_)
    (out / "config.json").write_text(
        json.dumps(
            {
                "config": cfg.to_dict(),
                "data_dir": str(data_dir) if data_dir is not None else None,
                "split": {"labeled": [s.id for s in lab], "unlabeled": [s.id for s in unl], "val": [s.id for s in val]},
                "colors": state.colors.tolist(),
            },
            indent=2,
        )
        + "\n"
    )
    eval_set = val or lab

    with open(out / "losses.csv", "a", newline="") as lf, open(out / "metrics.csv", "a", newline="") as mf:
        lw, mw = csv.writer(lf), csv.writer(mf)
        steps = 0
        while state.iteration < cfg.iterations and (max_steps is None or steps < max_steps):
            steps += 1
            lb = draw_batch(lab, cfg.labeled_bs, state.data_rng)
            ub = draw_batch(unl, cfg.unlabeled_bs, state.data_rng)
            parts = train_iteration(state, lb, ub, cfg).as_floats()
            lw.writerow([state.iteration] + [repr(parts[k]) for k in LossBreakdown.FIELDS])
            if state.iteration % cfg.eval_every == 0 or state.iteration == cfg.iterations:
                lf.flush()
                report, _ = evaluate(state.nets, eval_set)
                mw.writerow([state.iteration, "mean", *map(repr, report.as_dict().values())])
                for c in report.per_class:
                    mw.writerow([state.iteration, c.cls, repr(c.dice), repr(c.jaccard), repr(c.hd95), repr(c.asd)])
                mf.flush()
                logger.info("iter %d  loss %.4f  dice %.4f", state.iteration, parts["total"], report.dice_mean)
                if report.dice_mean > best:
                    best = report.dice_mean
                    save_checkpoint(out / "best.ckpt", state, cfg, {"best_dice": best})
                save_checkpoint(out / "last.ckpt", state, cfg, {"best_dice": best})
        if state.iteration < cfg.iterations:
            save_checkpoint(out / "last.ckpt", state, cfg, {"best_dice": best})
    return state
