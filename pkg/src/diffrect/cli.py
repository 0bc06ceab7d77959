"""Command-line entry point.

Exit codes: 0 success, 1 contract violation (bad arguments, invalid data),
2 I/O failure (missing or unreadable files).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from diffrect import __version__, data, metrics
from diffrect.errors import ContractError
from diffrect.losses import LossWeights
from diffrect.metrics import GUIDANCE_MODES, GuidanceMode
from diffrect.trainer import (
    VARIANTS,
    TrainConfig,
    argmax_one_hot,
    evaluate,
    fit,
    load_checkpoint,
    make_splits,
    rectify,
    to_image_batch,
)

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; bad flags are contract violations here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONTRACT, f"{self.prog}: error: {message}\n")


class CsvFormatError(ContractError):
    pass


# -- synth ------------------------------------------------------------------------


def cmd_synth(a) -> int:
    ds = data.synth_generate(a.n, a.classes, a.size, a.seed)
    data.save_dataset(ds, a.out, seed=a.seed)
    print(f"wrote {len(ds)} samples to {a.out}")
    return EXIT_OK


# -- train ------------------------------------------------------------------------


def config_from_args(a) -> TrainConfig:
    weights = LossWeights(lambda1=a.lambda1, lambda2=a.lambda2, pseudo_threshold=a.threshold)
    return TrainConfig.for_variant(
        a.variant,
        iterations=a.iters,
        T=a.T,
        weights=weights,
        guidance=GuidanceMode(a.guidance, a.fixed_value),
        labeled_ratio=a.labeled_ratio,
        labeled_bs=a.labeled_bs,
        unlabeled_bs=a.unlabeled_bs,
        eval_every=a.eval_every,
        rect_every=a.rect_every,
        learning_rate=a.lr,
        seed=a.seed,
        split_seed=a.split_seed,
    )


def cmd_train(a) -> int:
    if not Path(a.data).is_dir():
        raise FileNotFoundError(f"dataset directory not found: {a.data}")
    cfg = config_from_args(a)
    if a.resume is not None and not Path(a.resume).is_file():
        raise FileNotFoundError(f"checkpoint not found: {a.resume}")
    print(json.dumps(cfg.to_dict(), sort_keys=True))
    fit(cfg, a.data, a.out, resume=a.resume)
    print(f"finished {cfg.iterations} iterations; outputs in {a.out}")
    return EXIT_OK


# -- eval -------------------------------------------------------------------------


def _load_ckpt(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _select(ds, cfg: TrainConfig, which: str):
    if which == "all":
        return ds
    lab, unl, val = make_splits(ds, cfg)
    return {"labeled": lab, "unlabeled": unl, "val": val}[which]


def cmd_eval(a) -> int:
    state, cfg, _ = _load_ckpt(a.ckpt)
    ds = _select(data.load_dataset(a.data), cfg, a.split)
    if ds and ds[0].mask.shape[-1] != state.num_classes:
        raise ContractError(f"dataset has {ds[0].mask.shape[-1]} classes, checkpoint expects {state.num_classes}")
    report, cases = evaluate(state.nets, ds)
    if a.out is not None:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_case_csv(out / "metrics.csv", cases)
    print("dice jaccard hd95 asd")
    print(" ".join(f"{v:.6f}" for v in report.as_dict().values()))
    return EXIT_OK


# -- rectify / sample -------------------------------------------------------------------


def _single_case(a, state):
    image = data.load_image_png(a.image)
    colors = state.colors
    gt = None
    if a.mask is not None:
        gt = metrics.one_hot(data.load_mask_png(a.mask, colors), state.num_classes)
        if gt.shape[:2] != image.shape:
            raise ContractError(f"{a.mask}: shape {gt.shape[:2]} does not match image {image.shape}")
    state.nets.eval()
    with torch.no_grad():
        logits, feats = state.nets.seg_forward(to_image_batch([image]))
    return image, gt, argmax_one_hot(logits), feats


def _labels(y: torch.Tensor) -> np.ndarray:
    return y[0].argmax(0).numpy()


def _fg_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(metrics.dice(pred, gt)[1:].mean())


def cmd_rectify(a) -> int:
    state, _, _ = _load_ckpt(a.ckpt)
    _, gt, y_w, feats = _single_case(a, state)
    gen = torch.Generator().manual_seed(a.seed)
    y_r = rectify(state.nets, y_w, feats, state.colors, state.sched, gen)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    data.save_mask_png(out / "y_w.png", _labels(y_w), state.colors)
    data.save_mask_png(out / "y_r.png", _labels(y_r), state.colors)
    if gt is not None:
        before = _fg_dice(metrics.one_hot(_labels(y_w), state.num_classes), gt)
        after = _fg_dice(metrics.one_hot(_labels(y_r), state.num_classes), gt)
        print(f"dice_before {before:.6f} dice_after {after:.6f}")
    print(f"wrote {out / 'y_w.png'} and {out / 'y_r.png'}")
    return EXIT_OK


def cmd_sample(a) -> int:
    """Decoded labels along the reverse trajectory, every ``--every`` steps."""
    if a.every < 1:
        raise ContractError(f"--every must be positive, got {a.every}")
    state, _, _ = _load_ckpt(a.ckpt)
    _, gt, y_w, feats = _single_case(a, state)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    T = state.sched.T
    width = len(str(T))
    rows = []

    def snap(t, y):
        if t % a.every == 0:
            lab = _labels(y)
            data.save_mask_png(out / f"step_{t:0{width}d}.png", lab, state.colors)
            d = _fg_dice(metrics.one_hot(lab, state.num_classes), gt) if gt is not None else ""
            rows.append((t, d))

    rectify(state.nets, y_w, feats, state.colors, state.sched, torch.Generator().manual_seed(a.seed), callback=snap)
    with open(out / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "dice"])
        w.writerows(rows)
    print(f"wrote {len(rows)} snapshots to {out}")
    return EXIT_OK


# -- plot ------------------------------------------------------------------------


def _read_csv(path: Path, numeric: set[str]) -> list[dict]:
    if not path.is_file():
        raise FileNotFoundError(f"missing {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for row in reader:
            line = reader.line_num
            if None in row or any(v is None for v in row.values()):
                raise CsvFormatError(f"{path}:{line}: wrong number of fields")
            try:
                rows.append({k: float(v) if k in numeric else v for k, v in row.items()})
            except ValueError:
                raise CsvFormatError(f"{path}:{line}: non-numeric value") from None
    missing = numeric - set(reader.fieldnames or [])
    if missing:
        raise CsvFormatError(f"{path}:1: missing columns {sorted(missing)}")
    return rows


def cmd_plot(a) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(a.run)
    losses = _read_csv(run / "losses.csv", {"iter", "seg_semi", "rect", "lat_semi", "lat_u", "lat_l", "total"})
    mets = _read_csv(run / "metrics.csv", {"iter"})
    out = Path(a.out) if a.out else run
    out.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the PNG bytes stable across reruns
    meta = {"Software": None}

    fig, ax = plt.subplots(figsize=(6, 4))
    it = [r["iter"] for r in losses]
    for key in ("total", "seg_semi", "rect", "lat_semi", "lat_u", "lat_l"):
        ax.plot(it, [r[key] for r in losses], label=key, lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-2)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "loss.png", dpi=100, metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    mean = [r for r in mets if r["class"] == "mean"]
    ax.plot([r["iter"] for r in mean], [float(r["dice"]) for r in mean], marker="o", label="mean")
    for cls in sorted({r["class"] for r in mets} - {"mean"}):
        rows = [r for r in mets if r["class"] == cls]
        ax.plot([r["iter"] for r in rows], [float(r["dice"]) for r in rows], lw=1, alpha=0.6, label=f"class {cls}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("Dice")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "dice.png", dpi=100, metadata=meta)
    plt.close(fig)
    print(f"wrote {out / 'loss.png'} and {out / 'dice.png'}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def _ratio(s: str) -> float:
    v = float(s)
    if not (0.0 < v <= 1.0) or math.isnan(v):
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {s}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffrect", description="Semi-supervised segmentation with latent label rectification.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic shape dataset")
    s.add_argument("--n", type=int, required=True, help="number of samples")
    s.add_argument("--classes", type=int, default=4, help="classes including background")
    s.add_argument("--size", type=int, default=64, help="image side length in pixels")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--variant", choices=sorted(VARIANTS), default="diffrect",
                   help="diffrect (full), lcc (no latent diffusion) or baseline (segmentation losses only)")
    t.add_argument("--labeled-ratio", type=_ratio, default=0.05)
    t.add_argument("--iters", type=int, default=2000)
    t.add_argument("--T", type=int, default=100, help="diffusion steps")
    t.add_argument("--guidance", choices=GUIDANCE_MODES, default="dice")
    t.add_argument("--fixed-value", type=float, default=0.5, help="guidance value for --guidance fixed")
    t.add_argument("--lambda1", type=float, default=1.0, help="weight of the unlabeled latent loss")
    t.add_argument("--lambda2", type=float, default=1.0, help="weight of the labeled latent loss")
    t.add_argument("--threshold", type=float, default=0.95, help="pseudo-label confidence threshold")
    t.add_argument("--labeled-bs", type=int, default=2)
    t.add_argument("--unlabeled-bs", type=int, default=2)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--eval-every", type=int, default=200)
    t.add_argument("--rect-every", type=int, default=1, help="run the rectification sampler every k iterations")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--split-seed", type=int, default=None, help="seed for the data split (default: --seed)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("all", "labeled", "unlabeled", "val"), default="all",
                   help="subset to score; splits are recomputed from the checkpoint config")
    e.add_argument("--out", default=None, help="directory for the per-case metrics.csv")
    e.set_defaults(func=cmd_eval)

    for name, fn, hlp in (
        ("rectify", cmd_rectify, "rectify the prediction for one image"),
        ("sample", cmd_sample, "dump decoded labels along the reverse diffusion"),
    ):
        r = sub.add_parser(name, help=hlp)
        r.add_argument("--ckpt", required=True)
        r.add_argument("--image", required=True, help="16-bit grayscale PNG")
        r.add_argument("--mask", default=None, help="optional ground-truth palette PNG")
        r.add_argument("--out", required=True, help="output directory")
        r.add_argument("--seed", type=int, default=0)
        if name == "sample":
            r.add_argument("--every", type=int, default=10, help="snapshot stride in steps")
        r.set_defaults(func=fn)

    pl = sub.add_parser("plot", help="plot loss and Dice curves of a run")
    pl.add_argument("--run", required=True, help="run directory with losses.csv and metrics.csv")
    pl.add_argument("--out", default=None, help="output directory (default: the run directory)")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (OSError, data.DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
