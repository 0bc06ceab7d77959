import itertools
import math

import numpy as np
import pytest
import torch

import oracles
from diffrect import ContractError
from diffrect.nets import (
    EmbedConfig,
    LatentDecoder,
    NetConfig,
    Networks,
    SegNetConfig,
    embed_sinusoidal,
)


def default_nets(seed=0):
    torch.manual_seed(seed)
    return Networks().eval()


def tiny_nets(seed=0):
    """8x8 inputs, C=2, width 4; latent is 4x4 and the denoiser bottleneck 2x2."""
    torch.manual_seed(seed)
    cfg = NetConfig(
        seg=SegNetConfig(1, 2, base_width=4, depth=2),
        embed=EmbedConfig(widths=(4,), guidance_dim=4),
        denoiser_width=4,
        denoiser_levels=1,
        time_dim=4,
    )
    return Networks(cfg).double()


# -- embeddings ----------------------------------------------------------------


def test_embed_at_zero():
    e = embed_sinusoidal(0.0, 16)
    assert torch.equal(e[0::2], torch.zeros(8))
    assert torch.equal(e[1::2], torch.ones(8))


def test_embed_bounded_and_injective_on_timesteps():
    e = embed_sinusoidal(torch.arange(1, 1001), 8)
    assert e.shape == (1000, 8)
    assert e.abs().max() <= 1.0
    d = torch.cdist(e.double(), e.double())
    d.fill_diagonal_(1.0)
    assert d.min() > 0


def test_embed_odd_dim():
    with pytest.raises(ContractError):
        embed_sinusoidal(1.0, 7)


def test_embed_batch_matches_scalar():
    xs = torch.tensor([0.3, 5.0, 77.0])
    batch = embed_sinusoidal(xs, 12)
    for i, x in enumerate(xs.tolist()):
        torch.testing.assert_close(batch[i], embed_sinusoidal(x, 12))


# -- shapes ------------------------------------------------------------------


def test_seg_shapes():
    nets = default_nets()
    logits, feats = nets.seg_forward(torch.zeros(2, 1, 64, 64))
    assert logits.shape == (2, 4, 64, 64)
    assert feats.shape == (2, nets.seg.feature_channels, 4, 4)
    assert torch.isfinite(logits).all()


def test_seg_deterministic_in_eval():
    nets = default_nets()
    x = torch.rand(1, 1, 64, 64)
    assert torch.equal(nets.seg_forward(x)[0], nets.seg_forward(x.clone())[0])


def test_seg_rejects_non_finite():
    nets = default_nets()
    x = torch.zeros(1, 1, 64, 64)
    x[0, 0, 3, 3] = float("nan")
    with pytest.raises(ContractError):
        nets.seg_forward(x)


def test_bsem_shape_and_guidance_live():
    nets = default_nets()
    m = torch.rand(1, 3, 64, 64) * 2 - 1
    z1 = nets.bsem_forward(m, 1.0)
    assert z1.shape == (1, 256, 4, 4)
    assert not torch.allclose(z1, nets.bsem_forward(m, 0.3))


def test_bsem_identical_rows():
    nets = default_nets()
    m = (torch.rand(1, 3, 64, 64) * 2 - 1).expand(2, -1, -1, -1)
    z = nets.bsem_forward(m, 0.5)
    assert torch.equal(z[0], z[1])


def test_bsem_rejects_indivisible():
    nets = default_nets()
    with pytest.raises(ContractError):
        nets.bsem_forward(torch.zeros(1, 3, 40, 40), 1.0)
    with pytest.raises(ContractError):
        nets.bsem_forward(torch.zeros(1, 1, 64, 64), 1.0)


def test_denoiser_shape_and_conditioning_live():
    nets = default_nets()
    z = torch.randn(1, 256, 4, 4)
    c = torch.randn(1, 256, 4, 4)
    f = torch.randn(1, nets.seg.feature_channels, 4, 4)
    out = nets.denoiser_forward(z, 5, c, f)
    assert out.shape == z.shape
    assert not torch.allclose(out, nets.denoiser_forward(z, 60, c, f))
    assert not torch.allclose(out, nets.denoiser_forward(z, 5, torch.randn_like(c), f))


def test_denoiser_shape_mismatch():
    nets = default_nets()
    z = torch.randn(1, 256, 4, 4)
    with pytest.raises(ContractError):
        nets.denoiser_forward(z, 1, torch.randn(1, 256, 8, 8), None)
    with pytest.raises(ContractError):
        nets.denoiser_forward(z, 1, z, torch.randn(1, 3, 4, 4))


def test_decoder_shape_and_constant_latent():
    torch.manual_seed(0)
    dec = LatentDecoder(256, 4)
    out = dec(torch.zeros(1, 256, 4, 4))
    assert out.shape == (1, 4, 64, 64)
    assert torch.equal(out, out[:, :, :1, :1].expand_as(out))
    # replicate padding keeps any constant latent constant, borders included
    const = dec(torch.randn(1, 256, 1, 1).expand(1, 256, 4, 4))
    torch.testing.assert_close(const, const[:, :, :1, :1].expand_as(const), atol=1e-6, rtol=0)
    with pytest.raises(ContractError):
        LatentDecoder(256, 4, factor=12)
    with pytest.raises(ContractError):
        dec(torch.full((1, 256, 4, 4), float("inf")))


# -- batch equivariance and purity -------------------------------------------------


def test_batch_equivariance():
    # float64: the clean-latent to noise conversion at small t magnifies float32 summation-order noise
    nets = default_nets().double()
    g = torch.Generator().manual_seed(1)
    kw = dict(generator=g, dtype=torch.float64)
    x = torch.rand(3, 1, 64, 64, **kw)
    m = torch.rand(3, 3, 64, 64, **kw) * 2 - 1
    z = torch.randn(3, 256, 4, 4, **kw)
    c = torch.randn(3, 256, 4, 4, **kw)
    with torch.no_grad():
        logits, feats = nets.seg_forward(x)
        lat = nets.bsem_forward(m, torch.tensor([0.2, 0.5, 0.9]))
        eps = nets.denoiser_forward(z, torch.tensor([3, 40, 99]), c, feats)
        for i, tau, t in zip(range(3), (0.2, 0.5, 0.9), (3, 40, 99)):
            li, fi = nets.seg_forward(x[i : i + 1])
            torch.testing.assert_close(li[0], logits[i], atol=1e-5, rtol=0)
            torch.testing.assert_close(fi[0], feats[i], atol=1e-5, rtol=0)
            torch.testing.assert_close(nets.bsem_forward(m[i : i + 1], tau)[0], lat[i], atol=1e-5, rtol=0)
            e = nets.denoiser_forward(z[i : i + 1], t, c[i : i + 1], feats[i : i + 1])
            torch.testing.assert_close(e[0], eps[i], atol=1e-5, rtol=0)


def test_clean_latent_parameterization_round_trips():
    from diffrect.schedule import make_cosine_schedule, predict_z0, q_sample

    nets = default_nets().double()
    sched = make_cosine_schedule(100)
    z0 = torch.randn(2, 256, 4, 4, dtype=torch.float64)
    c = torch.randn_like(z0)
    feats = torch.zeros(2, nets.seg.feature_channels, 4, 4, dtype=torch.float64)
    nets.denoiser.cfg.parameterization = "eps"
    for t in (1, 50, 100):
        zt = q_sample(z0, t, torch.randn_like(z0), sched)
        raw = nets.denoiser_forward(zt, t, c, feats)
        nets.denoiser.cfg.parameterization = "x0"
        eps = nets.denoiser_forward(zt, t, c, feats)
        nets.denoiser.cfg.parameterization = "eps"
        torch.testing.assert_close(predict_z0(zt, t, eps, sched), raw, atol=1e-9, rtol=0)
    nets.denoiser.cfg.parameterization = "x0"


def test_skip_parameterization_coefficients():
    from diffrect.schedule import make_cosine_schedule, predict_z0

    nets = default_nets().double()
    den = nets.denoiser
    sched = make_cosine_schedule(100)
    s = den.cfg.residual_std
    z_t = torch.randn(2, 256, 4, 4, dtype=torch.float64)
    c = torch.randn_like(z_t)
    feats = torch.randn(2, nets.seg.feature_channels, 4, 4, dtype=torch.float64)
    for t in (1, 30, 100):
        den.cfg.parameterization = "x0"
        ab = sched.alpha_bar[t - 1]
        raw = predict_z0(z_t, t, nets.denoiser_forward(z_t, t, c, feats), sched)  # the bare U-Net output F
        den.cfg.parameterization = "skip"
        got = predict_z0(z_t, t, nets.denoiser_forward(z_t, t, c, feats), sched)
        d2 = ab * s * s + 1 - ab
        want = c + math.sqrt(ab) * s * s / d2 * (z_t - math.sqrt(ab) * c) + s * math.sqrt((1 - ab) / d2) * raw
        torch.testing.assert_close(got, want, atol=1e-9, rtol=0)


def test_skip_parameterization_limits():
    from diffrect.schedule import make_cosine_schedule, predict_z0

    nets = default_nets().double()
    with torch.no_grad():
        nets.denoiser.out.weight.zero_()
        nets.denoiser.out.bias.zero_()
    sched = make_cosine_schedule(100)
    c = torch.randn(1, 256, 4, 4, dtype=torch.float64)
    feats = torch.zeros(1, nets.seg.feature_channels, 4, 4, dtype=torch.float64)
    # with F = 0: a noisy input sitting exactly on the scaled condition decodes to the condition
    for t in (1, 50, 100):
        z_t = math.sqrt(sched.alpha_bar[t - 1]) * c
        torch.testing.assert_close(predict_z0(z_t, t, nets.denoiser_forward(z_t, t, c, feats), sched), c)
    # at t = T the estimate ignores the noisy input
    a, b = torch.randn_like(c), torch.randn_like(c)
    ra = predict_z0(a, 100, nets.denoiser_forward(a, 100, c, feats), sched)
    rb = predict_z0(b, 100, nets.denoiser_forward(b, 100, c, feats), sched)
    assert (ra - rb).abs().max() < 1e-3 * (a - b).abs().max()


def test_no_input_mutation():
    nets = default_nets()
    x = torch.rand(1, 1, 64, 64)
    m = torch.rand(1, 3, 64, 64)
    z = torch.randn(1, 256, 4, 4)
    copies = [v.clone() for v in (x, m, z)]
    _, feats = nets.seg_forward(x)
    nets.bsem_forward(m, 1.0)
    nets.denoiser_forward(z, 3, z, feats)
    nets.decode_latent(z)
    for a, b in zip((x, m, z), copies):
        assert torch.equal(a, b)


# -- gradients -----------------------------------------------------------------


def end_to_end_loss(nets, x, m, eta):
    logits, feats = nets.seg_forward(x)
    z = nets.bsem_forward(m, 0.7)
    zn = 0.8 * z + 0.6 * eta
    eps = nets.denoiser_forward(zn, 40, z, feats)
    r = nets.decode_latent(zn - eps)
    return logits.tanh().pow(2).mean() + r.sin().mean() + eps.pow(2).mean()


def test_end_to_end_gradient_check():
    nets = tiny_nets()
    nets.train()
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 1, 8, 8, generator=g, dtype=torch.float64)
    m = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    eta = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64)

    def f():
        with torch.no_grad():
            return end_to_end_loss(nets, x, m, eta)

    nets.zero_grad()
    end_to_end_loss(nets, x, m, eta).backward()
    params = [(n, p) for n, p in nets.named_parameters()]
    flat = [(n, p, i) for n, p in params for i in range(p.numel())]
    rng = np.random.default_rng(0)
    pick = rng.choice(len(flat), size=150, replace=False)
    # every module must receive gradient
    assert {n.split(".")[0] for n, p in params if p.grad is not None and p.grad.abs().sum() > 0} == {
        "seg",
        "bsem",
        "denoiser",
        "decoder",
    }
    bad = []
    for k in pick:
        name, p, i = flat[k]
        num = oracles.central_diff(f, p, i, 1e-6)
        ana = p.grad.view(-1)[i].item()
        if oracles.rel_err(num, ana, floor=1e-6) >= 1e-3:
            bad.append((name, i, num, ana))
    assert not bad, bad[:5]


def test_train_and_eval_same_shapes():
    nets = tiny_nets()
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    shapes = []
    for mode in (True, False):
        nets.train(mode)
        logits, feats = nets.seg_forward(x)
        shapes.append((logits.shape, feats.shape))
    assert shapes[0] == shapes[1] == ((1, 2, 8, 8), (1, 12, 4, 4))


@pytest.mark.parametrize("h,w", list(itertools.product([64, 96], [64, 128])))
def test_latent_size_arithmetic(h, w):
    nets = default_nets()
    assert nets.latent_size(h, w) == (h // 16, w // 16)
