import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from diffrect import ContractError
from diffrect.losses import (
    DICE_SMOOTH,
    LossBreakdown,
    LossWeights,
    cross_entropy,
    latent_loss,
    pseudo_label_loss,
    rect_loss,
    semi_seg_loss,
    soft_dice_loss,
    total_loss,
)


def one_hot_nchw(labels, c):
    return torch.nn.functional.one_hot(torch.as_tensor(labels), c).permute(0, 3, 1, 2).double()


def rand_case(seed, n=2, c=3, size=8):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(n, c, size, size, generator=g, dtype=torch.float64)
    labels = torch.randint(0, c, (n, size, size), generator=g)
    return logits, one_hot_nchw(labels, c)


def check_grad(f, x, n=100, h=1e-3, seed=0):
    x = x.clone().requires_grad_(True)
    f(x).backward()
    ana = x.grad.view(-1).clone()
    idx = np.random.default_rng(seed).choice(x.numel(), size=min(n, x.numel()), replace=False)
    with torch.no_grad():
        errs = [oracles.rel_err(oracles.central_diff(lambda: f(x), x, int(i), h), ana[i].item(), 1e-6) for i in idx]
    return max(errs)


# -- soft dice --------------------------------------------------------------


def test_dice_saturates_on_peaked_logits():
    _, y = rand_case(0)
    assert soft_dice_loss(20 * (2 * y - 1), y) < 0.01


def test_dice_uniform_closed_form():
    labels = torch.zeros(1, 4, 4, dtype=torch.long)
    labels[:, :2] = 1
    y = one_hot_nchw(labels, 2)
    got = soft_dice_loss(torch.zeros_like(y), y).item()
    n, g = 16, 8
    per = (2 * 0.5 * g + DICE_SMOOTH) / (0.5 * n + g + DICE_SMOOTH)
    assert got == pytest.approx(1 - per, abs=1e-12)
    assert got == pytest.approx(0.5, abs=1e-6)


def test_dice_shape_mismatch():
    with pytest.raises(ContractError):
        soft_dice_loss(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 4, 4))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_losses_bounded_and_finite(seed):
    logits, y = rand_case(seed)
    d = soft_dice_loss(logits, y).item()
    assert 0.0 <= d <= 1.0
    r = rect_loss(logits, y).item()
    assert math.isfinite(r) and r >= 0


# -- rect ----------------------------------------------------------------


def test_rect_uniform_ce_is_ln2():
    labels = torch.randint(0, 2, (1, 8, 8), generator=torch.Generator().manual_seed(2))
    y = one_hot_nchw(labels, 2)
    assert cross_entropy(torch.zeros_like(y), y).item() == pytest.approx(math.log(2), abs=1e-12)


def test_rect_peaked_is_near_zero():
    _, y = rand_case(3)
    assert rect_loss(30 * (2 * y - 1), y) < 0.01


def test_rect_matches_independent_recomputation():
    logits, y = rand_case(4, n=1)
    p = logits.softmax(1)
    ce = -(y * p.log()).sum(1).mean()
    inter = (p * y).sum((0, 2, 3))
    dice = 1 - ((2 * inter + DICE_SMOOTH) / (p.sum((0, 2, 3)) + y.sum((0, 2, 3)) + DICE_SMOOTH)).mean()
    assert rect_loss(logits, y).item() == pytest.approx((ce + dice).item(), abs=1e-12)


def test_rect_rejects_soft_target():
    logits, y = rand_case(5)
    with pytest.raises(ContractError):
        rect_loss(logits, 0.5 * y)


def test_rect_gradient_stops_at_target():
    logits, y = rand_case(6)
    logits.requires_grad_(True)
    y = y.clone().requires_grad_(True)
    rect_loss(logits, y).backward()
    assert logits.grad is not None and y.grad is None


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.permutations([0, 1, 2]))
def test_class_relabeling_equivariance(seed, perm):
    logits, y = rand_case(seed)
    p = list(perm)
    assert rect_loss(logits[:, p], y[:, p]).item() == pytest.approx(rect_loss(logits, y).item(), abs=1e-10)
    w = LossWeights(pseudo_threshold=0.4)
    weak = (2 * logits).softmax(1)
    a = semi_seg_loss(logits, y, logits.flip(0), weak, w)
    b = semi_seg_loss(logits[:, p], y[:, p], logits.flip(0)[:, p], weak[:, p], w)
    assert a.item() == pytest.approx(b.item(), abs=1e-10)


# -- latent ----------------------------------------------------------------


def test_latent_loss_values():
    z = torch.randn(2, 4, 3, 3)
    assert latent_loss(z, z) == 0
    assert latent_loss(torch.zeros(2, 4, 3, 3), torch.ones(2, 4, 3, 3)).item() == 1.0
    r = torch.randn_like(z)
    brute = sum((a - b) ** 2 for a, b in zip(z.view(-1).tolist(), r.view(-1).tolist())) / z.numel()
    assert latent_loss(z, r).item() == pytest.approx(brute, rel=1e-5)
    with pytest.raises(ContractError):
        latent_loss(z, r[:1])


# -- semi -----------------------------------------------------------------


def test_pseudo_empty_mask_is_zero():
    weak = torch.full((1, 2, 4, 4), 0.5)
    strong = torch.randn(1, 2, 4, 4, requires_grad=True)
    out = pseudo_label_loss(strong, weak, 0.95)
    assert out.item() == 0.0
    out.backward()
    assert torch.equal(strong.grad, torch.zeros_like(strong))


def test_semi_perfect_labeled_is_near_zero():
    _, y = rand_case(7)
    weak = torch.full_like(y, 1 / 3)
    out = semi_seg_loss(40 * (2 * y - 1), y, torch.zeros_like(y), weak, LossWeights())
    assert out.item() < 1e-3


def test_semi_hand_built_2x2():
    # one pixel is confident (0.97 on class 1); the others sit at 0.6
    weak = torch.tensor([[[[0.4, 0.4], [0.4, 0.03]], [[0.6, 0.6], [0.6, 0.97]]]], dtype=torch.float64)
    strong = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    strong[0, :, 1, 1] = torch.tensor([1.0, -1.0])
    want = -math.log(math.exp(-1) / (math.exp(1) + math.exp(-1)))
    assert pseudo_label_loss(strong, weak, 0.95).item() == pytest.approx(want, abs=1e-12)
    y = one_hot_nchw(torch.zeros(1, 2, 2, dtype=torch.long), 2)
    sup = cross_entropy(torch.zeros_like(y), y) + soft_dice_loss(torch.zeros_like(y), y)
    total = semi_seg_loss(torch.zeros_like(y), y, strong, weak, LossWeights())
    assert total.item() == pytest.approx(sup.item() + want, abs=1e-12)


def test_semi_rejects_bad_probabilities():
    logits, y = rand_case(8)
    with pytest.raises(ContractError):
        semi_seg_loss(logits, y, logits, logits, LossWeights())


# -- gradient checks -------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(seed):
    logits, y = rand_case(seed)
    weak = (3 * torch.randn_like(logits)).softmax(1)
    w = LossWeights(pseudo_threshold=0.6)
    assert check_grad(lambda x: soft_dice_loss(x, y), logits) < 1e-3
    assert check_grad(lambda x: rect_loss(x, y), logits) < 1e-3
    assert check_grad(lambda x: latent_loss(y, x), logits) < 1e-3
    assert check_grad(lambda x: semi_seg_loss(x, y, x.flip(0), weak, w), logits) < 1e-3


# -- total -----------------------------------------------------------------


def test_total_arithmetic():
    w = LossWeights(lambda1=2.0, lambda2=3.0)
    assert total_loss(1.0, 1.0, 1.0, 1.0, 1.0, w).total == 8.0
    assert total_loss(0.0, 0.0, 0.0, 0.0, 0.0, LossWeights()).total == 0.0
    z = LossWeights(0.0, 0.0)
    assert total_loss(1.0, 2.0, 3.0, 100.0, -50.0, z).total == total_loss(1.0, 2.0, 3.0, 0.0, 0.0, z).total


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=5, max_size=5), st.floats(0, 5), st.floats(0, 5))
def test_total_linear_in_weights(parts, l1, l2):
    a = total_loss(*parts, LossWeights(l1, l2)).total
    b = total_loss(*parts, LossWeights(l1 + 1, l2)).total
    c = total_loss(*parts, LossWeights(l1, l2 + 1)).total
    assert b - a == pytest.approx(parts[3], abs=1e-7)
    assert c - a == pytest.approx(parts[4], abs=1e-7)
    assert a == pytest.approx(parts[0] + parts[1] + parts[2] + l1 * parts[3] + l2 * parts[4], abs=1e-7)


def test_total_rejects_non_finite():
    with pytest.raises(ContractError, match="lat_u"):
        total_loss(0.0, 0.0, 0.0, float("nan"), 0.0, LossWeights())
    with pytest.raises(ContractError):
        total_loss(torch.tensor(float("inf")), 0.0, 0.0, 0.0, 0.0, LossWeights())


def test_weights_validation():
    with pytest.raises(ContractError):
        LossWeights(lambda1=-1.0)
    with pytest.raises(ContractError):
        LossWeights(pseudo_threshold=1.5)


def test_breakdown_fields():
    b = total_loss(torch.tensor(1.0, requires_grad=True), 0.5, 0.25, 0.0, 0.0, LossWeights())
    assert list(b.as_floats()) == list(LossBreakdown.FIELDS)
    assert b.as_floats()["total"] == 1.75
