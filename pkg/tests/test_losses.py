import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from retfuse import losses
from retfuse.losses import LossWeights

import gradient_cases
import oracles

C1 = 0.01 ** 2


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))[None, None]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- reconstruction

def test_recon_perfect_is_zero(rng):
    x = t(rng.random((8, 9)))
    assert losses.recon_loss(x, x.clone()).item() == 0.0


@pytest.mark.parametrize("h,w", [(6, 6), (8, 12)])
def test_recon_constant_images(h, w):
    zero, one = torch.zeros(1, 1, h, w, dtype=torch.float64), torch.ones(1, 1, h, w, dtype=torch.float64)
    # SSIM of constant maps 0 and 1: luminance term C1 / (1 + C1), structure term 1
    expected = h * w + 5.0 * (1.0 - C1 / (1.0 + C1))
    assert losses.recon_loss(zero, one).item() == pytest.approx(expected, abs=1e-9)


def test_recon_mean_reduction(rng):
    a, b = t(rng.random((6, 6))), t(rng.random((6, 6)))
    s = losses.recon_loss(a, b, reduction="sum") - losses.recon_loss(a, b, reduction="mean")
    assert s.item() == pytest.approx(((a - b) ** 2).sum().item() * (1 - 1 / 36), rel=1e-12)


def test_recon_flip_symmetric(rng):
    a, b = t(rng.random((7, 9))), t(rng.random((7, 9)))
    flipped = losses.recon_loss(a.flip(-1), b.flip(-1))
    assert flipped.item() == pytest.approx(losses.recon_loss(a, b).item(), abs=1e-12)


def test_recon_shape_mismatch():
    with pytest.raises(ValueError):
        losses.recon_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


def test_ssim_matches_loop(rng):
    a, b = rng.random((9, 10)), rng.random((9, 10))
    # the loop works on 8-bit data; scale so both sides see the same numbers
    q = lambda x: np.round(x * 255)  # noqa: E731
    got = losses.ssim(t(q(a)), t(q(b)), data_range=255.0).item()
    assert got == pytest.approx(oracles.ssim_loop(a, b), abs=1e-9)


# ---------------------------------------------------------------- decomposition

def test_decomp_orthogonal_details_zero():
    d1 = t([[1.0, -1.0], [0.0, 0.0]])
    d2 = t([[0.0, 0.0], [1.0, -1.0]])
    b = t([[1.0, 2.0], [3.0, 4.0]])
    assert losses.decomp_loss(b, b, d1, d2).item() == 0.0


def test_decomp_identical_maps(rng):
    b, d = t(rng.random((5, 5))), t(rng.random((5, 5)))
    assert losses.decomp_loss(b, b, d, d).item() == pytest.approx(1 / 2.01, abs=1e-9)
    assert 1 / 2.01 == pytest.approx(0.4975124378, abs=1e-9)


def test_decomp_opposite_details_uncorrelated_bases():
    b1 = t([[1.0, -1.0], [0.0, 0.0]])
    b2 = t([[0.0, 0.0], [1.0, -1.0]])
    d1 = t([[0.3, 0.1], [0.7, 0.2]])
    got = losses.decomp_loss(b1, b2, d1, -d1).item()
    assert got == pytest.approx(1 / 1.01, abs=1e-9)
    assert 1 / 1.01 == pytest.approx(0.9900990099, abs=1e-9)


def test_correlation_constant_is_zero():
    assert losses.correlation(torch.ones(5), torch.arange(5.0)).item() == 0.0


def test_eps_must_exceed_one():
    with pytest.raises(ValueError):
        LossWeights(eps=1.0)


# ---------------------------------------------------------------- graph

@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_graph_scale_invariant(c, rng):
    x = t(rng.normal(size=(6, 6)))
    assert abs(losses.graph_loss(x, c * x).item()) <= 1e-9


def test_graph_orthogonal_and_opposite():
    a, b = t([[1.0, 0.0]]), t([[0.0, 1.0]])
    assert losses.graph_loss(a, b).item() == 1.0
    assert losses.graph_loss(a, -a).item() == 2.0


def test_graph_zero_maps():
    z = torch.zeros(1, 1, 3, 3)
    assert losses.graph_loss(z, z) is None
    assert losses.graph_loss(z, torch.ones_like(z)).item() == 1.0


# ---------------------------------------------------------------- stage II

def test_intensity_at_max_is_zero(rng):
    a, b = t(rng.random((4, 4))), t(rng.random((4, 4)))
    assert losses.stage2_intensity_loss(torch.maximum(a, b), a, b).item() == 0.0


def test_intensity_constant_case():
    z = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    assert losses.stage2_intensity_loss(z, z, z + 0.3).item() == pytest.approx(0.3, abs=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_intensity_matches_loop(seed):
    f, a, b = np.random.default_rng(seed).random((3, 4, 4))
    assert losses.stage2_intensity_loss(t(f), t(a), t(b)).item() == pytest.approx(
        oracles.intensity_loss_loop(f, a, b), abs=1e-12)


def test_grad_identical_images_zero(rng):
    a = t(rng.random((6, 6)))
    assert losses.grad_loss(a, a, a).item() == 0.0


def test_grad_constant_images_zero_and_finite_gradient():
    f = torch.full((1, 1, 5, 5), 0.4, dtype=torch.float64, requires_grad=True)
    c = torch.full((1, 1, 5, 5), 0.7, dtype=torch.float64)
    loss = losses.grad_loss(f, c, c)
    loss.backward()
    assert loss.item() == 0.0
    assert torch.isfinite(f.grad).all() and not f.grad.any()


@pytest.mark.parametrize("seed", range(3))
def test_grad_matches_loop(seed):
    f, a, b = np.random.default_rng(seed).random((3, 5, 5))
    assert losses.grad_loss(t(f), t(a), t(b)).item() == pytest.approx(
        oracles.grad_loss_loop(f, a, b), abs=1e-12)


def test_sobel_matches_loop(rng):
    img = rng.random((6, 7))
    assert np.allclose(losses.sobel_magnitude(t(img))[0, 0].numpy(), oracles.sobel_mag_loop(img),
                       atol=1e-12)


# ---------------------------------------------------------------- totals

def unit_parts(names, v=1.0):
    return {k: torch.tensor(v, dtype=torch.float64) for k in names}


S1 = ("recon1", "recon2", "decomp", "graph")
S2 = ("intensity", "graph", "grad", "decomp")


def test_total_zero():
    assert losses.total_stage1(unit_parts(S1, 0.0), LossWeights()).total.item() == 0.0
    assert losses.total_stage2(unit_parts(S2, 0.0), LossWeights()).total.item() == 0.0


def test_total_unit_terms():
    assert losses.total_stage1(unit_parts(S1), LossWeights()).total.item() == 4.5
    assert losses.total_stage2(unit_parts(S2), LossWeights()).total.item() == 13.5


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(S1), st.floats(0.0, 50.0))
def test_total_linear_in_each_term(name, scale):
    w = LossWeights()
    base = losses.total_stage1(unit_parts(S1), w).total.item()
    parts = unit_parts(S1)
    parts[name] = parts[name] * (1 + scale)
    coef = {"recon1": 1.0, "recon2": w.alpha1, "decomp": w.alpha2, "graph": w.alpha3}[name]
    assert losses.total_stage1(parts, w).total.item() == pytest.approx(base + coef * scale)


def test_missing_graph_term_skipped():
    parts = unit_parts(S1)
    parts["graph"] = None
    assert losses.total_stage1(parts, LossWeights()).total.item() == 4.0


def test_non_finite_term_named():
    parts = unit_parts(S2)
    parts["grad"] = torch.tensor(math.nan)
    with pytest.raises(FloatingPointError, match="grad"):
        losses.total_stage2(parts, LossWeights())


@pytest.mark.parametrize("name", ["recon_loss", "decomp_loss", "graph_loss", "intensity_loss",
                                  "grad_loss"])
def test_loss_gradients(name):
    _, fn, inputs, params = {c[0]: c for c in gradient_cases.cases()}[name]
    assert oracles.fd_rel_error(fn, inputs, params) < 1e-3
