import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stochvp.diffcore import DimensionError, grad_check
from stochvp.latent import DiagonalGaussian, kl_diag_gaussian, sample_reparam, sigma_vae_nll


def gauss(mean, std):
    mean = torch.as_tensor(mean, dtype=torch.float64).reshape(1, -1)
    std = torch.as_tensor(std, dtype=torch.float64).reshape(1, -1)
    return DiagonalGaussian(mean, std.log())


def mc_kl(q, p, n=1_000_000, seed=0):
    """Monte-Carlo estimate of KL(q||p) for 1-D Gaussians with its standard error."""
    rng = np.random.default_rng(seed)
    mq, sq = float(q.mean), float(q.std)
    mp, sp = float(p.mean), float(p.std)
    x = rng.normal(mq, sq, n)
    logq = -0.5 * ((x - mq) / sq) ** 2 - math.log(sq)
    logp = -0.5 * ((x - mp) / sp) ** 2 - math.log(sp)
    d = logq - logp
    return d.mean(), d.std() / math.sqrt(n)


# -- reparameterization ----------------------------------------------------

def test_reparam_degenerate_std():
    d = DiagonalGaussian(torch.full((1, 3), 0.7), torch.full((1, 3), -7.0))
    noise = torch.tensor([[1.0, -2.0, 0.5]])
    v = sample_reparam(d, noise).value
    assert ((v - 0.7).abs() < 1e-2 * noise.abs()).all()


def test_reparam_value():
    d = DiagonalGaussian(torch.zeros(1, 1), torch.zeros(1, 1))
    assert sample_reparam(d, torch.tensor([[1.5]])).value.item() == 1.5


def test_reparam_gradient_wrt_mean_is_ones():
    mean = torch.randn(2, 3, requires_grad=True)
    d = DiagonalGaussian(mean, torch.randn(2, 3))
    sample_reparam(d, torch.randn(2, 3)).value.sum().backward()
    assert torch.equal(mean.grad, torch.ones(2, 3))


def test_reparam_shape_mismatch():
    with pytest.raises(DimensionError):
        sample_reparam(DiagonalGaussian(torch.zeros(1, 2), torch.zeros(1, 2)), torch.zeros(1, 3))


def test_reparam_source_tag():
    d = DiagonalGaussian(torch.zeros(1, 2), torch.zeros(1, 2))
    assert sample_reparam(d, torch.zeros(1, 2), "prior").source == "prior"


def test_log_std_clamped():
    d = DiagonalGaussian(torch.zeros(1, 2), torch.tensor([[-20.0, 20.0]]))
    assert d.log_std.tolist() == [[-7.0, 7.0]]


def test_reparam_empirical_moments():
    g = torch.Generator().manual_seed(0)
    d = DiagonalGaussian(torch.full((100_000, 1), 1.3, dtype=torch.float64),
                         torch.full((100_000, 1), math.log(0.6), dtype=torch.float64))
    v = sample_reparam(d, torch.randn(100_000, 1, generator=g, dtype=torch.float64)).value
    assert abs(float(v.mean()) - 1.3) < 0.01 * 1.3
    assert abs(float(v.std()) - 0.6) < 0.01 * 0.6


# -- KL ---------------------------------------------------------------------------

def test_kl_same_is_zero():
    assert kl_diag_gaussian(gauss(0.0, 1.0), gauss(0.0, 1.0)).item() == 0.0


def test_kl_shifted_mean():
    q, p = gauss(2.0, 1.0), gauss(0.0, 1.0)
    assert kl_diag_gaussian(q, p).item() == pytest.approx(2.0, abs=1e-12)
    est, se = mc_kl(q, p)
    assert abs(est - 2.0) < 3 * se


def test_kl_wider_std():
    q, p = gauss(0.0, 2.0), gauss(0.0, 1.0)
    expected = 1.5 - math.log(2.0)
    assert kl_diag_gaussian(q, p).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.806853, abs=1e-6)
    est, se = mc_kl(q, p, seed=1)
    assert abs(est - expected) < 3 * se


@pytest.mark.parametrize("seed", range(20))
def test_kl_matches_monte_carlo(seed):
    rng = np.random.default_rng(100 + seed)
    q = gauss(rng.uniform(-1, 1), rng.uniform(0.3, 2.0))
    p = gauss(rng.uniform(-1, 1), rng.uniform(0.3, 2.0))
    est, se = mc_kl(q, p, n=200_000, seed=seed)
    assert abs(est - kl_diag_gaussian(q, p).item()) < 3 * se + 1e-9


@given(st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_kl_nonnegative_and_self_zero(seed):
    g = torch.Generator().manual_seed(seed)
    q = DiagonalGaussian(torch.randn(2, 3, 2, 2, generator=g, dtype=torch.float64),
                         torch.randn(2, 3, 2, 2, generator=g, dtype=torch.float64))
    p = DiagonalGaussian(torch.randn(2, 3, 2, 2, generator=g, dtype=torch.float64),
                         torch.randn(2, 3, 2, 2, generator=g, dtype=torch.float64))
    assert (kl_diag_gaussian(q, p) >= -1e-9).all()
    assert (kl_diag_gaussian(q, q) == 0).all()


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_kl_float32_near_equal_is_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    m, ls = torch.randn(4, 64, generator=g), torch.randn(4, 64, generator=g) * 0.5
    q = DiagonalGaussian(m, ls)
    p = DiagonalGaussian(m + torch.randn(4, 64, generator=g) * 1e-4, ls + torch.randn(4, 64, generator=g) * 1e-4)
    kl = kl_diag_gaussian(q, p)
    assert kl.dtype == torch.float32 and (kl >= 0).all()


def test_kl_per_batch_element():
    q = DiagonalGaussian(torch.tensor([[0.0, 0.0], [2.0, 0.0]], dtype=torch.float64), torch.zeros(2, 2, dtype=torch.float64))
    p = DiagonalGaussian(torch.zeros(2, 2, dtype=torch.float64), torch.zeros(2, 2, dtype=torch.float64))
    assert kl_diag_gaussian(q, p).tolist() == [0.0, 2.0]


def test_kl_shape_mismatch():
    with pytest.raises(DimensionError):
        kl_diag_gaussian(gauss([0.0, 0.0], [1.0, 1.0]), gauss(0.0, 1.0))


# -- sigma-VAE likelihood -------------------------------------------------------

def test_sigma_vae_exact_match_clamps():
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    loss, sigma = sigma_vae_nll(x, x)
    n = x.numel()
    assert loss.item() == pytest.approx(n * (0.5 * math.log(2 * math.pi * 1e-6) + 0.5), rel=1e-12)
    assert sigma.item() == pytest.approx(1e-3, rel=1e-9)


def test_sigma_vae_mse_004():
    target = torch.zeros(100, dtype=torch.float64)
    pred = torch.full((100,), 0.2, dtype=torch.float64)
    loss, sigma = sigma_vae_nll(pred, target)
    assert sigma.item() == pytest.approx(0.2, abs=1e-12)
    per = loss.item() / 100
    assert per == pytest.approx(0.5 * math.log(2 * math.pi * 0.04) + 0.5, abs=1e-12)
    assert per == pytest.approx(-0.1905, abs=1e-4)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_sigma_vae_residual_scaling(seed):
    g = torch.Generator().manual_seed(seed)
    target = torch.rand(50, generator=g, dtype=torch.float64)
    r = torch.randn(50, generator=g, dtype=torch.float64) * 0.1 + 0.05
    l1, s1 = sigma_vae_nll(target + r, target)
    l2, s2 = sigma_vae_nll(target + 2 * r, target)
    assert s2.item() == pytest.approx(2 * s1.item(), rel=1e-9)
    assert (l2.item() - l1.item()) / 50 == pytest.approx(math.log(2.0), abs=1e-9)


def test_sigma_vae_empty_raises():
    with pytest.raises(ValueError):
        sigma_vae_nll(torch.zeros(0), torch.zeros(0))


# -- gradients --------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_latent_ops_grad_check(seed):
    rng = np.random.default_rng(seed)
    r = lambda *s: torch.from_numpy(rng.uniform(-1, 1, s))
    mq, lq, mp, lp, noise = r(1, 2, 2, 2), r(1, 2, 2, 2), r(1, 2, 2, 2), r(1, 2, 2, 2), r(1, 2, 2, 2)
    assert grad_check(lambda xs: sample_reparam(DiagonalGaussian(xs[0], xs[1]), noise).value.pow(2).sum(),
                      [mq, lq]) < 1e-4
    assert grad_check(lambda xs: kl_diag_gaussian(DiagonalGaussian(xs[0], xs[1]), DiagonalGaussian(xs[2], xs[3])).sum(),
                      [mq, lq, mp, lp]) < 1e-4
    target = r(1, 3, 2, 2)
    assert grad_check(lambda xs: sigma_vae_nll(xs[0], target)[0], [r(1, 3, 2, 2)]) < 1e-4
