import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from mimlab import autodiff as ad
from mimlab.autodiff import ShapeError
from mimlab.distributions import (
    DiagGaussian, Empirical, FixedMixture, Mixture, StandardNormal, anchor_sample, gaussian_log_prob,
    gaussian_sample_reparam, mixture_log_prob,
)

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def scalar_gaussian_logpdf(x, mu, log_std):
    """Independent per-coordinate closed form via math."""
    total = 0.0
    for xi, mi, si in zip(x, mu, log_std):
        sd = math.exp(si)
        total += -math.log(sd * math.sqrt(2 * math.pi)) - (xi - mi) ** 2 / (2 * sd * sd)
    return total


def test_standard_normal_at_zero():
    assert gaussian_log_prob([0.0], DiagGaussian([0.0], [0.0])).item() == pytest.approx(-0.9189385, abs=1e-7)


@pytest.mark.parametrize("log_std", [-3.0, 0.0, 1.5])
def test_at_mean_only_normaliser_remains(log_std):
    v = gaussian_log_prob([0.7], DiagGaussian([0.7], [log_std])).item()
    assert v == pytest.approx(-log_std - HALF_LOG_2PI, abs=1e-14)


def test_random_3d_matches_scalar_routine():
    rng = np.random.default_rng(0)
    x, mu, ls = rng.standard_normal(3), rng.standard_normal(3), rng.uniform(-1, 1, 3)
    v = gaussian_log_prob(x, DiagGaussian(mu, ls)).item()
    assert abs(v - scalar_gaussian_logpdf(x, mu, ls)) < 1e-12


def test_log_std_is_clamped():
    g = DiagGaussian([0.0, 0.0], [-20.0, 20.0])
    np.testing.assert_array_equal(g.log_std.data, [-7.0, 7.0])


def test_dim_mismatch():
    with pytest.raises(ShapeError):
        gaussian_log_prob([0.0, 1.0], DiagGaussian([0.0], [0.0]))
    with pytest.raises(ShapeError):
        DiagGaussian([0.0, 1.0], [0.0])
    with pytest.raises(ShapeError):
        gaussian_sample_reparam(DiagGaussian([0.0], [0.0]), [0.0, 1.0])


def test_reparam_sample():
    g = DiagGaussian([1.5, -2.0], [0.3, -0.1])
    np.testing.assert_array_equal(gaussian_sample_reparam(g, [0.0, 0.0]).data, [1.5, -2.0])
    g0 = DiagGaussian([1.5], [0.0])
    assert gaussian_sample_reparam(g0, [0.25]).item() == 1.75


def test_reparam_gradient_wrt_log_std():
    ls = ad.parameter([0.0])
    z = gaussian_sample_reparam(DiagGaussian(ad.tensor([0.0]), ls), [1.0])
    ad.backward(ad.sum(z))
    assert ls.grad[0] == pytest.approx(1.0)
    noise = ad.parameter([1.0])
    z = gaussian_sample_reparam(DiagGaussian(ad.tensor([0.0]), ad.parameter([0.0])), noise)
    assert not any(p is noise for p in z.parents)


def test_gradient_vanishes_at_mean():
    x = ad.parameter([0.3, -1.2])
    ad.backward(gaussian_log_prob(x, DiagGaussian([0.3, -1.2], [0.5, -0.5])))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def _random_mixture(rng, k, d):
    comps = [DiagGaussian(rng.standard_normal(d), rng.uniform(-1, 0.5, d)) for _ in range(k)]
    return Mixture(rng.standard_normal(k), comps)


def test_single_component_mixture():
    g = DiagGaussian([0.2, 0.1], [0.1, -0.3])
    m = Mixture([3.0], [g])
    x = [0.5, -0.5]
    assert mixture_log_prob(x, m).item() == pytest.approx(gaussian_log_prob(x, g).item(), abs=1e-14)


def test_identical_components():
    g = DiagGaussian([0.2], [0.1])
    m = Mixture([0.3, -1.4], [g, DiagGaussian([0.2], [0.1])])
    assert mixture_log_prob([0.9], m).item() == pytest.approx(gaussian_log_prob([0.9], g).item(), abs=1e-14)


def test_k3_mixture_matches_linear_space_sum():
    rng = np.random.default_rng(7)
    m = _random_mixture(rng, 3, 2)
    x = rng.standard_normal(2)
    w = m.weights()
    lin = sum(wk * math.exp(scalar_gaussian_logpdf(x, c.mean.data, c.log_std.data))
              for wk, c in zip(w, m.components))
    assert abs(mixture_log_prob(x, m).item() - math.log(lin)) < 1e-10


def test_mixture_density_integrates_to_one_on_grid():
    comps = [DiagGaussian([-1.0, 0.5], np.log([0.25, 0.25])), DiagGaussian([1.0, -0.5], np.log([0.5, 0.3]))]
    m = Mixture([0.2, -0.3], comps)
    g = np.linspace(-6, 6, 241)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    dens = np.exp(mixture_log_prob(pts, m).data).reshape(xx.shape)
    total = trapezoid(trapezoid(dens, g, axis=1), g)
    assert abs(total - 1.0) < 1e-3
    m1 = Mixture([0.0], [DiagGaussian([0.0], [math.log(0.25)])])
    d1 = np.exp(mixture_log_prob(g[:, None], m1).data)
    assert abs(trapezoid(d1, g) - 1.0) < 1e-3


def test_standard_normal_sample_mean():
    x, lab = anchor_sample(StandardNormal(2), 100_000, np.random.default_rng(0))
    assert lab is None
    assert np.all(np.abs(x.mean(axis=0)) < 0.02)


def test_degenerate_mixture_sample():
    a = FixedMixture(np.array([[5.0, 5.0]]), np.array([0.0]), np.array([1.0]))
    x, lab = anchor_sample(a, 50, np.random.default_rng(0))
    assert np.all(x == 5.0) and np.all(lab == 0)
    with pytest.raises(ValueError):
        a.log_prob([5.0, 5.0])


def test_same_seed_same_samples():
    a = FixedMixture(np.array([[0.0], [3.0]]), np.array([0.5, 0.2]), np.array([0.3, 0.7]))
    x1, l1 = anchor_sample(a, 1000, np.random.default_rng(9))
    x2, l2 = anchor_sample(a, 1000, np.random.default_rng(9))
    assert x1.tobytes() == x2.tobytes() and l1.tobytes() == l2.tobytes()
    assert abs(l1.mean() - 0.7) < 0.05


def test_empirical_anchor():
    pts = np.arange(10.0).reshape(5, 2)
    x, _ = anchor_sample(Empirical(pts), 20, np.random.default_rng(0))
    assert set(map(tuple, x)) <= set(map(tuple, pts))
    with pytest.raises(ValueError):
        anchor_sample(Empirical(np.zeros((0, 2))), 3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        anchor_sample(StandardNormal(1), 0, np.random.default_rng(0))


def test_pathwise_gradient_matches_finite_difference():
    # d/dmu E[(z - 1)^2] with z = mu + s * eps; frozen noise, finite difference in mu
    eps = np.random.default_rng(0).standard_normal((1_000_000, 1))
    mu0, ls0 = 0.3, math.log(0.7)
    mu = ad.parameter(np.full((1_000_000, 1), mu0))

    def objective(m):
        return float(np.mean((m + math.exp(ls0) * eps - 1.0) ** 2))

    z = gaussian_sample_reparam(DiagGaussian(mu, ad.tensor(np.full((1_000_000, 1), ls0))), eps)
    loss = ad.mean(ad.square(ad.reshape(z, (-1,)) - 1.0))
    ad.backward(loss)
    pathwise = float(mu.grad.sum())
    h = 1e-4
    fd = (objective(mu0 + h) - objective(mu0 - h)) / (2 * h)
    assert abs(pathwise - fd) < 1e-3
