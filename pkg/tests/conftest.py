import math

import numpy as np
import pytest

from mimlab import autodiff as ad
from mimlab.distributions import FixedMixture, StandardNormal
from mimlab.networks import (
    AnchorPrior, LearnedMixture, MarginalX, MlpCondGaussian, ModelBundle, ModelSpec, build_model,
)

HALF_LOG_2PI = 0.9189385332046727


def standard_normal_bundle(x_dim=1, z_dim=1, hidden=3, x_prior="mixture"):
    """Zero-weight networks, so q(z|x) = p(x|z) = N(0, I); priors also N(0, I)."""
    enc = MlpCondGaussian(x_dim, hidden, z_dim, "tanh", None)
    dec = MlpCondGaussian(z_dim, hidden, x_dim, "tanh", None)
    if x_prior == "mixture":
        xp = LearnedMixture(ad.parameter(np.zeros(1)), ad.parameter(np.zeros((1, x_dim))), ad.parameter(np.zeros(1)))
    else:
        xp = MarginalX()
    return ModelBundle(enc, dec, AnchorPrior(), xp, StandardNormal(z_dim))


def random_bundle(seed=0, x_dim=2, z_dim=2, hidden=5, z_prior="anchor", x_prior="marginal", activation="tanh"):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((30, x_dim))
    return build_model(ModelSpec(x_dim, z_dim, hidden, activation, z_prior, x_prior, 3), rng, data=data)


def gmm_anchor(x_dim=2):
    """A known data density to stand in for a synthetic generator's P(x)."""
    means = np.stack([np.linspace(-1.0, 1.0, x_dim), np.linspace(1.0, -1.0, x_dim)])
    return FixedMixture(means, np.array([0.5, 0.8]), np.array([0.3, 0.7]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def linear_gaussian_bundle(a=1.3, b=0.4, s=0.6, enc_shift=0.0, enc_log_std_shift=0.0):
    """1-D conjugate model: z ~ N(0,1), x|z ~ N(a z + b, s^2).

    With zero shifts the encoder is the exact posterior.  Returns the bundle and
    the analytic ``log p(x)``.
    """
    enc = MlpCondGaussian(1, 1, 1, "identity", None)
    dec = MlpCondGaussian(1, 1, 1, "identity", None)
    v = a * a + s * s
    for net in (enc, dec):
        net.params["W1"].data[...] = 1.0
        net.params["W2"].data[...] = 1.0
    dec.params["Wm"].data[...] = a
    dec.params["bm"].data[...] = b
    dec.params["bs"].data[...] = math.log(s)
    enc.params["b1"].data[...] = -b
    enc.params["Wm"].data[...] = a / v
    enc.params["bm"].data[...] = enc_shift
    enc.params["bs"].data[...] = 0.5 * math.log(s * s / v) + enc_log_std_shift
    m = ModelBundle(enc, dec, AnchorPrior(), MarginalX(), StandardNormal(1))

    def log_marginal(x):
        return -0.5 * math.log(2 * math.pi * v) - (x - b) ** 2 / (2 * v)

    return m, log_marginal


# filled by the acceptance tests, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
