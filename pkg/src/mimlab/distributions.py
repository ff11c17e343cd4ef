"""Diagonal Gaussians, finite Gaussian mixtures and fixed anchor distributions.

Log-densities are differentiable :class:`~mimlab.autodiff.Tensor` expressions
that reduce over the last axis, so a batch ``x`` of shape ``(N, d)`` yields
``(N,)`` log-probabilities and a single point ``(d,)`` yields a scalar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LOG_STD_MIN = -7.0
LOG_STD_MAX = 7.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class DiagGaussian:
    """Diagonal Gaussian with ``log_std`` clamped to ``[-7, 7]``."""

    __slots__ = ("mean", "log_std")

    def __init__(self, mean, log_std):
        mean, log_std = ad.tensor(mean), ad.tensor(log_std)
        if mean.shape != log_std.shape:
            raise ShapeError("DiagGaussian", mean.shape, log_std.shape)
        self.mean = mean
        self.log_std = ad.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)


def _check_dim(op, x: Tensor, dim: int):
    if x.ndim == 0 or x.shape[-1] != dim:
        raise ShapeError(op, x.shape, (dim,))


def gaussian_log_prob(x, g: DiagGaussian) -> Tensor:
    x = ad.tensor(x)
    _check_dim("gaussian_log_prob", x, g.dim)
    if g.mean.shape != x.shape and g.mean.shape != x.shape[-1:]:
        raise ShapeError("gaussian_log_prob", x.shape, g.mean.shape)
    u = (x - g.mean) * ad.exp(-g.log_std)
    per_dim = ad.scale(ad.square(u), -0.5) - g.log_std
    return ad.sum(per_dim, axis=-1) - g.dim * HALF_LOG_2PI


def gaussian_sample_reparam(g: DiagGaussian, noise) -> Tensor:
    """``mean + exp(log_std) * noise``; ``noise`` is treated as a constant."""
    noise = ad.tensor(np.asarray(noise.data if isinstance(noise, Tensor) else noise))
    if noise.shape != g.mean.shape:
        raise ShapeError("gaussian_sample_reparam", g.mean.shape, noise.shape)
    return g.mean + ad.exp(g.log_std) * noise


def standard_normal_log_prob(x) -> Tensor:
    x = ad.tensor(x)
    d = x.shape[-1]
    return ad.scale(ad.sum(ad.square(x), axis=-1), -0.5) - d * HALF_LOG_2PI


class Mixture:
    """Finite mixture of diagonal Gaussians; weights are ``softmax(logits)``."""

    def __init__(self, logit_weights, components: List[DiagGaussian]):
        self.logit_weights = ad.tensor(logit_weights)
        if len(components) < 1:
            raise ValueError("a mixture needs at least one component")
        if self.logit_weights.shape != (len(components),):
            raise ShapeError("Mixture", self.logit_weights.shape, (len(components),))
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise ValueError(f"mixture components disagree on dimension: {sorted(dims)}")
        self.components = list(components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def weights(self) -> np.ndarray:
        lw = self.logit_weights.data
        e = np.exp(lw - lw.max())
        return e / e.sum()


def mixture_log_prob(x, m: Mixture) -> Tensor:
    x = ad.tensor(x)
    _check_dim("mixture_log_prob", x, m.dim)
    log_w = m.logit_weights - ad.logsumexp(m.logit_weights, axis=0)
    comp = ad.stack([gaussian_log_prob(x, c) for c in m.components], axis=-1)
    return ad.logsumexp(comp + log_w, axis=-1)


# ---------------------------------------------------------------------------
# anchors: fixed, parameter-free distributions (plain numpy, never in a graph)


@dataclass(frozen=True)
class StandardNormal:
    dim: int


@dataclass(frozen=True)
class FixedMixture:
    """Gaussian mixture with constant parameters; ``stds`` may be zero."""

    means: np.ndarray  # (K, d)
    stds: np.ndarray  # (K,) isotropic per component
    weights: np.ndarray  # (K,)

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        stds = np.asarray(self.stds, dtype=np.float64).reshape(-1)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if stds.shape[0] != means.shape[0] or w.shape[0] != means.shape[0]:
            raise ValueError("means, stds and weights must agree on component count")
        if np.any(stds < 0) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("stds must be >= 0 and weights a probability vector")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_prob(self, x) -> Tensor:
        if np.any(self.stds <= 0):
            raise ValueError("degenerate mixture component has no density")
        comps = [DiagGaussian(mu, np.full(self.dim, math.log(s))) for mu, s in zip(self.means, self.stds)]
        return mixture_log_prob(x, Mixture(np.log(self.weights), comps))


@dataclass(frozen=True)
class Empirical:
    points: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return np.asarray(self.points).shape[1]


AnchorSpec = Union[StandardNormal, FixedMixture, Empirical]


def anchor_log_prob(a: AnchorSpec, x) -> Tensor:
    if isinstance(a, StandardNormal):
        x = ad.tensor(x)
        _check_dim("anchor_log_prob", x, a.dim)
        return standard_normal_log_prob(x)
    if isinstance(a, FixedMixture):
        return a.log_prob(x)
    raise TypeError("an empirical anchor has no density")


def sample_mixture_components(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Component indices by inverse CDF on the cumulative weights."""
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(n), side="right").astype(np.int64)


def anchor_sample(a: AnchorSpec, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Draw ``n`` i.i.d. samples; mixtures also return component labels."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(a, StandardNormal):
        return rng.standard_normal((n, a.dim)), None
    if isinstance(a, FixedMixture):
        labels = sample_mixture_components(a.weights, n, rng)
        noise = rng.standard_normal((n, a.dim))
        return a.means[labels] + a.stds[labels, None] * noise, labels
    if isinstance(a, Empirical):
        pts = np.asarray(a.points)
        if pts.shape[0] == 0:
            raise ValueError("empirical anchor has an empty dataset")
        return pts[rng.integers(0, pts.shape[0], size=n)], None
    raise TypeError(f"unknown anchor {a!r}")
