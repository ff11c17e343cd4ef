"""MLP encoder/decoder conditionals, prior specifications and the model bundle."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .distributions import (
    AnchorSpec,
    DiagGaussian,
    Empirical,
    FixedMixture,
    Mixture,
    StandardNormal,
    anchor_log_prob,
    gaussian_log_prob,
    mixture_log_prob,
)

ACTIVATIONS = {"tanh": ad.tanh, "swish": ad.swish, "identity": ad.identity}


class MlpCondGaussian:
    """Two hidden layers of width ``hidden`` feeding separate mean and log-std heads.

    Weights are initialised uniformly in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``;
    biases likewise.  ``activation="identity"`` gives a linear-Gaussian
    conditional, which is handy for conjugate checks.
    """

    LAYERS = ("W1", "b1", "W2", "b2", "Wm", "bm", "Ws", "bs")

    def __init__(self, in_dim: int, hidden: int, out_dim: int, activation: str = "tanh",
                 rng: Optional[np.random.Generator] = None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
        self.in_dim, self.hidden, self.out_dim = int(in_dim), int(hidden), int(out_dim)
        self.activation = activation
        shapes = self.param_shapes(in_dim, hidden, out_dim)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name in self.LAYERS:
            shape = shapes[name]
            if rng is None:
                data = np.zeros(shape)
            else:
                fan_in = in_dim if name in ("W1", "b1") else hidden
                s = 1.0 / math.sqrt(fan_in)
                data = rng.uniform(-s, s, size=shape)
            self.params[name] = ad.parameter(data, name=name)

    @staticmethod
    def param_shapes(in_dim, hidden, out_dim) -> Dict[str, tuple]:
        return {
            "W1": (in_dim, hidden), "b1": (hidden,),
            "W2": (hidden, hidden), "b2": (hidden,),
            "Wm": (hidden, out_dim), "bm": (out_dim,),
            "Ws": (hidden, out_dim), "bs": (out_dim,),
        }

    @staticmethod
    def param_count(in_dim, hidden, out_dim) -> int:
        return in_dim * hidden + hidden + hidden * hidden + hidden + 2 * (hidden * out_dim + out_dim)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def __call__(self, x) -> DiagGaussian:
        x = ad.tensor(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = ad.reshape(x, (1, -1))
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError("MlpCondGaussian", x.shape, (None, self.in_dim))
        act = ACTIVATIONS[self.activation]
        p = self.params
        h = act(ad.matmul(x, p["W1"]) + p["b1"])
        h = act(ad.matmul(h, p["W2"]) + p["b2"])
        mean = ad.matmul(h, p["Wm"]) + p["bm"]
        log_std = ad.matmul(h, p["Ws"]) + p["bs"]
        if squeeze:
            mean, log_std = ad.reshape(mean, (self.out_dim,)), ad.reshape(log_std, (self.out_dim,))
        return DiagGaussian(mean, log_std)


# ---------------------------------------------------------------------------
# priors


@dataclass
class AnchorPrior:
    """The model prior is the anchor itself; no parameters."""


@dataclass
class LearnedMixture:
    logits: Tensor
    means: Tensor  # (K, d)
    log_stds: Tensor  # (K,) isotropic

    @classmethod
    def init(cls, k: int, dim: int, rng: np.random.Generator, spread: float = 1.0):
        return cls(
            logits=ad.parameter(np.zeros(k), name="logits"),
            means=ad.parameter(rng.normal(0.0, spread, size=(k, dim)), name="means"),
            log_stds=ad.parameter(np.zeros(k), name="log_stds"),
        )

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mixture(self) -> Mixture:
        k, d = self.means.shape
        comps = []
        for i in range(k):
            ls = ad.index(self.log_stds, i)
            comps.append(DiagGaussian(ad.index(self.means, i), ad.multiply(np.ones(d), ls)))
        return Mixture(self.logits, comps)

    def params(self) -> Dict[str, Tensor]:
        return OrderedDict(logits=self.logits, means=self.means, log_stds=self.log_stds)


@dataclass
class VampPrior:
    """Uniform mixture of encoder posteriors at trainable pseudo-inputs."""

    pseudo_inputs: Tensor  # (K, x_dim)

    @classmethod
    def from_data(cls, data: np.ndarray, k: int, rng: np.random.Generator):
        idx = rng.choice(data.shape[0], size=k, replace=data.shape[0] < k)
        return cls(ad.parameter(np.array(data[idx]), name="pseudo_inputs"))

    def params(self) -> Dict[str, Tensor]:
        return OrderedDict(pseudo_inputs=self.pseudo_inputs)


@dataclass
class MarginalX:
    """``q(x)`` is the decoder marginal, evaluated via one-sample importance bounds."""


PriorSpec = Union[AnchorPrior, LearnedMixture, VampPrior, MarginalX]


def prior_kind(p: PriorSpec) -> str:
    return {AnchorPrior: "anchor", LearnedMixture: "mixture", VampPrior: "vamp", MarginalX: "marginal"}[type(p)]


@dataclass
class ModelBundle:
    encoder: MlpCondGaussian
    decoder: MlpCondGaussian
    z_prior: PriorSpec
    x_prior: PriorSpec
    z_anchor: AnchorSpec
    x_anchor: Optional[AnchorSpec] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.encoder.out_dim != self.decoder.in_dim:
            raise ValueError("encoder output dim must equal decoder input dim")
        if self.encoder.in_dim != self.decoder.out_dim:
            raise ValueError("encoder input dim must equal decoder output dim")
        if isinstance(self.z_prior, MarginalX):
            raise ValueError("MarginalX is only legal for the x-prior")
        if isinstance(self.x_prior, VampPrior):
            raise ValueError("VampPrior is only legal for the z-prior")
        if isinstance(self.x_prior, AnchorPrior):
            raise ValueError("the x anchor is empirical and has no density; use MarginalX or LearnedMixture")
        if isinstance(self.z_anchor, Empirical):
            raise ValueError("the z anchor must have a density")
        if self.z_anchor.dim != self.z_dim:
            raise ValueError(f"z anchor dim {self.z_anchor.dim} != latent dim {self.z_dim}")
        if isinstance(self.z_prior, VampPrior) and self.z_prior.pseudo_inputs.shape[1] != self.x_dim:
            raise ValueError("pseudo-inputs must live in x space")

    @property
    def x_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def z_dim(self) -> int:
        return self.encoder.out_dim

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for k, v in self.encoder.params.items():
            out[f"encoder.{k}"] = v
        for k, v in self.decoder.params.items():
            out[f"decoder.{k}"] = v
        for tag, prior in (("z_prior", self.z_prior), ("x_prior", self.x_prior)):
            if hasattr(prior, "params"):
                for k, v in prior.params().items():
                    out[f"{tag}.{k}"] = v
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters().values())


def encode(m: ModelBundle, x) -> DiagGaussian:
    return m.encoder(x)


def decode(m: ModelBundle, z) -> DiagGaussian:
    return m.decoder(z)


def prior_log_prob_z(m: ModelBundle, z) -> Tensor:
    z = ad.tensor(z)
    if z.ndim == 0 or z.shape[-1] != m.z_dim:
        raise ShapeError("prior_log_prob_z", z.shape, (m.z_dim,))
    p = m.z_prior
    if isinstance(p, AnchorPrior):
        return anchor_log_prob(m.z_anchor, z)
    if isinstance(p, LearnedMixture):
        return mixture_log_prob(z, p.mixture())
    if isinstance(p, VampPrior):
        q_u = encode(m, p.pseudo_inputs)
        k = p.pseudo_inputs.shape[0]
        cols = [gaussian_log_prob(z, DiagGaussian(ad.index(q_u.mean, i), ad.index(q_u.log_std, i)))
                for i in range(k)]
        return ad.logsumexp(ad.stack(cols, axis=-1), axis=-1) - math.log(k)
    raise TypeError(f"unsupported z prior {p!r}")


def marginal_bound(m: ModelBundle, x, z_tilde, q_zx: Optional[DiagGaussian] = None) -> Tensor:
    """One-sample importance bound ``log p(x|z~) + log p(z~) - log q(z~|x)``."""
    q_zx = encode(m, x) if q_zx is None else q_zx
    return (gaussian_log_prob(x, decode(m, z_tilde)) + prior_log_prob_z(m, z_tilde)
            - gaussian_log_prob(z_tilde, q_zx))


def prior_log_prob_x(m: ModelBundle, x, z_context=None, q_zx: Optional[DiagGaussian] = None) -> Tensor:
    """``log q(x)``.  For :class:`MarginalX`, ``z_context`` is the importance
    sample ``z~ ~ q(z|x)`` and the result is the one-sample bound."""
    x = ad.tensor(x)
    if x.ndim == 0 or x.shape[-1] != m.x_dim:
        raise ShapeError("prior_log_prob_x", x.shape, (m.x_dim,))
    p = m.x_prior
    if isinstance(p, LearnedMixture):
        return mixture_log_prob(x, p.mixture())
    if isinstance(p, MarginalX):
        if z_context is None:
            raise ValueError("MarginalX x-prior needs z_context (an importance sample from q(z|x))")
        return marginal_bound(m, x, z_context, q_zx)
    raise TypeError(f"unsupported x prior {p!r}")


# ---------------------------------------------------------------------------
# construction


@dataclass
class ModelSpec:
    x_dim: int
    z_dim: int
    hidden: int
    activation: str = "tanh"
    z_prior: str = "anchor"  # anchor | mixture | vamp
    x_prior: str = "marginal"  # marginal | mixture
    prior_components: int = 10

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def build_model(spec: ModelSpec, rng: np.random.Generator, data: Optional[np.ndarray] = None,
                z_anchor: Optional[AnchorSpec] = None) -> ModelBundle:
    """Initialise a bundle; ``data`` seeds VampPrior pseudo-inputs."""
    enc = MlpCondGaussian(spec.x_dim, spec.hidden, spec.z_dim, spec.activation, rng)
    dec = MlpCondGaussian(spec.z_dim, spec.hidden, spec.x_dim, spec.activation, rng)
    if spec.z_prior == "anchor":
        zp: PriorSpec = AnchorPrior()
    elif spec.z_prior == "mixture":
        zp = LearnedMixture.init(spec.prior_components, spec.z_dim, rng)
    elif spec.z_prior == "vamp":
        if data is None:
            raise ValueError("VampPrior initialisation needs training data")
        zp = VampPrior.from_data(data, spec.prior_components, rng)
    else:
        raise ValueError(f"unknown z prior {spec.z_prior!r}")
    if spec.x_prior == "marginal":
        xp: PriorSpec = MarginalX()
    elif spec.x_prior == "mixture":
        spread = float(np.std(data)) if data is not None else 1.0
        xp = LearnedMixture.init(spec.prior_components, spec.x_dim, rng, spread=spread)
    else:
        raise ValueError(f"unknown x prior {spec.x_prior!r}")
    return ModelBundle(enc, dec, zp, xp, z_anchor or StandardNormal(spec.z_dim),
                       Empirical(data) if data is not None else None, meta={"spec": spec.as_dict()})


def vae_param_count(x_dim: int, z_dim: int, hidden: int) -> int:
    """Trainable parameters of a VAE with the same encoder/decoder."""
    return MlpCondGaussian.param_count(x_dim, hidden, z_dim) + MlpCondGaussian.param_count(z_dim, hidden, x_dim)
