"""Monte-Carlo loss estimators for MIM, A-MIM, VAE and their ablations.

A :class:`SampleBatch` holds reparameterised draws from the two sampling
paths: *encoding* pairs ``x ~ P(x), z ~ q(z|x)`` and *decoding* pairs
``z ~ P(z), x ~ p(x|z)``.  A batch with both halves in equal number is an
unbiased sample of the mixture of the encoding and decoding joints.

Every loss takes a warm-up weight ``w`` on the decoder-distribution
cross-entropy term; ``w = 0.5`` is full strength.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import (
    DiagGaussian, FixedMixture, StandardNormal, anchor_log_prob, anchor_sample, gaussian_log_prob,
    gaussian_sample_reparam,
)
from .networks import AnchorPrior, MarginalX, ModelBundle, decode, encode, prior_log_prob_x, prior_log_prob_z

LOG2 = math.log(2.0)

LOSS_KINDS = ("mim", "mim-marginal", "amim", "vae", "ce", "vae+h", "mim-h")


class LossConfigError(ValueError):
    pass


@dataclass
class SampleBatch:
    enc_x: Optional[Tensor] = None
    enc_z: Optional[Tensor] = None
    enc_q: Optional[DiagGaussian] = None
    dec_z: Optional[Tensor] = None
    dec_x: Optional[Tensor] = None
    dec_p: Optional[DiagGaussian] = None
    dec_q: Optional[DiagGaussian] = None
    dec_zaux: Optional[Tensor] = None

    @property
    def n_enc(self) -> int:
        return 0 if self.enc_x is None else self.enc_x.shape[0]

    @property
    def n_dec(self) -> int:
        return 0 if self.dec_z is None else self.dec_z.shape[0]

    @property
    def size(self) -> int:
        return self.n_enc + self.n_dec


def make_batch(m: ModelBundle, x_enc=None, eps_enc=None, z_dec=None, eps_dec=None, eps_aux=None) -> SampleBatch:
    """Build a batch from explicit noise, so repeated calls are deterministic."""
    b = SampleBatch()
    if x_enc is not None:
        b.enc_x = ad.tensor(np.atleast_2d(x_enc))
        b.enc_q = encode(m, b.enc_x)
        b.enc_z = gaussian_sample_reparam(b.enc_q, np.atleast_2d(eps_enc))
    if z_dec is not None:
        b.dec_z = ad.tensor(np.atleast_2d(z_dec))
        b.dec_p = decode(m, b.dec_z)
        b.dec_x = gaussian_sample_reparam(b.dec_p, np.atleast_2d(eps_dec))
        b.dec_q = encode(m, b.dec_x)
        if eps_aux is not None:
            b.dec_zaux = gaussian_sample_reparam(b.dec_q, np.atleast_2d(eps_aux))
    return b


@dataclass
class BatchNoise:
    """Frozen noise for one batch; ``build`` replays it against any model."""

    x_enc: Optional[np.ndarray]
    eps_enc: Optional[np.ndarray]
    z_dec: Optional[np.ndarray]
    eps_dec: Optional[np.ndarray]
    eps_aux: Optional[np.ndarray]

    def build(self, m: ModelBundle) -> SampleBatch:
        return make_batch(m, self.x_enc, self.eps_enc, self.z_dec, self.eps_dec, self.eps_aux)


def draw_noise(m: ModelBundle, x_enc: Optional[np.ndarray], n_dec: int, rng: np.random.Generator,
               aux: bool = False) -> BatchNoise:
    eps_enc = None
    if x_enc is not None and len(x_enc):
        eps_enc = rng.standard_normal((x_enc.shape[0], m.z_dim))
    else:
        x_enc = None
    z_dec = eps_dec = eps_aux = None
    if n_dec > 0:
        z_dec, _ = anchor_sample(m.z_anchor, n_dec, rng)
        eps_dec = rng.standard_normal((n_dec, m.x_dim))
        if aux:
            eps_aux = rng.standard_normal((n_dec, m.z_dim))
    return BatchNoise(x_enc, eps_enc, z_dec, eps_dec, eps_aux)


def sample_batch(m: ModelBundle, x_enc, n_dec: int, rng: np.random.Generator, aux: bool = False) -> SampleBatch:
    return draw_noise(m, x_enc, n_dec, rng, aux).build(m)


# ---------------------------------------------------------------------------
# per-pair log terms


def _enc_terms(b: SampleBatch, m: ModelBundle, with_qx: bool) -> Dict[str, Tensor]:
    t = {
        "lq_zx": gaussian_log_prob(b.enc_z, b.enc_q),
        "lp_xz": gaussian_log_prob(b.enc_x, decode(m, b.enc_z)),
        "lp_z": prior_log_prob_z(m, b.enc_z),
    }
    if with_qx:
        if isinstance(m.x_prior, MarginalX):
            # importance sample is the pair's own z
            t["lq_x"] = t["lp_xz"] + t["lp_z"] - t["lq_zx"]
        else:
            t["lq_x"] = prior_log_prob_x(m, b.enc_x)
    return t


def _dec_terms(b: SampleBatch, m: ModelBundle, with_qx: bool) -> Dict[str, Tensor]:
    t = {
        "lq_zx": gaussian_log_prob(b.dec_z, b.dec_q),
        "lp_xz": gaussian_log_prob(b.dec_x, b.dec_p),
        "lp_z": prior_log_prob_z(m, b.dec_z),
    }
    if with_qx:
        if isinstance(m.x_prior, MarginalX):
            if b.dec_zaux is None:
                raise LossConfigError("decoding pairs need an auxiliary z' ~ q(z'|x) under a marginal x-prior")
            t["lq_x"] = prior_log_prob_x(m, b.dec_x, z_context=b.dec_zaux, q_zx=b.dec_q)
        else:
            t["lq_x"] = prior_log_prob_x(m, b.dec_x)
    return t


def _require_balanced(b: SampleBatch):
    if b.size == 0:
        raise LossConfigError("empty batch")
    if b.n_enc and b.n_dec and b.n_enc != b.n_dec:
        raise LossConfigError(
            f"mixed batch must hold N/2 encoding and N/2 decoding pairs (got {b.n_enc} + {b.n_dec}, N={b.size})")


def _require_enc_only(b: SampleBatch, kind: str):
    if b.n_dec:
        raise LossConfigError(f"{kind} samples only from the encoding distribution; batch has decoding pairs")
    if not b.n_enc:
        raise LossConfigError("empty batch")


def _halves(b: SampleBatch, m: ModelBundle, with_qx=True):
    out = []
    if b.n_enc:
        out.append(_enc_terms(b, m, with_qx))
    if b.n_dec:
        out.append(_dec_terms(b, m, with_qx))
    return out


# ---------------------------------------------------------------------------
# losses


def warmup_weight(epoch: int, warmup_epochs: int) -> float:
    """Linear ramp of the decoder CE weight from 0 to 0.5."""
    if warmup_epochs < 0:
        raise ValueError("warmup_epochs must be >= 0")
    if warmup_epochs == 0:
        return 0.5
    return min(0.5, 0.5 * epoch / warmup_epochs)


def mim_loss(batch: SampleBatch, m: ModelBundle, w: float = 0.5) -> Tensor:
    """Symmetric MIM estimate with an evaluable x-prior.

    Mean over pairs of ``-0.5 (log q(z|x) + log q(x)) - w (log p(x|z) + log p(z))``.
    Single-source batches are allowed (they estimate one half of the mixture).
    """
    if isinstance(m.x_prior, MarginalX):
        raise LossConfigError("mim_loss needs an evaluable x-prior; use mim_marginal_loss for MarginalX")
    _require_balanced(batch)
    total = 0.0
    for t in _halves(batch, m):
        per = ad.scale(t["lq_zx"] + t["lq_x"], -0.5) - ad.scale(t["lp_xz"] + t["lp_z"], w)
        total = total + ad.sum(per)
    return ad.scale(total, 1.0 / batch.size)


def mim_marginal_loss(batch: SampleBatch, m: ModelBundle, w: float = 0.5) -> Tensor:
    """Symmetric MIM estimate for a marginal x-prior ``q(x) = E_p(z)[p(x|z)]``.

    ``0.5 * (L_enc + L_dec)`` where the encoder path uses the pair's own z as
    the importance sample and decoding pairs carry an auxiliary ``z'``.
    At ``w = 0.5`` every term has its textbook weight; otherwise only
    the terms of the decoder-distribution cross-entropy are rescaled.
    """
    if not isinstance(m.x_prior, MarginalX):
        raise LossConfigError("mim_marginal_loss requires a MarginalX x-prior")
    if not (batch.n_enc and batch.n_dec):
        raise LossConfigError("mim_marginal_loss needs both encoding and decoding pairs")
    if batch.dec_zaux is None:
        raise LossConfigError("decoding pairs are missing the auxiliary z' samples")
    e = _enc_terms(batch, m, with_qx=False)
    l_enc = ad.scale(ad.mean(e["lp_xz"] + e["lp_z"]), -(0.5 + w))
    d = _dec_terms(batch, m, with_qx=True)
    per_dec = ad.scale(d["lq_zx"] + d["lq_x"], -0.5) - ad.scale(d["lp_xz"] + d["lp_z"], w)
    l_dec = ad.mean(per_dec)
    return ad.scale(l_enc + l_dec, 0.5)


def amim_loss(batch: SampleBatch, m: ModelBundle, w: float = 0.5) -> Tensor:
    """Asymmetric MIM: both cross-entropies under the encoding distribution only."""
    _require_enc_only(batch, "A-MIM")
    t = _enc_terms(batch, m, with_qx=True)
    per = ad.scale(t["lq_zx"] + t["lq_x"], 0.5) + ad.scale(t["lp_xz"] + t["lp_z"], w)
    return -ad.mean(per)


def vae_loss(batch: SampleBatch, m: ModelBundle) -> Tensor:
    """Negative ELBO, ``-E[log p(x|z) + log P(z) - log q(z|x)]``."""
    if not isinstance(m.z_prior, AnchorPrior):
        raise LossConfigError("vae_loss uses the anchor P(z) as the latent prior")
    _require_enc_only(batch, "VAE")
    t = _enc_terms(batch, m, with_qx=False)
    return -ad.mean(t["lp_xz"] + t["lp_z"] - t["lq_zx"])


def _mixture_log_density(t: Dict[str, Tensor]) -> Tensor:
    return ad.logaddexp(t["lq_zx"] + t["lq_x"], t["lp_xz"] + t["lp_z"]) - LOG2


def ce_loss(batch: SampleBatch, m: ModelBundle) -> Tensor:
    """Cross-entropy to the model mixture, ``-mean log 0.5 (q(x,z) + p(x,z))``."""
    if isinstance(m.x_prior, MarginalX):
        raise LossConfigError("ce_loss needs an evaluable x-prior")
    _require_balanced(batch)
    total = 0.0
    for t in _halves(batch, m):
        total = total + ad.sum(_mixture_log_density(t))
    return ad.scale(total, -1.0 / batch.size)


def has_data_density(m: ModelBundle) -> bool:
    """True when the data anchor P(x) is a known density (synthetic generators)."""
    a = m.x_anchor
    if isinstance(a, StandardNormal):
        return True
    return isinstance(a, FixedMixture) and bool(np.all(a.stds > 0))


def sample_mixture_entropy(batch: SampleBatch, m: ModelBundle) -> Tensor:
    """Monte-Carlo estimate of the entropy of ``0.5 (P(x) q(z|x) + P(z) p(x|z))``
    on a balanced mixed batch, with the exact anchor densities."""
    if not has_data_density(m):
        raise LossConfigError("the sample-mixture entropy needs a data anchor with a known density")
    _require_balanced(batch)
    total = 0.0
    pairs = []
    if batch.n_enc:
        pairs.append((batch.enc_x, batch.enc_z, _enc_terms(batch, m, with_qx=False)))
    if batch.n_dec:
        pairs.append((batch.dec_x, batch.dec_z, _dec_terms(batch, m, with_qx=False)))
    for x, z, t in pairs:
        log_enc = anchor_log_prob(m.x_anchor, x) + t["lq_zx"]
        log_dec = anchor_log_prob(m.z_anchor, z) + t["lp_xz"]
        total = total + ad.sum(ad.logaddexp(log_enc, log_dec) - LOG2)
    return ad.scale(total, -1.0 / batch.size)


def entropy_reg_loss(kind: str, batch: SampleBatch, m: ModelBundle, w: float = 0.5, weight: float = 1.0) -> Tensor:
    """Entropy-as-MI-regularizer ablations.

    ``vae+h`` adds an estimate of the model encoder joint entropy
    ``-E[log q(z|x) + log q(x)]`` to the VAE loss; ``mim-h`` subtracts the
    sample-mixture entropy, which needs the data density to be known.
    """
    if kind == "vae+h":
        base = vae_loss(batch, m)
        t = _enc_terms(batch, m, with_qx=True)
        h = -ad.mean(t["lq_zx"] + t["lq_x"])
        return base + ad.scale(h, weight)
    if kind == "mim-h":
        base = mim_marginal_loss(batch, m, w) if isinstance(m.x_prior, MarginalX) else mim_loss(batch, m, w)
        return base - ad.scale(sample_mixture_entropy(batch, m), weight)
    raise LossConfigError(f"unknown entropy-regularised loss {kind!r}")


# ---------------------------------------------------------------------------
# config and dispatch


@dataclass
class LossConfig:
    kind: str = "mim-marginal"
    warmup_epochs: int = 3
    current_epoch: int = 0

    def weight(self) -> float:
        return warmup_weight(self.current_epoch, self.warmup_epochs)

    def validate(self, m: ModelBundle) -> None:
        validate_loss(self.kind, m)


def validate_loss(kind: str, m: ModelBundle) -> None:
    if kind not in LOSS_KINDS:
        raise LossConfigError(f"unknown loss kind {kind!r}; choose from {', '.join(LOSS_KINDS)}")
    marginal = isinstance(m.x_prior, MarginalX)
    if kind == "mim-marginal" and not marginal:
        raise LossConfigError("mim-marginal requires x_prior = marginal")
    if kind in ("mim", "ce") and marginal:
        raise LossConfigError(f"{kind} needs an evaluable x-prior; with x_prior = marginal use mim-marginal")
    if kind in ("vae", "vae+h"):
        if not isinstance(m.z_prior, AnchorPrior) or not marginal:
            raise LossConfigError(f"{kind} requires z_prior = anchor and x_prior = marginal (parameter parity)")
    if kind == "mim-h" and not has_data_density(m):
        raise LossConfigError("mim-h needs a data anchor with a known density (only the synthetic generators have one)")


def uses_decoding_pairs(kind: str) -> bool:
    return kind in ("mim", "mim-marginal", "ce", "mim-h")


def needs_aux(kind: str, m: ModelBundle) -> bool:
    return uses_decoding_pairs(kind) and isinstance(m.x_prior, MarginalX)


def compute_loss(kind: str, batch: SampleBatch, m: ModelBundle, w: float = 0.5) -> Tensor:
    if kind == "mim":
        return mim_loss(batch, m, w)
    if kind == "mim-marginal":
        return mim_marginal_loss(batch, m, w)
    if kind == "amim":
        return amim_loss(batch, m, w)
    if kind == "vae":
        return vae_loss(batch, m)
    if kind == "ce":
        return ce_loss(batch, m)
    if kind in ("vae+h", "mim-h"):
        return entropy_reg_loss(kind, batch, m, w)
    raise LossConfigError(f"unknown loss kind {kind!r}")


def batch_noise_for(kind: str, m: ModelBundle, x: np.ndarray, rng: np.random.Generator) -> BatchNoise:
    """Noise for one training batch: every data row becomes an encoding pair,
    plus an equal number of decoding pairs for the symmetric losses."""
    n_dec = x.shape[0] if uses_decoding_pairs(kind) else 0
    return draw_noise(m, x, n_dec, rng, aux=needs_aux(kind, m))
