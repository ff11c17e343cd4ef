"""Exact finite-alphabet versions of every quantity in the MIM objective.

Joint tables are ``|X| x |Z|`` arrays indexed ``[x, z]``.  All quantities are
in nats with the convention ``0 log 0 = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

TOL = 1e-12


class SupportError(ValueError):
    """KL or cross-entropy asked for where P is not absolutely continuous w.r.t. Q."""


def _check_table(p: np.ndarray, name="table"):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise ValueError(f"{name} is not a probability table (sum={p.sum()!r})")
    return p


def entropy(p) -> float:
    p = _check_table(p).ravel()
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def cross_entropy(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64).ravel(), np.asarray(q, dtype=np.float64).ravel()
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise SupportError("support of P is not contained in support of Q")
    return float(-np.sum(p[mask] * np.log(q[mask])))


def kl(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64).ravel(), np.asarray(q, dtype=np.float64).ravel()
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise SupportError("support of P is not contained in support of Q")
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def jsd(p, q) -> float:
    m = 0.5 * (np.asarray(p, dtype=np.float64) + np.asarray(q, dtype=np.float64))
    return 0.5 * (kl(p, m) + kl(q, m))


def skl(p, q) -> float:
    """Symmetric KL, ``0.5 (KL(p||q) + KL(q||p))``."""
    return 0.5 * (kl(p, q) + kl(q, p))


def mutual_information(joint) -> float:
    j = _check_table(joint)
    return entropy(j.sum(axis=1)) + entropy(j.sum(axis=0)) - entropy(j)


@dataclass
class DiscreteModel:
    """Anchors, conditionals and model priors on finite alphabets.

    ``q_zx[x, z] = q(z|x)`` and ``p_xz[z, x] = p(x|z)``.
    """

    Px: np.ndarray
    Pz: np.ndarray
    q_zx: np.ndarray
    p_xz: np.ndarray
    qx: np.ndarray
    pz: np.ndarray

    def __post_init__(self):
        nx, nz = self.q_zx.shape
        if self.p_xz.shape != (nz, nx):
            raise ValueError("p(x|z) table must be |Z| x |X|")
        for name, v, n in (("Px", self.Px, nx), ("qx", self.qx, nx), ("Pz", self.Pz, nz), ("pz", self.pz, nz)):
            if v.shape != (n,):
                raise ValueError(f"{name} must have length {n}")
            _check_table(v, name)
        for name, c in (("q(z|x)", self.q_zx), ("p(x|z)", self.p_xz)):
            if np.any(c < 0) or np.max(np.abs(c.sum(axis=1) - 1.0)) > 1e-12:
                raise ValueError(f"rows of {name} must sum to 1")

    # joints, indexed [x, z]
    def encoding(self) -> np.ndarray:
        return self.Px[:, None] * self.q_zx

    def decoding(self) -> np.ndarray:
        return (self.Pz[:, None] * self.p_xz).T

    def q_joint(self) -> np.ndarray:
        return self.qx[:, None] * self.q_zx

    def p_joint(self) -> np.ndarray:
        return (self.pz[:, None] * self.p_xz).T

    def sample_mixture(self) -> np.ndarray:
        return 0.5 * (self.encoding() + self.decoding())

    def model_mixture(self) -> np.ndarray:
        return 0.5 * (self.q_joint() + self.p_joint())


def _simplex(rng, shape, floor=1e-6):
    x = rng.dirichlet(np.ones(shape[-1]), size=shape[:-1]) if len(shape) > 1 else rng.dirichlet(np.ones(shape[0]))
    x = np.maximum(x, floor)
    return x / x.sum(axis=-1, keepdims=True)


def random_model(rng: np.random.Generator, nx: int, nz: int, floor: float = 1e-6) -> DiscreteModel:
    """Dirichlet(1) rows floored at ``floor`` and renormalised (strictly positive)."""
    return DiscreteModel(
        Px=_simplex(rng, (nx,), floor), Pz=_simplex(rng, (nz,), floor),
        q_zx=_simplex(rng, (nx, nz), floor), p_xz=_simplex(rng, (nz, nx), floor),
        qx=_simplex(rng, (nx,), floor), pz=_simplex(rng, (nz,), floor),
    )


def consistent_model(rng: np.random.Generator, nx: int, nz: int) -> DiscreteModel:
    """Model whose encoding, decoding and both model joints coincide."""
    joint = _simplex(rng, (nx * nz,)).reshape(nx, nz)
    px, pz = joint.sum(axis=1), joint.sum(axis=0)
    q_zx = joint / px[:, None]
    p_xz = (joint / pz[None, :]).T
    return DiscreteModel(px, pz, q_zx, p_xz, px.copy(), pz.copy())


# ---------------------------------------------------------------------------
# objective terms


def r_h(enc: np.ndarray, dec: np.ndarray) -> float:
    """Average joint entropy of the encoding and decoding joints."""
    return 0.5 * (entropy(enc) + entropy(dec))


def mim_objective(model: DiscreteModel) -> float:
    ms = model.sample_mixture()
    return 0.5 * (cross_entropy(ms, model.q_joint()) + cross_entropy(ms, model.p_joint()))


def ce_objective(model: DiscreteModel) -> float:
    return cross_entropy(model.sample_mixture(), model.model_mixture())


def r_mim(model: DiscreteModel) -> float:
    ms = model.sample_mixture()
    return 0.5 * (kl(ms, model.p_joint()) + kl(ms, model.q_joint())) - kl(ms, model.model_mixture())


def amim_objective(model: DiscreteModel) -> float:
    enc = model.encoding()
    return 0.5 * (cross_entropy(enc, model.q_joint()) + cross_entropy(enc, model.p_joint()))


def vae_as_ce(model: DiscreteModel) -> float:
    enc, dec = model.encoding(), model.decoding()
    return 0.5 * (cross_entropy(enc, enc) + cross_entropy(enc, dec)) - entropy(enc)


# ---------------------------------------------------------------------------
# identity checks


def verify_jsd_entropy_identity(model: DiscreteModel) -> float:
    """``|H(M_S) - (JSD + R_H)|``."""
    enc, dec = model.encoding(), model.decoding()
    return abs(entropy(model.sample_mixture()) - (jsd(enc, dec) + r_h(enc, dec)))


def verify_mim_decomposition(model: DiscreteModel) -> Dict[str, float]:
    """Residuals of ``L_MIM = L_CE + R_MIM`` and of the four-term expansion."""
    enc, dec = model.encoding(), model.decoding()
    l_mim = mim_objective(model)
    reg = r_mim(model)
    if reg < -TOL:
        raise AssertionError(f"R_MIM negative: {reg}")
    parts = (r_h(enc, dec)
             + 0.25 * (kl(model.Pz, model.pz) + kl(model.Px, model.qx))
             + 0.25 * (kl(enc, model.p_joint()) + kl(dec, model.q_joint())))
    return {
        "ce_plus_reg": abs(l_mim - (ce_objective(model) + reg)),
        "four_term": abs(l_mim - parts),
        "r_mim": reg,
    }


def verify_vae_identity(model: DiscreteModel) -> float:
    """Residual of the cross-entropy form of the VAE loss against
    ``0.5 KL(encoding || decoding)`` (the two agree up to that factor)."""
    return abs(vae_as_ce(model) - 0.5 * kl(model.encoding(), model.decoding()))


def verify_amim_bound(model: DiscreteModel) -> Dict[str, float]:
    """Gaps of ``L_A-MIM >= CE(enc, M_theta) >= H(enc)``."""
    enc = model.encoding()
    mid = cross_entropy(enc, model.model_mixture())
    gaps = {"upper": amim_objective(model) - mid, "lower": mid - entropy(enc)}
    for k, g in gaps.items():
        if g < -TOL:
            raise AssertionError(f"A-MIM bound violated ({k} gap {g})")
    return gaps


def verify_skl_jsd_relation(model: DiscreteModel) -> float:
    """``|0.5 SKL - (0.5 [KL(M_S||enc) + KL(M_S||dec)] + JSD)|``."""
    enc, dec = model.encoding(), model.decoding()
    ms = model.sample_mixture()
    return abs(0.5 * skl(enc, dec) - (0.5 * (kl(ms, enc) + kl(ms, dec)) + jsd(enc, dec)))


IDENTITIES = ("jsd_entropy", "mim_ce_plus_reg", "mim_four_term", "vae_as_ce", "amim_bound", "skl_jsd")


def run_verification(n_models: int = 100, seed: int = 0, tol: float = TOL) -> Dict[str, dict]:
    """Max residual of every identity over random strictly-positive models
    with alphabet sizes drawn from {2, 3, 4, 5}."""
    rng = np.random.default_rng(seed)
    worst = {k: 0.0 for k in IDENTITIES}
    bound_ok = True
    reg_ok = True
    for _ in range(n_models):
        nx, nz = rng.integers(2, 6, size=2)
        model = random_model(rng, int(nx), int(nz))
        worst["jsd_entropy"] = max(worst["jsd_entropy"], verify_jsd_entropy_identity(model))
        try:
            d = verify_mim_decomposition(model)
        except AssertionError:
            reg_ok = False
            d = {"ce_plus_reg": np.inf, "four_term": np.inf}
        worst["mim_ce_plus_reg"] = max(worst["mim_ce_plus_reg"], d["ce_plus_reg"])
        worst["mim_four_term"] = max(worst["mim_four_term"], d["four_term"])
        worst["vae_as_ce"] = max(worst["vae_as_ce"], verify_vae_identity(model))
        try:
            gaps = verify_amim_bound(model)
            # bound holds; record the most negative gap (0 if none)
            worst["amim_bound"] = max(worst["amim_bound"], max(0.0, -min(gaps.values())))
        except AssertionError:
            bound_ok = False
            worst["amim_bound"] = np.inf
        worst["skl_jsd"] = max(worst["skl_jsd"], verify_skl_jsd_relation(model))
    report = {}
    for k, v in worst.items():
        ok = v < tol
        if k == "amim_bound":
            ok = ok and bound_ok
        if k == "mim_ce_plus_reg":
            ok = ok and reg_ok
        report[k] = {"max_residual": v, "passed": bool(ok)}
    return report
