import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimlab import oracle as orc
from mimlab.oracle import DiscreteModel, SupportError


def loop_entropy(table):
    total = 0.0
    for v in np.ravel(table):
        if v > 0:
            total -= v * math.log(v)
    return total


def loop_kl(p, q):
    total = 0.0
    for a, b in zip(np.ravel(p), np.ravel(q)):
        if a > 0:
            total += a * (math.log(a) - math.log(b))
    return total


def loop_mi(joint):
    px, pz = joint.sum(axis=1), joint.sum(axis=0)
    total = 0.0
    for i in range(joint.shape[0]):
        for j in range(joint.shape[1]):
            if joint[i, j] > 0:
                total += joint[i, j] * math.log(joint[i, j] / (px[i] * pz[j]))
    return total


def random_joint(rng, shape):
    return rng.dirichlet(np.ones(int(np.prod(shape)))).reshape(shape)


def test_entropy_examples():
    assert orc.entropy(np.full(4, 0.25)) == pytest.approx(1.3862944, abs=1e-7)
    assert orc.entropy([0.0, 1.0, 0.0]) == 0.0
    j = random_joint(np.random.default_rng(0), (3, 3))
    assert abs(orc.entropy(j) - loop_entropy(j)) < 1e-14


def test_kl_examples():
    rng = np.random.default_rng(1)
    p, q = random_joint(rng, (3, 2)), random_joint(rng, (3, 2))
    assert orc.kl(p, p) == 0.0
    assert abs(orc.kl(p, q) - loop_kl(p, q)) < 1e-14
    with pytest.raises(SupportError):
        orc.kl([0.5, 0.5, 0.0], [0.0, 0.0, 1.0])


def test_jsd_and_mi_examples():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p, q = random_joint(rng, (4,)), random_joint(rng, (4,))
        assert 0 <= orc.jsd(p, q) <= math.log(2)
        assert orc.jsd(p, q) <= orc.skl(p, q) / 2 + 1e-15
    assert orc.jsd(p, p) == 0.0
    assert orc.jsd([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.log(2), abs=1e-15)
    assert abs(orc.mutual_information(np.outer([0.3, 0.7], [0.1, 0.5, 0.4]))) < 1e-15
    j = random_joint(rng, (3, 4))
    assert abs(orc.mutual_information(j) - loop_mi(j)) < 1e-14


def test_model_validation():
    m = orc.random_model(np.random.default_rng(0), 3, 2)
    with pytest.raises(ValueError):
        DiscreteModel(m.Px, m.Pz, m.q_zx * 1.1, m.p_xz, m.qx, m.pz)
    with pytest.raises(ValueError):
        DiscreteModel(m.Px, m.Pz, m.q_zx, m.p_xz.T, m.qx, m.pz)


def test_jsd_identity_cases():
    rng = np.random.default_rng(3)
    c = orc.consistent_model(rng, 4, 3)
    assert orc.jsd(c.encoding(), c.decoding()) < 1e-15
    assert orc.verify_jsd_entropy_identity(c) < 1e-12
    for _ in range(100):
        assert orc.verify_jsd_entropy_identity(orc.random_model(rng, 4, 3)) < 1e-12
    perm = np.eye(3)[[2, 0, 1]]
    det = DiscreteModel(np.full(3, 1 / 3), np.array([.2, .3, .5]), perm, np.eye(3), np.full(3, 1 / 3),
                        np.full(3, 1 / 3))
    assert orc.verify_jsd_entropy_identity(det) < 1e-12


def test_mim_decomposition_cases():
    rng = np.random.default_rng(4)
    d = orc.verify_mim_decomposition(orc.consistent_model(rng, 3, 4))
    assert abs(d["r_mim"]) < 1e-12 and d["ce_plus_reg"] < 1e-12 and d["four_term"] < 1e-12
    for _ in range(100):
        d = orc.verify_mim_decomposition(orc.random_model(rng, 4, 3))
        assert d["ce_plus_reg"] < 1e-12 and d["four_term"] < 1e-12 and d["r_mim"] >= -1e-12


def test_prior_mismatch_is_picked_up_exactly():
    c = orc.consistent_model(np.random.default_rng(5), 3, 3)
    qx = np.array([0.6, 0.3, 0.1])
    m = DiscreteModel(c.Px, c.Pz, c.q_zx, c.p_xz, qx, c.pz)
    term = orc.kl(m.Px, m.qx)
    assert term > 0
    assert orc.verify_mim_decomposition(m)["four_term"] < 1e-12
    # with only qx moved, the two joint KLs reduce to the same prior KL
    expected = orc.r_h(m.encoding(), m.decoding()) + 0.25 * term + 0.25 * (0.0 + term)
    assert abs(orc.mim_objective(m) - expected) < 1e-12


def test_vae_identity_cases():
    rng = np.random.default_rng(6)
    assert orc.verify_vae_identity(orc.consistent_model(rng, 3, 2)) < 1e-12
    for _ in range(100):
        assert orc.verify_vae_identity(orc.random_model(rng, 3, 4)) < 1e-12
    m = orc.random_model(rng, 3, 4)
    collapsed = DiscreteModel(m.Px, m.Pz, np.tile(m.Pz, (3, 1)), m.p_xz, m.qx, m.pz)
    assert orc.verify_vae_identity(collapsed) < 1e-12
    # with q(z|x) = P(z) the divergence is E[-log p(x|z)] - H(x)
    enc = collapsed.encoding()
    expected = -np.sum(enc * np.log(collapsed.p_xz.T)) - orc.entropy(m.Px)
    assert abs(orc.kl(enc, collapsed.decoding()) - expected) < 1e-12


def test_amim_bound_cases():
    rng = np.random.default_rng(7)
    assert orc.verify_amim_bound(orc.consistent_model(rng, 3, 3))["upper"] < 1e-12
    for _ in range(100):
        g = orc.verify_amim_bound(orc.random_model(rng, 2, 5))
        assert g["upper"] >= -1e-12 and g["lower"] >= -1e-12
    c = orc.consistent_model(rng, 3, 3)
    permuted = DiscreteModel(c.Px, c.Pz, c.q_zx, c.p_xz[:, [1, 2, 0]], c.qx, c.pz)
    assert orc.verify_amim_bound(permuted)["upper"] > 1e-3


def test_skl_relation_cases():
    rng = np.random.default_rng(8)
    c = orc.consistent_model(rng, 2, 3)
    assert orc.skl(c.encoding(), c.decoding()) < 1e-15
    assert orc.verify_skl_jsd_relation(c) < 1e-15
    for _ in range(100):
        assert orc.verify_skl_jsd_relation(orc.random_model(rng, 5, 2)) < 1e-12
    m = orc.random_model(rng, 3, 3)
    row = np.array([1e-9, 0.4, 0.6 - 1e-9])
    q_zx = m.q_zx.copy()
    q_zx[0] = row
    assert orc.verify_skl_jsd_relation(DiscreteModel(m.Px, m.Pz, q_zx, m.p_xz, m.qx, m.pz)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_every_identity_on_random_sizes(nx, nz, seed):
    m = orc.random_model(np.random.default_rng(seed), nx, nz)
    d = orc.verify_mim_decomposition(m)
    assert max(d["ce_plus_reg"], d["four_term"]) < 1e-12
    assert orc.verify_jsd_entropy_identity(m) < 1e-12
    assert orc.verify_vae_identity(m) < 1e-12
    assert orc.verify_skl_jsd_relation(m) < 1e-12
    assert orc.jsd(m.encoding(), m.decoding()) <= 0.5 * orc.skl(m.encoding(), m.decoding()) + 1e-15
    assert orc.ce_objective(m) <= orc.mim_objective(m) + 1e-12


def test_run_verification_passes():
    report = orc.run_verification(100, seed=0)
    assert set(report) == set(orc.IDENTITIES)
    assert all(r["passed"] for r in report.values())


def test_verification_catches_a_sign_error(monkeypatch):
    monkeypatch.setattr(orc, "r_h", lambda enc, dec: -0.5 * (orc.entropy(enc) + orc.entropy(dec)))
    report = orc.run_verification(10, seed=0)
    assert not report["jsd_entropy"]["passed"]
    assert not report["mim_four_term"]["passed"]
