import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimlab import autodiff as ad
from mimlab import training as tr
from mimlab.objectives import LossConfig, batch_noise_for, compute_loss
from mimlab.training import AdamState, CheckpointError, TrainConfig, TrainingAborted

from conftest import gmm_anchor, random_bundle


def _data(seed=0, n=256, d=2):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d)), rng.standard_normal((64, d))


# -- Adam -------------------------------------------------------------------------


def test_adam_first_step():
    p = {"w": np.zeros((2, 3)), "b": np.full(4, 5.0)}
    tr.adam_step(AdamState(), p, {"w": np.ones((2, 3)), "b": np.ones(4)})
    np.testing.assert_allclose(p["w"], -1e-3 / (1 + 1e-8), rtol=0, atol=1e-18)
    assert abs(p["w"][0, 0] - (-9.99999e-4)) < 1e-9
    np.testing.assert_allclose(p["b"], 5.0 - 1e-3 / (1 + 1e-8), rtol=0, atol=1e-15)


def test_adam_zero_grads():
    state = AdamState()
    p = {"w": np.array([1.0, -2.0])}
    tr.adam_step(state, p, {"w": np.zeros(2)})
    tr.adam_step(state, p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert state.step == 2


def test_adam_matches_reference_trajectory():
    # textbook loop written independently
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((5, 3))
    p = {"w": np.zeros(3)}
    state = AdamState()
    ref, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, start=1):
        tr.adam_step(state, p, {"w": g.copy()})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-3 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-12, atol=1e-15)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        tr.adam_step(AdamState(), {"w": np.zeros(2)}, {"w": np.zeros(3)})
    with pytest.raises(ValueError):
        tr.adam_step(AdamState(), {"w": np.zeros(2)}, {"v": np.zeros(2)})


# -- training loop -------------------------------------------------------------------


def test_training_is_deterministic():
    x, v = _data()
    runs = []
    for _ in range(2):
        m = random_bundle(1)
        res = tr.train(m, LossConfig("mim-marginal", 2), x, v, TrainConfig(batch_size=32, max_epochs=3, seed=4))
        runs.append((res.history_csv(), tr.checkpoint_bytes(m)))
    assert runs[0] == runs[1]
    assert runs[0][0].splitlines()[0] == "epoch,train_loss,val_loss,warmup_weight"


def test_training_reduces_validation_loss():
    x, v = _data(1, n=512)
    m = random_bundle(2)
    res = tr.train(m, LossConfig("vae", 1), x, v, TrainConfig(batch_size=64, max_epochs=8))
    vals = [h["val_loss"] for h in res.history]
    assert res.best_val < vals[0]
    assert [h["warmup_weight"] for h in res.history[:2]] == [0.5, 0.5]


def _scripted(values, snaps):
    def fn(m, epoch):
        snaps[epoch] = tr._snapshot(m)
        return values[epoch - 1]
    return fn


def test_early_stop_contract():
    x, v = _data()
    m = random_bundle(3)
    snaps = {}
    cfg = TrainConfig(batch_size=64, max_epochs=10, patience=1)
    res = tr.train(m, LossConfig("mim-marginal", 0), x, v, cfg, val_loss_fn=_scripted([1.0, 2.0, 3.0, 4.0], snaps))
    assert len(res.history) == 2 and res.best_epoch == 1
    for k, p in m.parameters().items():
        np.testing.assert_array_equal(p.data, snaps[1][k])


def test_patience_waits_for_full_strength():
    x, v = _data()
    res = tr.train(random_bundle(3), LossConfig("mim-marginal", 3), x, v,
                   TrainConfig(batch_size=64, max_epochs=10, patience=1),
                   val_loss_fn=_scripted([1.0, 2.0, 3.0, 4.0, 5.0], {}))
    # epochs 1-2 run under warm-up and never count against patience
    assert len(res.history) == 3 and res.best_epoch == 1


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=6), st.integers(1, 3), st.integers(0, 2))
def test_returned_parameters_are_best_recorded(values, patience, warmup):
    x, v = _data(n=64)
    m = random_bundle(0, hidden=3)
    snaps = {}
    res = tr.train(m, LossConfig("mim-marginal", warmup), x, v,
                   TrainConfig(batch_size=64, max_epochs=len(values), patience=patience),
                   val_loss_fn=_scripted(values, snaps))
    seen = [h["val_loss"] for h in res.history]
    assert res.best_val == min(seen)
    assert seen.index(res.best_val) + 1 == res.best_epoch
    for k, p in m.parameters().items():
        np.testing.assert_array_equal(p.data, snaps[res.best_epoch][k])


def test_nan_input_aborts_with_coordinates():
    x, v = _data()
    x[:] = np.nan
    with pytest.raises(TrainingAborted) as exc:
        tr.train(random_bundle(0), LossConfig("mim-marginal"), x, v, TrainConfig(batch_size=64))
    assert exc.value.epoch == 1 and exc.value.batch == 1 and "non-finite" in str(exc.value)


def test_divergence_aborts():
    x, v = _data()
    with pytest.raises(TrainingAborted, match="divergence") as exc:
        tr.train(random_bundle(0), LossConfig("vae"), x * 1e5, v, TrainConfig(batch_size=64))
    assert (exc.value.epoch, exc.value.batch) == (1, 1)


def test_config_validation():
    for bad in (TrainConfig(batch_size=0), TrainConfig(max_epochs=0), TrainConfig(patience=0),
                TrainConfig(eval_every=0)):
        with pytest.raises(ValueError):
            bad.validate()
    assert TrainConfig(warmup_epochs=0).resolved_patience() == 1
    assert TrainConfig(warmup_epochs=4).resolved_patience() == 4


def test_samples_per_epoch_caps_batches(monkeypatch):
    x, v = _data(n=500)
    counts = []
    orig = tr.adam_step

    def counting(*a):
        counts.append(1)
        return orig(*a)

    monkeypatch.setattr(tr, "adam_step", counting)
    tr.train(random_bundle(0, x_prior="mixture"), LossConfig("amim", 1), x, v,
             TrainConfig(batch_size=50, max_epochs=1, samples_per_epoch=100))
    assert len(counts) == 2


# -- gradient flow ---------------------------------------------------------------------

COMBOS = [
    ("mim", "anchor", "mixture"), ("mim", "vamp", "mixture"), ("mim", "mixture", "mixture"),
    ("mim-marginal", "anchor", "marginal"), ("mim-marginal", "vamp", "marginal"),
    ("amim", "mixture", "marginal"), ("amim", "anchor", "mixture"), ("vae", "anchor", "marginal"),
    ("ce", "mixture", "mixture"), ("vae+h", "anchor", "marginal"), ("mim-h", "mixture", "mixture"),
    ("mim-h", "anchor", "marginal"),
]


@pytest.mark.parametrize("kind,z_prior,x_prior", COMBOS)
def test_gradient_flow_completeness(kind, z_prior, x_prior):
    m = random_bundle(5, z_prior=z_prior, x_prior=x_prior)
    m.x_anchor = gmm_anchor()
    x = np.random.default_rng(0).standard_normal((16, 2))
    loss = compute_loss(kind, batch_noise_for(kind, m, x, np.random.default_rng(1)).build(m), m, 0.5)
    params = m.parameters()
    grads = ad.backward(loss, wrt=list(params.values()))
    assert [k for k, p in params.items() if not np.any(grads[p.id] != 0)] == []


# -- checkpoints -------------------------------------------------------------------------


@pytest.mark.parametrize("z_prior,x_prior", [("anchor", "marginal"), ("vamp", "mixture"), ("mixture", "mixture")])
def test_checkpoint_round_trip(tmp_path, z_prior, x_prior):
    m = random_bundle(7, z_prior=z_prior, x_prior=x_prior)
    kind = "mim-marginal" if x_prior == "marginal" else "mim"
    noise = batch_noise_for(kind, m, np.random.default_rng(0).standard_normal((8, 2)), np.random.default_rng(1))
    before = compute_loss(kind, noise.build(m), m, 0.5).item()
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(m, path, {"best_val": 1.5})
    back = tr.load_checkpoint(path)
    for (k, p), (k2, p2) in zip(m.parameters().items(), back.parameters().items()):
        assert k == k2 and p.data.tobytes() == p2.data.tobytes()
    assert compute_loss(kind, noise.build(back), back, 0.5).item() == before
    assert back.meta["checkpoint"]["best_val"] == 1.5
    assert tr.checkpoint_bytes(back) == tr.checkpoint_bytes(m)
    assert back.x_anchor is None
    m.x_anchor = gmm_anchor()
    tr.save_checkpoint(m, path)
    anchor = tr.load_checkpoint(path).x_anchor
    assert anchor.means.tobytes() == m.x_anchor.means.tobytes() and anchor.stds.tolist() == [0.5, 0.8]


def test_checkpoint_corruption(tmp_path):
    m = random_bundle(0)
    raw = tr.checkpoint_bytes(m)
    cases = {
        "flip": raw[:-5] + bytes([raw[-5] ^ 1]) + raw[-4:],
        "trunc": raw[:-16],
        "magic": b"NOTACKPT" + raw[8:],
        "header": raw[:12],
    }
    for name, blob in cases.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(CheckpointError):
            tr.load_checkpoint(tmp_path / name)
    bumped = raw.replace(b'"version": 1', b'"version": 2')
    (tmp_path / "v").write_bytes(bumped[:8] + tr._u64(len(bumped) - len(raw) + int.from_bytes(raw[8:16], "little"))
                                 + bumped[16:])
    with pytest.raises(CheckpointError, match="version"):
        tr.load_checkpoint(tmp_path / "v")


def test_load_into_rejects_mismatch():
    m = random_bundle(0)
    arrays = {k: p.data.copy() for k, p in m.parameters().items()}
    other = random_bundle(0, hidden=4)
    with pytest.raises(CheckpointError, match="shape"):
        tr.load_into(other, arrays)
    with pytest.raises(CheckpointError, match="names"):
        tr.load_into(random_bundle(0, z_prior="mixture"), arrays)


def test_rng_state_is_reported():
    x, v = _data()
    res = tr.train(random_bundle(0), LossConfig("vae", 0), x, v, TrainConfig(batch_size=128, max_epochs=1))
    assert res.rng_state["bit_generator"] == "PCG64"
    assert math.isfinite(res.best_val)
