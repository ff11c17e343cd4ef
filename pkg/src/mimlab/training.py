"""Adam, the mini-batch training loop with warm-up and early stopping, and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError
from .distributions import FixedMixture, StandardNormal
from .networks import ModelBundle, ModelSpec, build_model
from .objectives import LossConfig, batch_noise_for, compute_loss, validate_loss, warmup_weight

DIVERGENCE_LIMIT = 1e6
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "warmup_weight")


class TrainingAborted(RuntimeError):
    def __init__(self, reason: str, epoch: int, batch: int):
        super().__init__(f"{reason} at epoch {epoch}, batch {batch}")
        self.reason, self.epoch, self.batch = reason, epoch, batch


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> AdamState:
    """Bias-corrected Adam update; ``params`` arrays are modified in place."""
    if set(params) != set(grads):
        raise ValueError("params and grads must share names")
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise ValueError(f"gradient shape {grads[k].shape} != parameter shape {p.shape} for {k!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    batch_size: int = 128
    warmup_epochs: int = 3
    max_epochs: int = 100
    patience: Optional[int] = None  # defaults to warmup_epochs (at least 1)
    samples_per_epoch: Optional[int] = None
    eval_every: int = 1
    seed: int = 0
    val_seed: int = 1

    def resolved_patience(self) -> int:
        p = self.warmup_epochs if self.patience is None else self.patience
        return max(1, int(p))

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class TrainResult:
    model: ModelBundle
    history: List[dict]
    best_epoch: int
    best_val: float
    rng_state: dict

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def history_to_csv(history: List[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def _snapshot(m: ModelBundle) -> Dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in m.parameters().items()}


def _restore(m: ModelBundle, snap: Dict[str, np.ndarray]):
    for k, p in m.parameters().items():
        p.data[...] = snap[k]


def validation_loss(m: ModelBundle, kind: str, noises, chunk_sizes) -> float:
    """Full-strength loss on fixed noise, row-weighted across chunks."""
    total = 0.0
    with ad.no_grad():
        for noise, n in zip(noises, chunk_sizes):
            total += compute_loss(kind, noise.build(m), m, 0.5).item() * n
    return total / sum(chunk_sizes)


def train(m: ModelBundle, loss: LossConfig, train_x: np.ndarray, val_x: np.ndarray, cfg: TrainConfig,
          val_loss_fn: Optional[Callable[[ModelBundle, int], float]] = None,
          log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Train ``m`` in place and return it holding the best-validation parameters.

    Every training row is an encoding pair; symmetric losses add an equal
    number of decoding pairs drawn from the anchors.  ``val_loss_fn`` replaces
    the validation estimate (it receives the model and the 1-based epoch).
    """
    cfg.validate()
    validate_loss(loss.kind, m)
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)

    val_rng = np.random.default_rng(cfg.val_seed)
    val_chunks = [val_x[s:s + 1000] for s in range(0, val_x.shape[0], 1000)]
    val_noise = [batch_noise_for(loss.kind, m, c, val_rng) for c in val_chunks]
    val_sizes = [c.shape[0] for c in val_chunks]

    params = m.parameters()
    leaves = list(params.values())
    state = AdamState()
    patience = cfg.resolved_patience()
    best_val, best_epoch, bad = math.inf, 0, 0
    best = _snapshot(m)
    history: List[dict] = []
    n_train = train_x.shape[0]
    per_epoch = n_train if cfg.samples_per_epoch is None else min(n_train, cfg.samples_per_epoch)

    for epoch in range(1, cfg.max_epochs + 1):
        loss.current_epoch = epoch
        w = warmup_weight(epoch, loss.warmup_epochs)
        order = rng.permutation(n_train)[:per_epoch]
        total, count = 0.0, 0
        for b, s in enumerate(range(0, per_epoch, cfg.batch_size), start=1):
            xb = train_x[order[s:s + cfg.batch_size]]
            try:
                noise = batch_noise_for(loss.kind, m, xb, rng)
                value = compute_loss(loss.kind, noise.build(m), m, w)
                ad.backward(value, wrt=leaves)
            except NonFiniteError:
                raise TrainingAborted("non-finite loss", epoch, b) from None
            lv = value.item()
            if lv > DIVERGENCE_LIMIT:
                raise TrainingAborted(f"divergence (loss {lv:.3g} > {DIVERGENCE_LIMIT:g})", epoch, b)
            adam_step(state, {k: p.data for k, p in params.items()}, {k: p.grad for k, p in params.items()})
            total += lv * xb.shape[0]
            count += xb.shape[0]
        train_loss = total / count
        if epoch % cfg.eval_every and epoch != cfg.max_epochs:
            history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": math.nan, "warmup_weight": w})
            continue
        try:
            val = val_loss_fn(m, epoch) if val_loss_fn else validation_loss(m, loss.kind, val_noise, val_sizes)
        except NonFiniteError:
            raise TrainingAborted("non-finite validation loss", epoch, 0) from None
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val, "warmup_weight": w})
        if log:
            log(f"epoch {epoch}: train {train_loss:.5f} val {val:.5f} w {w:.3f}")
        if val < best_val:
            best_val, best_epoch, bad = val, epoch, 0
            best = _snapshot(m)
        elif w >= 0.5:
            # the patience countdown starts once training runs at full strength
            bad += 1
            if bad >= patience:
                break
    _restore(m, best)
    return TrainResult(m, history, best_epoch, best_val, rng.bit_generator.state)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MIMCKPT1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _anchor_to_dict(a) -> dict:
    if isinstance(a, StandardNormal):
        return {"kind": "standard_normal", "dim": a.dim}
    if isinstance(a, FixedMixture):
        return {"kind": "fixed_mixture", "means": a.means.tolist(), "stds": a.stds.tolist(),
                "weights": a.weights.tolist()}
    raise CheckpointError(f"cannot serialise anchor {type(a).__name__}")


def _anchor_from_dict(d: dict):
    if d["kind"] == "standard_normal":
        return StandardNormal(int(d["dim"]))
    if d["kind"] == "fixed_mixture":
        return FixedMixture(np.array(d["means"]), np.array(d["stds"]), np.array(d["weights"]))
    raise CheckpointError(f"unknown anchor kind {d['kind']!r}")


def _u64(n: int) -> bytes:
    return struct.pack("<Q", n)


def checkpoint_bytes(m: ModelBundle, extra: Optional[dict] = None) -> bytes:
    payload = io.BytesIO()
    for name, p in m.parameters().items():
        nb = name.encode("utf-8")
        payload.write(_u64(len(nb)))
        payload.write(nb)
        payload.write(_u64(p.data.ndim))
        for d in p.data.shape:
            payload.write(_u64(d))
        payload.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    body = payload.getvalue()
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_spec": m.meta.get("spec"),
        "z_anchor": _anchor_to_dict(m.z_anchor),
        "x_anchor": _anchor_to_dict(m.x_anchor) if isinstance(m.x_anchor, (StandardNormal, FixedMixture)) else None,
        "payload_sha256": hashlib.sha256(body).hexdigest(),
    }
    meta.update(extra or {})
    mb = json.dumps(meta, sort_keys=True).encode("utf-8")
    return MAGIC + _u64(len(mb)) + mb + body


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(m: ModelBundle, path, extra: Optional[dict] = None) -> None:
    """``extra`` may carry the config echo, RNG state and best validation loss."""
    atomic_write_bytes(path, checkpoint_bytes(m, extra))


def read_checkpoint(path):
    """Return ``(metadata, {name: array})`` after integrity checks."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointError("truncated checkpoint header")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + mlen:
        raise CheckpointError("truncated metadata block")
    meta = json.loads(raw[16:16 + mlen].decode("utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} != supported {CHECKPOINT_VERSION}")
    body = raw[16 + mlen:]
    if hashlib.sha256(body).hexdigest() != meta.get("payload_sha256"):
        raise CheckpointError("payload checksum mismatch (corrupted or truncated)")
    arrays: Dict[str, np.ndarray] = {}
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("truncated parameter record")
        out = body[pos:pos + n]
        pos += n
        return out

    while pos < len(body):
        (nlen,) = struct.unpack("<Q", take(8))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    return meta, arrays


def load_into(m: ModelBundle, arrays: Dict[str, np.ndarray]) -> ModelBundle:
    params = m.parameters()
    missing = set(params) - set(arrays)
    unknown = set(arrays) - set(params)
    if missing or unknown:
        raise CheckpointError(f"parameter names differ (missing {sorted(missing)}, unexpected {sorted(unknown)})")
    for k, p in params.items():
        if arrays[k].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {k}: {arrays[k].shape} vs {p.data.shape}")
        p.data[...] = arrays[k]
    return m


def load_checkpoint(path) -> ModelBundle:
    meta, arrays = read_checkpoint(path)
    spec_d = meta.get("model_spec")
    if not spec_d:
        raise CheckpointError("checkpoint carries no model spec")
    spec = ModelSpec(**spec_d)
    placeholder = None
    if spec.z_prior == "vamp":
        placeholder = np.zeros((spec.prior_components, spec.x_dim))
    m = build_model(spec, np.random.default_rng(0), data=placeholder, z_anchor=_anchor_from_dict(meta["z_anchor"]))
    x_anchor = meta.get("x_anchor")
    m.x_anchor = _anchor_from_dict(x_anchor) if x_anchor else None
    m.meta["checkpoint"] = {k: v for k, v in meta.items() if k not in ("payload_sha256",)}
    return load_into(m, arrays)


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
