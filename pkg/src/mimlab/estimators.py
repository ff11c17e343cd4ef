"""Post-hoc evaluation metrics for trained bundles."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
from scipy.special import digamma, logsumexp

from . import autodiff as ad
from .distributions import StandardNormal, gaussian_log_prob
from .networks import ModelBundle, decode, encode, prior_log_prob_z

KSG_JITTER = 1e-10


# ---------------------------------------------------------------------------
# KSG mutual information


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def _maxnorm_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.abs(a[:, None, 0] - b[None, :, 0])
    for j in range(1, a.shape[1]):
        np.maximum(out, np.abs(a[:, None, j] - b[None, :, j]), out=out)
    return out


def ksg_mi(xs, zs, k: int = 5, jitter: float = KSG_JITTER, seed: int = 0, chunk: int = 256) -> float:
    """Kraskov-Stoegbauer-Grassberger estimator (first variant), in nats.

    Exact brute-force neighbour search under the max-norm.  ``jitter`` adds
    uniform noise of that amplitude, drawn from ``seed``, to break ties; set it
    to 0 to disable.
    """
    x, z = _as_2d(xs), _as_2d(zs)
    n = x.shape[0]
    if z.shape[0] != n:
        raise ValueError(f"xs and zs must be paired (got {n} and {z.shape[0]} rows)")
    if k < 1 or n <= k:
        raise ValueError(f"need n > k >= 1 (n={n}, k={k})")
    if jitter > 0:
        rng = np.random.default_rng(seed)
        x = x + jitter * rng.uniform(-1.0, 1.0, size=x.shape)
        z = z + jitter * rng.uniform(-1.0, 1.0, size=z.shape)
    elif np.any(np.ptp(x, axis=0) == 0) or np.any(np.ptp(z, axis=0) == 0):
        raise ValueError("zero-variance coordinate; enable jitter to break neighbour ties")

    nx = np.empty(n, dtype=np.int64)
    nz = np.empty(n, dtype=np.int64)
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        dx = _maxnorm_dist(x[s:e], x)
        dz = _maxnorm_dist(z[s:e], z)
        joint = np.maximum(dx, dz)
        # the k-th neighbour is index k once self (distance 0) sits at index 0
        eps = np.partition(joint, k, axis=1)[:, k]
        nx[s:e] = np.count_nonzero(dx < eps[:, None], axis=1) - 1
        nz[s:e] = np.count_nonzero(dz < eps[:, None], axis=1) - 1
    # histogram of counts makes the average independent of row order
    hist = np.bincount(nx, minlength=n) + np.bincount(nz, minlength=n)
    used = np.nonzero(hist)[0]
    avg = float(np.sum(hist[used] * digamma(used + 1.0))) / n
    return float(digamma(k) + digamma(n) - avg)


# ---------------------------------------------------------------------------
# likelihood estimators


def _log_weights(m: ModelBundle, x: np.ndarray, eps: np.ndarray, q=None) -> np.ndarray:
    q = encode(m, x) if q is None else q
    z = q.mean.data + np.exp(q.log_std.data) * eps
    lw = (gaussian_log_prob(x, decode(m, z)).data + prior_log_prob_z(m, z).data
          - gaussian_log_prob(z, q).data)
    if not np.all(np.isfinite(lw)):
        raise FloatingPointError("non-finite importance weights")
    return lw


def nll_importance_per_point(x, m: ModelBundle, S: int, rng: np.random.Generator) -> np.ndarray:
    if S < 1:
        raise ValueError("S must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    with ad.no_grad():
        q = encode(m, x)
        lw = np.stack([_log_weights(m, x, rng.standard_normal((x.shape[0], m.z_dim)), q) for _ in range(S)])
    return -(logsumexp(lw, axis=0) - math.log(S))


def nll_importance(x, m: ModelBundle, S: int, rng: np.random.Generator) -> float:
    """Importance-sampled ``-log p(x)`` with the encoder as proposal, averaged over rows."""
    return float(np.mean(nll_importance_per_point(x, m, S, rng)))


def nll_encoder_bound(x, m: ModelBundle, rng: np.random.Generator) -> float:
    """Single-sample bound ``-[log p(x|z) + log p(z) - log q(z|x)]``, ``z ~ q(z|x)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    with ad.no_grad():
        lw = _log_weights(m, x, rng.standard_normal((x.shape[0], m.z_dim)))
    return float(-np.mean(lw))


def recon_rmse(data, m: ModelBundle, rng: Optional[np.random.Generator] = None) -> float:
    """RMSE of the deterministic mean-to-mean reconstruction (``rng`` is unused)."""
    x = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if x.shape[0] < 1:
        raise ValueError("need at least one point")
    with ad.no_grad():
        xr = decode(m, encode(m, x).mean.data).mean.data
    return float(np.sqrt(np.mean((x - xr) ** 2)))


def posterior_means(data, m: ModelBundle) -> np.ndarray:
    with ad.no_grad():
        return encode(m, np.atleast_2d(np.asarray(data, dtype=np.float64))).mean.data.copy()


def posterior_samples(data, m: ModelBundle, rng: np.random.Generator) -> np.ndarray:
    with ad.no_grad():
        q = encode(m, np.atleast_2d(np.asarray(data, dtype=np.float64)))
    return q.mean.data + np.exp(q.log_std.data) * rng.standard_normal(q.mean.shape)


def collapse_index(data, m: ModelBundle) -> float:
    """Mean posterior std relative to the unit prior std (1 = full collapse)."""
    if not isinstance(m.z_anchor, StandardNormal):
        raise ValueError("collapse_index is defined relative to a standard-normal latent anchor")
    with ad.no_grad():
        q = encode(m, np.atleast_2d(np.asarray(data, dtype=np.float64)))
    return float(np.mean(np.exp(q.log_std.data)))


# ---------------------------------------------------------------------------
# k-NN probe


@dataclass
class LabeledEmbedding:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.labels = np.asarray(self.labels).astype(np.int64).reshape(-1)
        if self.points.shape[0] != self.labels.shape[0]:
            raise ValueError("points and labels disagree on row count")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("embedding has non-finite entries")


def knn_predict(train: LabeledEmbedding, test_points, k: int = 5, chunk: int = 512) -> np.ndarray:
    """Majority vote of the ``k`` Euclidean nearest neighbours.  Ties go to the
    class with the smallest summed distance, then to the lowest label."""
    tp = np.atleast_2d(np.asarray(test_points, dtype=np.float64))
    n = train.points.shape[0]
    if tp.shape[1] != train.points.shape[1]:
        raise ValueError(f"embedding dims differ ({tp.shape[1]} vs {train.points.shape[1]})")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n_train (k={k}, n_train={n})")
    classes, codes = np.unique(train.labels, return_inverse=True)
    sq_train = np.sum(train.points ** 2, axis=1)
    out = np.empty(tp.shape[0], dtype=np.int64)
    rows = np.arange(min(chunk, tp.shape[0]))[:, None]
    for s in range(0, tp.shape[0], chunk):
        q = tp[s:s + chunk]
        d2 = np.sum(q ** 2, axis=1)[:, None] + sq_train[None, :] - 2.0 * q @ train.points.T
        idx = np.argpartition(d2, k - 1, axis=1)[:, :k] if k < n else np.tile(np.arange(n), (q.shape[0], 1))
        r = rows[:q.shape[0]]
        dist = np.sqrt(np.maximum(d2[r, idx], 0.0))
        lab = codes[idx]
        votes = np.zeros((q.shape[0], classes.size))
        dsum = np.zeros((q.shape[0], classes.size))
        np.add.at(votes, (np.broadcast_to(r, lab.shape), lab), 1.0)
        np.add.at(dsum, (np.broadcast_to(r, lab.shape), lab), dist)
        best = votes == votes.max(axis=1, keepdims=True)
        out[s:s + chunk] = classes[np.argmin(np.where(best, dsum, np.inf), axis=1)]
    return out


def knn_classify(train: LabeledEmbedding, test: LabeledEmbedding, k: int = 5) -> float:
    pred = knn_predict(train, test.points, k)
    return float(np.mean(pred == test.labels))


# ---------------------------------------------------------------------------
# records


@dataclass
class MetricsRecord:
    seed: int
    loss_kind: str
    hidden: int
    latent_dim: int
    epochs: int
    mi_ksg: float
    nll_iw: float
    nll_enc_bound: float
    recon_rmse: float
    knn_acc: float
    collapse_index: float

    def __post_init__(self):
        if not (math.isnan(self.knn_acc) or 0.0 <= self.knn_acc <= 1.0):
            raise ValueError("knn_acc must lie in [0, 1]")
        if self.recon_rmse < 0:
            raise ValueError("recon_rmse must be >= 0")

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def to_row(self) -> list:
        return [repr(v) if isinstance(v, float) else str(v) for v in asdict(self).values()]

    @classmethod
    def from_row(cls, row: dict) -> "MetricsRecord":
        kw = {}
        for f in fields(cls):
            v = row[f.name]
            kw[f.name] = int(v) if f.type in ("int", int) else (v if f.type in ("str", str) else float(v))
        return cls(**kw)


METRIC_COLUMNS = MetricsRecord.columns()


@dataclass
class EvalSpec:
    ksg_k: int = 5
    ksg_n: int = 10000
    nll_samples: int = 32
    knn_k: int = 5
    knn_train_n: int = 10000
    seed: int = 0


def evaluate(m: ModelBundle, train_x, test_x, spec: EvalSpec, train_labels=None, test_labels=None) -> dict:
    """All metrics on ``test_x``.  KSG pairs each test row with one ``z ~ q(z|x)``."""
    rng = np.random.default_rng(spec.seed)
    test_x = np.asarray(test_x, dtype=np.float64)
    xs = test_x[:spec.ksg_n]
    zs = posterior_samples(xs, m, rng)
    out = {
        "mi_ksg": ksg_mi(xs, zs, spec.ksg_k, seed=spec.seed),
        "nll_iw": nll_importance(test_x, m, spec.nll_samples, rng),
        "nll_enc_bound": nll_encoder_bound(test_x, m, rng),
        "recon_rmse": recon_rmse(test_x, m),
        "knn_acc": float("nan"),
        "collapse_index": collapse_index(test_x, m) if isinstance(m.z_anchor, StandardNormal) else float("nan"),
    }
    if train_labels is not None and test_labels is not None:
        tr = np.asarray(train_x)[:spec.knn_train_n]
        train = LabeledEmbedding(posterior_means(tr, m), np.asarray(train_labels)[:spec.knn_train_n])
        test = LabeledEmbedding(posterior_means(test_x, m), test_labels)
        out["knn_acc"] = knn_classify(train, test, spec.knn_k)
    return out
