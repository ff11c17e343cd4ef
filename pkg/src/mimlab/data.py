"""Synthetic GMM benchmarks, PCA projection and the dataset table format.

A dataset file is a UTF-8 CSV with header ``split,label,x0,...,x{d-1}`` plus
a ``<name>.meta.json`` sidecar carrying provenance.  Floats are written with
``repr`` so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .distributions import FixedMixture, anchor_sample

SPLITS = ("train", "val", "test")
SPLIT_SIZES = {"train": 50_000, "val": 10_000, "test": 10_000}
GMM_STD = 0.25
CIRCLE_RADIUS = 1.5
HIGHDIM_MEAN_STD = 2.0
HIGHDIM_DERIVATION_SEED = 20190521


class TableError(ValueError):
    pass


@dataclass
class GmmSpec:
    means: np.ndarray
    std: float
    weights: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.std <= 0:
            raise ValueError("std must be > 0")
        if self.weights.shape != (self.k,) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector with one entry per component")

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def anchor(self) -> FixedMixture:
        return FixedMixture(self.means, np.full(self.k, self.std), self.weights)

    def as_dict(self) -> dict:
        return {"means": self.means.tolist(), "std": self.std, "weights": self.weights.tolist()}


@dataclass
class Dataset:
    points: np.ndarray
    split: np.ndarray  # one of SPLITS per row
    labels: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.split = np.asarray(self.split, dtype=object)
        n = self.points.shape[0]
        if self.split.shape != (n,):
            raise ValueError("one split tag per row required")
        bad = set(self.split.tolist()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError("one label per row required")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def part(self, name: str) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        mask = self.split == name
        return self.points[mask], None if self.labels is None else self.labels[mask]

    @property
    def train(self):
        return self.part("train")[0]

    @property
    def val(self):
        return self.part("val")[0]

    @property
    def test(self):
        return self.part("test")[0]


def sample_gmm(spec: GmmSpec, seed: int, sizes=None, meta: Optional[dict] = None) -> Dataset:
    sizes = SPLIT_SIZES if sizes is None else sizes
    rng = np.random.default_rng(seed)
    anchor = spec.anchor()
    pts, labs, tags = [], [], []
    for name in SPLITS:
        n = sizes[name]
        if n == 0:
            continue
        x, lab = anchor_sample(anchor, n, rng)
        pts.append(x)
        labs.append(lab)
        tags.extend([name] * n)
    info = {"generator": "gmm", "seed": seed, "gmm": spec.as_dict(), "sizes": dict(sizes)}
    info.update(meta or {})
    return Dataset(np.concatenate(pts), np.array(tags, dtype=object), np.concatenate(labs), info)


def gmm_2d_spec() -> GmmSpec:
    angles = 2.0 * np.pi * np.arange(5) / 5
    means = CIRCLE_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return GmmSpec(means, GMM_STD, np.full(5, 0.2))


def gmm_2d_benchmark(seed: int, sizes=None) -> Tuple[GmmSpec, Dataset]:
    spec = gmm_2d_spec()
    return spec, sample_gmm(spec, seed, sizes, {"generator": "gmm2d"})


def gmm_highdim_spec(d: int = 20, k: int = 5) -> GmmSpec:
    """Means from N(0, 4 I) under the frozen derivation seed, redrawn until
    every pair of means is further apart than 4 std."""
    if d < 2:
        raise ValueError("d must be >= 2")
    rng = np.random.default_rng([HIGHDIM_DERIVATION_SEED, d])
    while True:
        means = HIGHDIM_MEAN_STD * rng.standard_normal((k, d))
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt(np.sum(diff ** 2, axis=-1))[np.triu_indices(k, 1)]
        if np.all(dist > 4 * GMM_STD):
            return GmmSpec(means, GMM_STD, np.full(k, 1.0 / k))


def gmm_highdim_benchmark(d: int = 20, seed: int = 0, sizes=None) -> Tuple[GmmSpec, Dataset]:
    spec = gmm_highdim_spec(d)
    return spec, sample_gmm(spec, seed, sizes, {"generator": "gmm_highdim", "d": d})


GENERATORS = {"gmm2d": gmm_2d_benchmark, "gmm_highdim": gmm_highdim_benchmark}


# ---------------------------------------------------------------------------
# PCA


class ConvergenceError(RuntimeError):
    pass


def pca_project(data, target_dim: int, tol: float = 1e-9, max_iter: int = 10_000, seed: int = 0):
    """Top principal directions by deflated power iteration.

    Returns ``(projected, explained_fraction, basis, mean)`` where ``basis``
    has orthonormal rows.
    """
    x = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n, D = x.shape
    if not 1 <= target_dim <= min(n, D):
        raise ValueError(f"target_dim must be in [1, {min(n, D)}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    total = float(np.trace(cov))
    rng = np.random.default_rng(seed)
    basis = np.zeros((target_dim, D))
    eig = np.zeros(target_dim)
    work = cov.copy()
    for i in range(target_dim):
        v = rng.standard_normal(D)
        v -= basis[:i].T @ (basis[:i] @ v)
        v /= np.linalg.norm(v)
        for it in range(1, max_iter + 1):
            w = work @ v
            w -= basis[:i].T @ (basis[:i] @ w)
            norm = np.linalg.norm(w)
            if norm == 0.0:
                # remaining spectrum is zero: any orthogonal direction will do
                w, norm = v, 1.0
            w = w / norm
            if w @ v < 0:
                w = -w
            if np.linalg.norm(w - v) < tol:
                v = w
                break
            v = w
        else:
            raise ConvergenceError(f"power iteration for component {i} did not converge in {max_iter} iterations")
        basis[i] = v
        eig[i] = float(v @ cov @ v)
        work = work - eig[i] * np.outer(v, v)
    explained = float(eig.sum() / total) if total > 0 else 1.0
    return xc @ basis.T, explained, basis, mean


# ---------------------------------------------------------------------------
# table I/O


def _atomic_write_text(path: Path, text: str):
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def meta_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".meta.json")


def save_table(ds: Dataset, path) -> None:
    path = Path(path)
    cols = ["split", "label"] + [f"x{j}" for j in range(ds.dim)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    labels = ds.labels if ds.labels is not None else [None] * ds.points.shape[0]
    for tag, lab, row in zip(ds.split, labels, ds.points):
        w.writerow([tag, "" if lab is None else int(lab)] + [repr(float(v)) for v in row])
    meta = dict(ds.meta)
    meta.update({"columns": cols, "rows": int(ds.points.shape[0]), "has_labels": ds.labels is not None})
    _atomic_write_text(path, buf.getvalue())
    _atomic_write_text(meta_path(path), json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_table(path) -> Dataset:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise TableError(f"{path}: empty file")
    mp = meta_path(path)
    meta = json.loads(mp.read_text(encoding="utf-8")) if mp.exists() else {}
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    dim = len(header) - 2
    expected = meta.get("columns") or (["split", "label"] + [f"x{j}" for j in range(max(dim, 0))])
    if len(header) != len(expected) or dim < 1:
        raise TableError(f"{path}:1: header has {len(header)} columns, expected {len(expected)}")
    for got, want in zip(header, expected):
        if got != want:
            raise TableError(f"{path}:1: header column {got!r} does not match expected {want!r}")
    tags, labels, rows = [], [], []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise TableError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
        if rec[0] not in SPLITS:
            raise TableError(f"{path}:{lineno}: unknown split {rec[0]!r}")
        try:
            labels.append(int(rec[1]) if rec[1] != "" else None)
            rows.append([float(v) for v in rec[2:]])
        except ValueError as exc:
            raise TableError(f"{path}:{lineno}: {exc}") from None
        tags.append(rec[0])
    if not rows:
        raise TableError(f"{path}: no data rows")
    has = [lab is not None for lab in labels]
    if any(has) and not all(has):
        raise TableError(f"{path}: labels must be given for every row or none")
    lab_arr = np.array(labels, dtype=np.int64) if all(has) else None
    meta = {k: v for k, v in meta.items() if k not in ("columns", "rows", "has_labels")}
    return Dataset(np.array(rows, dtype=np.float64), np.array(tags, dtype=object), lab_arr, meta)
