"""Command-line experiment runner: ``mimlab {generate,train,eval,sweep,verify} [config] [key=value ...]``.

Exit codes: 0 success, 1 validation error, 2 runtime abort, 3 partial sweep failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import oracle
from .config import ConfigError, ExperimentConfig, load_config
from .data import GENERATORS, Dataset, TableError, load_table, save_table
from .distributions import FixedMixture
from .estimators import METRIC_COLUMNS, MetricsRecord, evaluate, posterior_means
from .networks import MarginalX, AnchorPrior, build_model, vae_param_count
from .objectives import LossConfig, LossConfigError, validate_loss
from .training import (
    CheckpointError, TrainingAborted, atomic_write_bytes, history_to_csv, load_checkpoint, save_checkpoint, train,
)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3

CHECKPOINT_NAME = "model.ckpt"
HISTORY_NAME = "history.csv"
METRICS_NAME = "metrics.csv"
CONFIG_NAME = "config.yaml"
AGG_STATS = ("mean", "std")


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# datasets


def dataset_file(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / f"{cfg.dataset}.csv"


def make_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "gmm2d":
        return GENERATORS["gmm2d"](cfg.data_seed)[1]
    if cfg.dataset == "gmm_highdim":
        return GENERATORS["gmm_highdim"](cfg.data_dim, cfg.data_seed)[1]
    raise ConfigError(f"unknown dataset generator {cfg.dataset!r}; valid names: {', '.join(GENERATORS)}")


def resolve_dataset(cfg: ExperimentConfig) -> Dataset:
    """Generators are pure functions of the config, so they are rebuilt in memory."""
    if cfg.dataset in GENERATORS:
        return make_dataset(cfg)
    return load_table(cfg.dataset)


def cmd_generate(cfg: ExperimentConfig) -> Path:
    ds = make_dataset(cfg)
    ds.meta["config"] = cfg.to_dict()
    out = dataset_file(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_table(ds, out)
    _log(f"wrote {ds.points.shape[0]} rows to {out}")
    return out


# ---------------------------------------------------------------------------
# train / eval


def build_for(cfg: ExperimentConfig, ds: Dataset):
    m = build_model(cfg.model_spec(ds.dim), np.random.default_rng(cfg.seed), data=ds.train)
    gmm = ds.meta.get("gmm") if ds.meta else None
    if gmm is not None:
        # synthetic data: the true density is known and replaces the empirical anchor
        k = len(gmm["weights"])
        m.x_anchor = FixedMixture(np.array(gmm["means"]), np.full(k, float(gmm["std"])), np.array(gmm["weights"]))
    validate_loss(cfg.loss, m)
    return m


def cmd_train(cfg: ExperimentConfig, out_dir: Optional[Path] = None):
    out = Path(out_dir or cfg.output_dir)
    ds = resolve_dataset(cfg)
    m = build_for(cfg, ds)  # validates before any compute
    n = m.n_params()
    if cfg.loss in ("vae", "vae+h") and isinstance(m.x_prior, MarginalX) and isinstance(m.z_prior, AnchorPrior):
        parity = vae_param_count(ds.dim, cfg.latent_dim, cfg.hidden)
        assert n == parity, "parameter parity with the MIM model violated"
        _log(f"parameters: {n} (parity with MIM model: ok)")
    else:
        _log(f"parameters: {n}")
    out.mkdir(parents=True, exist_ok=True)
    result = train(m, LossConfig(cfg.loss, cfg.warmup_epochs), ds.train, ds.val, cfg.train_config(), log=_log)
    write_text(out / HISTORY_NAME, result.history_csv())
    extra = {"config": cfg.to_dict(), "rng_state": result.rng_state, "best_val": result.best_val,
             "best_epoch": result.best_epoch, "epochs_run": len(result.history)}
    save_checkpoint(m, out / CHECKPOINT_NAME, extra)
    write_text(out / CONFIG_NAME, cfg.to_yaml())
    return m, result


def metrics_csv(records: List[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in records:
        w.writerow(r.to_row())
    return buf.getvalue()


def read_metrics(path) -> List[MetricsRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [MetricsRecord.from_row(row) for row in csv.DictReader(fh)]


def cmd_eval(cfg: ExperimentConfig, out_dir: Optional[Path] = None, checkpoint: Optional[Path] = None) -> MetricsRecord:
    out = Path(out_dir or cfg.output_dir)
    ckpt = Path(checkpoint or out / CHECKPOINT_NAME)
    m = load_checkpoint(ckpt)
    ds = resolve_dataset(cfg)
    if ds.dim != m.x_dim:
        raise ConfigError(f"dataset dim {ds.dim} does not match model x dim {m.x_dim}")
    tr, trl = ds.part("train")
    te, tel = ds.part("test")
    ev = evaluate(m, tr, te, cfg.eval_spec(), trl, tel)
    epochs = int(m.meta["checkpoint"].get("epochs_run", 0))
    rec = MetricsRecord(cfg.seed, cfg.loss, cfg.hidden, cfg.latent_dim, epochs, **ev)
    mpath = out / METRICS_NAME
    rows = read_metrics(mpath) if mpath.exists() else []
    write_text(mpath, metrics_csv(rows + [rec]))
    if cfg.export_embeddings:
        emb = posterior_means(te, m)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"z{j}" for j in range(emb.shape[1])] + ["label"])
        labels = tel if tel is not None else [-1] * emb.shape[0]
        for row, lab in zip(emb, labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])
        write_text(out / "embeddings.csv", buf.getvalue())
        write_text(out / "embeddings.csv.meta.json", json.dumps({"config": cfg.to_dict()}, sort_keys=True) + "\n")
    return rec


# ---------------------------------------------------------------------------
# sweeps


def run_name(loss: str, axis: str, value: int, seed: int) -> str:
    return f"{loss}_{axis}{value}_s{seed}"


def sweep_plan(cfg: ExperimentConfig) -> List[Tuple[str, ExperimentConfig]]:
    plan = []
    for value in cfg.sweep_values:
        for loss in cfg.sweep_losses:
            for seed in cfg.sweep_seeds:
                d = cfg.to_dict()
                d.update({cfg.sweep_axis: int(value), "loss": loss, "seed": int(seed)})
                plan.append((run_name(loss, cfg.sweep_axis, value, seed), ExperimentConfig.from_dict(d)))
    return plan


def _run_one(args) -> Tuple[str, Optional[str]]:
    name, run_cfg, run_dir = args
    try:
        if not (run_dir / METRICS_NAME).exists():
            if not (run_dir / CHECKPOINT_NAME).exists():
                cmd_train(run_cfg, run_dir)
            cmd_eval(run_cfg, run_dir)
        return name, None
    except (TrainingAborted, FloatingPointError, LossConfigError, ValueError, OSError) as exc:
        return name, f"{type(exc).__name__}: {exc}"


def aggregate(records: List[MetricsRecord], axis: str) -> List[dict]:
    """Mean and sample std (ddof=1) of every metric per (loss, axis value) cell."""
    cells = {}
    for r in records:
        cells.setdefault((r.loss_kind, getattr(r, axis)), []).append(r)
    out = []
    for (loss, value), rs in sorted(cells.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        row = {"loss_kind": loss, axis: value, "n_runs": len(rs)}
        for col in METRIC_COLUMNS[5:]:
            vals = np.array([getattr(r, col) for r in rs], dtype=np.float64)
            row[f"{col}_mean"] = float(np.mean(vals))
            row[f"{col}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append(row)
    return out


def aggregate_columns(axis: str) -> List[str]:
    return ["loss_kind", axis, "n_runs"] + [f"{c}_{s}" for c in METRIC_COLUMNS[5:] for s in AGG_STATS]


def cmd_sweep(cfg: ExperimentConfig) -> Tuple[List[MetricsRecord], List[str]]:
    """Run every (axis value, loss, seed) job, skipping those whose metrics exist."""
    root = Path(cfg.output_dir)
    (root / "runs").mkdir(parents=True, exist_ok=True)
    plan = sweep_plan(cfg)
    jobs = [(name, c, root / "runs" / name) for name, c in plan]
    threads = max(1, int(os.environ.get("MIMLAB_THREADS", "1")))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    failed = [f"{name}: {err}" for name, err in results if err]
    for f in failed:
        _log(f"run failed: {f}")
    records = []
    for name, c, d in jobs:
        if (d / METRICS_NAME).exists():
            records.extend(read_metrics(d / METRICS_NAME)[-1:])
    write_text(root / "sweep_runs.csv", metrics_csv(records))
    agg = aggregate(records, cfg.sweep_axis)
    buf = io.StringIO()
    cols = aggregate_columns(cfg.sweep_axis)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in agg:
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    write_text(root / "sweep_aggregate.csv", buf.getvalue())
    write_text(root / CONFIG_NAME, cfg.to_yaml())
    return records, failed


# ---------------------------------------------------------------------------
# verify


def cmd_verify(n_models: int = 100, seed: int = 0) -> Tuple[bool, str]:
    report = oracle.run_verification(n_models, seed)
    lines = [f"{name:18s} max_residual={r['max_residual']:.3e} {'PASS' if r['passed'] else 'FAIL'}"
             for name, r in report.items()]
    return all(r["passed"] for r in report.values()), "\n".join(lines)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mimlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "eval", "sweep"):
        sp = sub.add_parser(name)
        sp.add_argument("config", nargs="?", help="YAML config file (defaults apply when omitted)")
        sp.add_argument("overrides", nargs="*", help="key=value overrides")
    sv = sub.add_parser("verify")
    sv.add_argument("--models", type=int, default=100)
    sv.add_argument("--seed", type=int, default=0)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        ok, text = cmd_verify(args.models, args.seed)
        print(text)
        return EXIT_OK if ok else EXIT_VALIDATION
    # a lone key=value lands in ``config``
    config, overrides = args.config, list(args.overrides)
    if config is not None and "=" in config and not os.path.exists(config):
        overrides.insert(0, config)
        config = None
    try:
        cfg = load_config(config, overrides)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            print(",".join(cmd_eval(cfg).to_row()))
        else:
            _, failed = cmd_sweep(cfg)
            if failed:
                return EXIT_PARTIAL
    except (ConfigError, LossConfigError, TableError) as exc:
        _log(f"error: {exc}")
        return EXIT_VALIDATION
    except (TrainingAborted, CheckpointError, FloatingPointError, OSError) as exc:
        _log(f"aborted: {exc}")
        return EXIT_RUNTIME
    except ValueError as exc:
        _log(f"error: {exc}")
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
