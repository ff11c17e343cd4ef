"""Flat experiment configuration with a YAML text form and ``key=value`` overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

import yaml

from .data import GENERATORS
from .estimators import EvalSpec
from .networks import ACTIVATIONS, ModelSpec
from .objectives import LOSS_KINDS
from .training import TrainConfig

SWEEP_AXES = ("hidden", "latent_dim")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # dataset: a generator name or a path to a dataset table
    dataset: str = "gmm2d"
    data_dim: int = 20
    data_seed: int = 0
    # model
    hidden: int = 20
    latent_dim: int = 2
    activation: str = "tanh"
    z_prior: str = "anchor"
    x_prior: str = "marginal"
    prior_components: int = 10
    # loss and training
    loss: str = "mim-marginal"
    warmup_epochs: int = 3
    batch_size: int = 128
    max_epochs: int = 100
    patience: Optional[int] = None
    samples_per_epoch: Optional[int] = 10000
    seed: int = 0
    val_seed: int = 1
    # evaluation
    ksg_k: int = 5
    ksg_n: int = 10000
    nll_samples: int = 32
    knn_k: int = 5
    knn_train_n: int = 10000
    eval_seed: Optional[int] = None
    export_embeddings: bool = False
    # sweep
    sweep_axis: str = "hidden"
    sweep_values: List[int] = field(default_factory=lambda: [5, 20, 500])
    sweep_losses: List[str] = field(default_factory=lambda: ["mim-marginal", "vae"])
    sweep_seeds: List[int] = field(default_factory=lambda: list(range(10)))
    # output
    output_dir: str = "runs"

    # -- validation ---------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        if self.dataset in GENERATORS:
            pass
        elif not self.dataset.endswith(".csv"):
            raise ConfigError(f"unknown dataset generator {self.dataset!r}; valid names: {', '.join(GENERATORS)} "
                              "(or a path to a .csv table)")
        for name in ("hidden", "latent_dim", "batch_size", "max_epochs", "ksg_k", "knn_k", "nll_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.z_prior not in ("anchor", "mixture", "vamp"):
            raise ConfigError("z_prior must be anchor, mixture or vamp")
        if self.x_prior not in ("marginal", "mixture"):
            raise ConfigError("x_prior must be marginal or mixture")
        for kind in [self.loss] + list(self.sweep_losses):
            if kind not in LOSS_KINDS:
                raise ConfigError(f"unknown loss kind {kind!r}; choose from {', '.join(LOSS_KINDS)}")
        if self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"sweep_axis must be one of {SWEEP_AXES}")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        return self

    # -- derived specs --------------------------------------------------------

    def model_spec(self, x_dim: int) -> ModelSpec:
        return ModelSpec(x_dim, self.latent_dim, self.hidden, self.activation, self.z_prior, self.x_prior,
                         self.prior_components)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.warmup_epochs, self.max_epochs, self.patience,
                           self.samples_per_epoch, 1, self.seed, self.val_seed)

    def eval_spec(self) -> EvalSpec:
        seed = self.seed if self.eval_seed is None else self.eval_seed
        return EvalSpec(self.ksg_k, self.ksg_n, self.nll_samples, self.knn_k, self.knn_train_n, seed)

    # -- text form ------------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        d = yaml.safe_load(text) or {}
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping of keys to values")
        return cls.from_dict(d)

    def with_overrides(self, items: List[str]) -> "ExperimentConfig":
        d = self.to_dict()
        for item in items:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            if key not in d:
                raise ConfigError(f"unknown config key {key!r}")
            d[key] = yaml.safe_load(raw) if raw != "" else None
        return ExperimentConfig.from_dict(d)


def load_config(path: Optional[str], overrides: List[str] = ()) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        with open(path, encoding="utf-8") as fh:
            cfg = ExperimentConfig.from_yaml(fh.read())
    return cfg.with_overrides(list(overrides)).validate()
