"""Training configuration and its flat key-value file format."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .errors import ConfigError, UnknownVariantError

VARIANTS = ("full", "p_global", "p_finetune", "p_nocoherent")
BATCH_SIZE_GRID = (10, 50, 100, 200)
LAMBDA_GRID = (0.1, 0.5, 1.0, 5.0)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 50
    max_epochs: int = 500
    patience: int = 150
    tau: int = 1
    kappa: float = 1.0
    c: float = 5.0
    mc_samples_train: int = 1
    variant: str = "full"
    seed: int = 0
    # architecture
    d_u: int = 60
    hidden: int = 60
    # data handling
    preprocess: str = "sum"
    holdout: int | None = None
    min_len: int = 5
    max_len: int | None = None
    windows_per_epoch: int | None = None
    # schedule
    pretrain_epochs: int = 100
    pretrain_patience: int | None = None
    finetune_epochs: int = 50
    val_samples: int = 16
    val_steps: int | None = None
    grad_clip: float = 10.0
    # backtesting grids
    grid_lambda: tuple = LAMBDA_GRID
    grid_batch_size: tuple = BATCH_SIZE_GRID
    grid_learning_rate: tuple = (1e-3,)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UnknownVariantError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.tau < 1:
            raise ConfigError("tau must be >= 1")
        if self.kappa <= 0 or self.c <= 0:
            raise ConfigError("kappa and c must be positive")
        if self.batch_size < 1 or self.mc_samples_train < 1:
            raise ConfigError("batch_size and mc_samples_train must be >= 1")
        for name in ("grid_lambda", "grid_batch_size", "grid_learning_rate"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.variant == "p_nocoherent" else self.lam

    @property
    def effective_val_steps(self) -> int:
        return self.tau if self.val_steps is None else self.val_steps

    @property
    def effective_holdout(self) -> int:
        return self.tau if self.holdout is None else self.holdout

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    def with_(self, **kw) -> "TrainConfig":
        if "lambda" in kw:
            kw["lam"] = kw.pop("lambda")
        return replace(self, **kw)


def load_config(path: str | Path) -> TrainConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a flat mapping of key: value")
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"config key {k!r} must not be nested")
    try:
        return TrainConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: TrainConfig, path: str | Path | None = None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
