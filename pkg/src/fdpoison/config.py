"""Experiment configuration: schema, defaults, validation and JSON I/O."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .attacks import AttackKind
from .errors import ConfigError

PROTOCOLS = ("fd_avg", "cache")
DATASET_KINDS = ("synthetic", "idx", "csv")
EVAL_WEIGHTINGS = ("local", "uniform")


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    n_classes: int = 10
    per_class: int = 100
    dim: int = 16
    separation: float = 3.0
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_csv: str | None = None
    test_csv: str | None = None


@dataclass
class Seeds:
    data: int = 0
    attack: int = 0
    model: int = 0
    training: int = 0


@dataclass
class ExperimentConfig:
    protocol: str = "fd_avg"
    K: int = 20
    alpha: float = 1.0
    poison_ratio: float = 0.0
    attack: str = "none"
    rounds: int = 60
    beta: float = 1.0
    temperature: float = 1.0
    lr: float = 0.1
    local_epochs: int = 1
    batch_size: int = 32
    heterogeneous_models: bool = False
    R: int = 16
    exclude_self: bool = False
    hash_dim: int = 32
    eval_weighting: str = "local"
    misleading_target: int | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    seeds: Seeds = field(default_factory=Seeds)
    output_dir: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        _check(self.protocol in PROTOCOLS, "protocol", f"must be one of {'|'.join(PROTOCOLS)}")
        self.attack = AttackKind.parse(self.attack).value
        _check(self.K >= 1, "K", "must be >= 1")
        _check(self.alpha > 0, "alpha", "must be > 0")
        _check(0.0 <= self.poison_ratio <= 1.0, "poison_ratio", "must lie in [0, 1]")
        _check(self.rounds >= 1, "rounds", "must be >= 1")
        _check(self.beta >= 0, "beta", "must be >= 0")
        _check(self.temperature > 0, "temperature", "must be > 0")
        _check(self.lr > 0, "lr", "must be > 0")
        _check(self.local_epochs >= 1, "local_epochs", "must be >= 1")
        _check(self.batch_size >= 1, "batch_size", "must be >= 1")
        _check(self.R >= 1, "R", "must be >= 1")
        _check(self.hash_dim >= 2, "hash_dim", "must be >= 2")
        _check(self.eval_weighting in EVAL_WEIGHTINGS, "eval_weighting",
               f"must be one of {'|'.join(EVAL_WEIGHTINGS)}")
        ds = self.dataset
        _check(ds.kind in DATASET_KINDS, "dataset.kind", f"must be one of {'|'.join(DATASET_KINDS)}")
        if ds.kind == "synthetic":
            _check(ds.n_classes >= 2, "dataset.n_classes", "must be >= 2")
            _check(ds.per_class >= 2, "dataset.per_class", "must be >= 2")
            _check(ds.dim >= 1, "dataset.dim", "must be >= 1")
            _check(ds.separation >= 0, "dataset.separation", "must be >= 0")
        elif ds.kind == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                _check(getattr(ds, name) is not None, f"dataset.{name}", "required for idx datasets")
        else:
            for name in ("train_csv", "test_csv"):
                _check(getattr(ds, name) is not None, f"dataset.{name}", "required for csv datasets")
        if self.misleading_target is not None:
            _check(self.misleading_target >= 0, "misleading_target", "must be >= 0")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @property
    def attack_kind(self) -> AttackKind:
        return AttackKind.parse(self.attack)


def _check(ok: bool, name: str, msg: str) -> None:
    if not ok:
        raise ConfigError(msg, field=name)


_NESTED = {"dataset": DatasetSpec, "seeds": Seeds}


def _coerce(name: str, value, ftype):
    """Type-check a JSON value against a dataclass field annotation string."""
    optional = "None" in ftype
    base = ftype.replace(" | None", "").strip()
    if value is None:
        if optional:
            return None
        raise ConfigError("may not be null", field=name)
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", field=name)
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", field=name)
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field=name)
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", field=name)
        return value
    raise ConfigError(f"unsupported field type {ftype}", field=name)


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError("expected a JSON object", field=prefix.rstrip(".") or None)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError("unknown key", field=prefix + key)
        if key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, prefix + key + ".")
        else:
            kwargs[key] = _coerce(prefix + key, value, str(fields[key].type))
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data).validate()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc.strerror}", field=str(path)) from None
    if not text.strip():
        return ExperimentConfig().validate()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", field=str(path)) from None
    return config_from_dict(data)


def with_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Apply dotted-key overrides (``"seeds.data": 3``) and re-validate."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        parts = key.split(".")
        target = data
        for p in parts[:-1]:
            target = target[p]
        target[parts[-1]] = value
    return config_from_dict(data)
