"""Run configuration: one YAML file is the source of truth for a run.

The file resolves against defaults (an empty file is a valid micro-dataset
run), round-trips losslessly through `to_dict`/`from_dict`, and individual
keys can be overridden from the command line with dotted paths
(`train.batch_size=64`).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional

import yaml

from .training import TrainConfig

CACHE_ROOT_ENV = "CAGAN_DATA_ROOT"
DATASETS = ("micro", "cifar_mnist", "dsprites_mnist", "celeba")
GRID_KINDS = ("recon", "swap", "traverse", "generate")


class ConfigError(ValueError):
    """Invalid run configuration; the message lists every detected problem."""


@dataclass(frozen=True)
class DataOptions:
    seed: int = 0
    n_train: int = 4096
    n_test: int = 1024
    paths: Dict[str, str] = field(default_factory=dict)
    checksums: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EvalOptions:
    folds: int = 5
    seed: int = 0
    grids: List[str] = field(default_factory=list)
    traverse_dims: List[int] = field(default_factory=lambda: [0])
    traverse_steps: int = 8
    traverse_lo: float = -1.5
    traverse_hi: float = 1.5
    grid_rows: int = 4
    grid_cols: int = 4
    fvae_train_votes: int = 800
    fvae_eval_votes: int = 200
    fvae_batch_per_vote: int = 64

    def __post_init__(self):
        for g in self.grids:
            if g not in GRID_KINDS:
                raise ValueError(f"unknown grid kind {g!r}; expected one of {GRID_KINDS}")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "micro"
    cache_root: Optional[str] = None
    out_dir: str = "runs/run"
    data: DataOptions = field(default_factory=DataOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}; expected one of {DATASETS}")

    def resolved_cache_root(self) -> Path:
        root = self.cache_root or os.environ.get(CACHE_ROOT_ENV) or "data-cache"
        return Path(root)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "cache_root": self.cache_root,
            "out_dir": self.out_dir,
            "data": self.data.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        errors: List[str] = []
        unknown = set(d) - {"dataset", "cache_root", "out_dir", "data", "train", "eval"}
        if unknown:
            errors.append(f"unknown top-level keys: {sorted(unknown)}")

        def build(name, ctor, default):
            payload = d.get(name)
            if payload is None:
                return default()
            try:
                return ctor(payload)
            except (TypeError, ValueError) as e:
                errors.append(f"{name}: {e}")
                return default()

        data = build("data", lambda p: DataOptions(**p), DataOptions)
        train = build("train", _train_from_partial, TrainConfig)
        ev = build("eval", lambda p: EvalOptions(**p), EvalOptions)
        dataset = d.get("dataset", "micro")
        cfg = None
        try:
            cfg = cls(
                dataset=dataset,
                cache_root=d.get("cache_root"),
                out_dir=d.get("out_dir", "runs/run"),
                data=data,
                train=train,
                eval=ev,
            )
        except (TypeError, ValueError) as e:
            errors.append(str(e))
        if errors:
            raise ConfigError("invalid run configuration:\n  " + "\n  ".join(errors))
        return cfg


def _train_from_partial(payload: dict) -> TrainConfig:
    """Build a TrainConfig from a partial dict, resolving nested defaults."""
    base = TrainConfig().to_dict()
    payload = dict(payload)
    for key in ("weights", "prior", "arch"):
        if key in payload:
            merged = dict(base[key])
            merged.update(payload[key] or {})
            payload[key] = merged
        else:
            payload[key] = base[key]
    unknown = set(payload) - set(base)
    if unknown:
        raise ValueError(f"unknown train keys: {sorted(unknown)}")
    merged = {**base, **payload}
    return TrainConfig.from_dict(merged)


def load_run_config(path: Optional[str], overrides: Optional[List[str]] = None) -> RunConfig:
    """Read the YAML config (or start from defaults) and apply key=value overrides."""
    payload: dict = {}
    if path is not None:
        text = Path(path).read_text()
        payload = yaml.safe_load(text) or {}
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        value = yaml.safe_load(raw)
        node = payload
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = value
    return RunConfig.from_dict(payload)


def save_run_config(cfg: RunConfig, path: str) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
