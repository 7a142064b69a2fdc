"""Single JSON run configuration binding data, model, training and inference."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .datagen import DatasetManifest
from .model import ModelConfig
from .refine import InferConfig
from .train import TrainConfig

SCHEMA_VERSION = 1
SEED_ENV = "ARMOR_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3])
    ratios: list = field(default_factory=lambda: [2, 5, 10, 30])
    workers: int = 1


@dataclass
class Paths:
    data_dir: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    report_dir: Optional[str] = None


@dataclass
class RunConfig:
    seed: int = 0
    counts: dict = field(default_factory=lambda: {"sparse": 2000, "dense": 200, "test": 300})
    success_fraction: dict = field(default_factory=lambda: {"sparse": 0.5, "dense": 0.5, "test": 0.5})
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    paths: Paths = field(default_factory=Paths)
    judge_command: Optional[str] = None

    def manifest(self) -> DatasetManifest:
        m = DatasetManifest(seed=self.seed, counts=dict(self.counts), success_fraction=dict(self.success_fraction))
        m.validate()
        return m

    def train_config(self, ablation: Optional[str] = None) -> TrainConfig:
        kw = {"seed": self.seed}
        if ablation is not None:
            kw["ablation"] = ablation
        return dataclasses.replace(self.train, **kw)

    def infer_config(self, **overrides) -> InferConfig:
        kw = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self.infer, seed=self.seed, **kw)

    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            d[f.name] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
        d["train"].pop("seed")
        d["infer"].pop("seed")
        return d

    def write(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "infer": InferConfig, "experiment": ExperimentConfig, "paths": Paths}


def _section(name: str, cls, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)} - {"seed"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from None


def config_from_dict(raw: dict, env: Optional[dict] = None) -> RunConfig:
    """Validate a config document; the seed env variable overrides ``seed``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    kw = {}
    for k, v in raw.items():
        kw[k] = _section(k, _SECTIONS[k], v) if k in _SECTIONS else v
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            kw["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    if not isinstance(kw.get("seed", 0), int):
        raise ConfigError("seed must be an integer")
    cfg = RunConfig(**kw)
    try:
        cfg.manifest()
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid data settings: {exc}") from None
    return cfg


def load_config(path: Path | str | None, env: Optional[dict] = None) -> RunConfig:
    if path is None:
        return config_from_dict({"schema_version": SCHEMA_VERSION}, env)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(raw, env)
