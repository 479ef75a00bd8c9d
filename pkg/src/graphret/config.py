"""Run configuration: one JSON file, explicit schema, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .harness import SyntheticSpec
from .inference import InferenceConfig
from .pretrain import TrainConfig
from .selector import FinetuneConfig


@dataclass
class PathsConfig:
    triples: str | None = None
    entities: str | None = None
    relations: str | None = None
    corpus: str | None = None
    queries: str | None = None
    embeddings: str | None = None
    index: str | None = None
    retriever_checkpoint: str | None = None
    selector_checkpoint: str | None = None
    out_dir: str | None = None


@dataclass
class ModelConfig:
    hidden_dim: int = 32
    layers: int = 3
    text_dim: int = 16
    prompt_dim: int = 16
    selector_dim: int = 16

    def __post_init__(self):
        for name in ("hidden_dim", "layers", "text_dim", "prompt_dim", "selector_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class IndexConfig:
    tau: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"index.tau must lie in (0, 1], got {self.tau}")


@dataclass
class RunConfig:
    seed: int = 1024
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    index: IndexConfig = field(default_factory=IndexConfig)


_SECTIONS = {
    "paths": PathsConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "finetune": FinetuneConfig,
    "inference": InferenceConfig,
    "synth": SyntheticSpec,
    "index": IndexConfig,
}


def _build_section(cls, obj: dict, section: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(
            f"unknown key(s) in section {section!r}: {sorted(unknown)} (known: {sorted(known)})"
        )
    coerced = dict(obj)
    for f in dataclasses.fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list):
            coerced[f.name] = tuple(coerced[f.name])
    try:
        return cls(**coerced)
    except TypeError as e:
        raise ConfigError(f"bad section {section!r}: {e}")


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(obj) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    cfg = RunConfig()
    if "seed" in obj:
        if not isinstance(obj["seed"], int) or obj["seed"] < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {obj['seed']}")
        cfg.seed = obj["seed"]
    for name, cls in _SECTIONS.items():
        if name in obj:
            setattr(cfg, name, _build_section(cls, obj[name], name))
    # the synthetic stream derives from the run seed unless set explicitly
    if "synth" in obj and "seed" not in obj["synth"]:
        cfg.synth.seed = cfg.seed
    elif "synth" not in obj:
        cfg.synth.seed = cfg.seed
    return cfg


def config_to_json(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed}
    for name in _SECTIONS:
        out[name] = dataclasses.asdict(getattr(cfg, name))
        for k, v in out[name].items():
            if isinstance(v, tuple):
                out[name][k] = list(v)
    return out
