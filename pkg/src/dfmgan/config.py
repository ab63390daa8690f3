"""Run configuration: one JSON file with model, defect, training, data, eval and classifier sections."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .backbone import TrainConfig
from .defect import DefectConfig
from .downstream import ClassifierConfig
from .networks import SynthesisConfig
from .utils import ConfigError

SEED_ENV = "DFM_SEED"


@dataclass
class DataConfig:
    category: Optional[str] = None
    defect_category: Optional[str] = None
    subset_k: Optional[int] = None
    resolution: Optional[int] = None


@dataclass
class EvalConfig:
    extractor: str = "random-conv"
    n_subsets: int = 10
    subset_size: Optional[int] = None


SECTIONS = {
    "model": SynthesisConfig,
    "defect": DefectConfig,
    "training": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
    "classifier": ClassifierConfig,
}


def _build(cls, values: dict, path: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected an object, got {type(values).__name__}")
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key")
    kwargs = dict(values)
    if cls is TrainConfig and "betas" in kwargs:
        kwargs["betas"] = tuple(kwargs["betas"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


@dataclass
class RunConfig:
    """Effective configuration of one command.

    ``seed`` is the root of every random stream; it defaults to 0 or to the
    ``DFM_SEED`` environment variable and is copied into the training and
    classifier sections.
    """

    model: SynthesisConfig = field(default_factory=SynthesisConfig)
    defect: DefectConfig = field(default_factory=DefectConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    seed: int = field(default_factory=default_seed)

    def __post_init__(self):
        self.with_seed(self.seed)

    def with_seed(self, seed: int) -> "RunConfig":
        self.seed = int(seed)
        self.training.seed = self.seed
        self.classifier.seed = self.seed
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: expected a JSON object")
        unknown = set(d) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"config.{sorted(unknown)[0]}: unknown key")
        sections = {name: _build(cls_, d.get(name, {}), f"config.{name}") for name, cls_ in SECTIONS.items()}
        seed = d.get("seed", default_seed())
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("config.seed: must be an integer")
        return cls(**sections, seed=seed)

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in SECTIONS}
        out["training"]["betas"] = list(out["training"]["betas"])
        out["seed"] = self.seed
        return out


def _json_type(value: Any) -> dict:
    if isinstance(value, bool):
        return {"type": "boolean"}
    if isinstance(value, int):
        return {"type": "integer"}
    if isinstance(value, float):
        return {"type": "number"}
    if isinstance(value, str):
        return {"type": "string"}
    if isinstance(value, (list, tuple)):
        return {"type": "array", "items": {"type": "number"}}
    return {}


def json_schema() -> dict:
    """JSON Schema (draft 2020-12) of the config file, with defaults."""
    defaults = RunConfig(seed=0).to_dict()
    props = {}
    for name, values in defaults.items():
        if name == "seed":
            continue
        section = {}
        for key, value in values.items():
            entry = _json_type(value)
            if value is None:
                entry = {}
            entry["default"] = value
            section[key] = entry
        props[name] = {"type": "object", "additionalProperties": False, "properties": section}
    props["seed"] = {"type": "integer", "default": 0}
    return {"$schema": "https://json-schema.org/draft/2020-12/schema", "title": "dfmgan run config",
            "type": "object", "additionalProperties": False, "properties": props}
