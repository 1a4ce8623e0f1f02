"""Run configuration: a YAML file of flat keys plus per-stage tables.

Example::

    seed: 7
    out_dir: runs/toy
    resolution: 32
    dim: 64
    data:
      - {path: data/train.jsonl, weight: 1.0}
    stages:
      S1: {total_steps: 200, batch_size: 8}

Any flat key can be overridden from the environment as ``DEEM_<KEY>``
(``DEEM_SEED=3``); stage keys as ``DEEM_<STAGE>__<KEY>``
(``DEEM_S1__TOTAL_STEPS=50``). Values are parsed as YAML scalars.
Unknown keys are an error.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Optional

import yaml

from .model import ModelConfig
from .training import STAGES, StageConfig, desk_stage

ENV_PREFIX = "DEEM_"
MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
STAGE_KEYS = tuple(f.name for f in fields(StageConfig) if f.name != "stage")


class ConfigError(ValueError):
    pass


@dataclass
class DataSource:
    path: str
    weight: float = 1.0


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: list = field(default_factory=list)
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: dict = field(default_factory=lambda: {s: desk_stage(s) for s in STAGES})

    def stage(self, name: str) -> StageConfig:
        if name not in self.stages:
            raise ConfigError(f"unknown stage {name!r}")
        return self.stages[name]

    def validate(self, check_paths: bool = True) -> "RunConfig":
        if not self.data:
            raise ConfigError("data mixture is empty")
        for src in self.data:
            if src.weight <= 0:
                raise ConfigError(f"data weight for {src.path} must be positive")
            if check_paths and not Path(src.path).exists():
                raise ConfigError(f"data path does not exist: {src.path}")
        return self

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "out_dir": self.out_dir, "data": [asdict(d) for d in self.data]}
        out.update(asdict(self.model))
        out["stages"] = {k: {kk: vv for kk, vv in asdict(v).items() if kk != "stage"} for k, v in self.stages.items()}
        for st in out["stages"].values():
            st["betas"] = list(st["betas"])
        return out


def _coerce(value, like):
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(like, int) and not isinstance(like, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(like, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}")
        return float(value)
    return value


def _stage_from(name: str, table: Mapping) -> StageConfig:
    if not isinstance(table, Mapping):
        raise ConfigError(f"stage {name} must be a table")
    unknown = set(table) - set(STAGE_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys in stage {name}: {sorted(unknown)}")
    base = desk_stage(name)
    kw = {k: _coerce(v, getattr(base, k)) for k, v in table.items()}
    try:
        return replace(base, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"stage {name}: {exc}") from exc


def from_dict(raw: Mapping) -> RunConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a mapping")
    allowed = {"seed", "out_dir", "data", "stages", *MODEL_KEYS}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig()
    if "seed" in raw:
        cfg.seed = _coerce(raw["seed"], 0)
    if "out_dir" in raw:
        cfg.out_dir = str(raw["out_dir"])
    model_kw = {k: _coerce(raw[k], getattr(cfg.model, k)) for k in MODEL_KEYS if k in raw}
    cfg.model = replace(cfg.model, **model_kw)
    for item in raw.get("data", []) or []:
        if isinstance(item, str):
            item = {"path": item}
        if not isinstance(item, Mapping) or set(item) - {"path", "weight"} or "path" not in item:
            raise ConfigError(f"bad data entry {item!r}")
        cfg.data.append(DataSource(str(item["path"]), float(item.get("weight", 1.0))))
    stages = raw.get("stages", {}) or {}
    if not isinstance(stages, Mapping):
        raise ConfigError("stages must be a table")
    for name, table in stages.items():
        if name not in STAGES:
            raise ConfigError(f"unknown stage {name!r}")
        cfg.stages[name] = _stage_from(name, table)
    return cfg


def env_overrides(environ: Optional[Mapping] = None) -> dict:
    """Nested override dict built from ``DEEM_*`` variables."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):]
        value = yaml.safe_load(raw)
        if "__" in name:
            stage, sub = name.split("__", 1)
            out.setdefault("stages", {}).setdefault(stage.upper(), {})[sub.lower()] = value
        else:
            out[name.lower()] = value
    return out


def merge(base: dict, over: Mapping) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, environ: Optional[Mapping] = None, check_paths: bool = True) -> RunConfig:
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    cfg = from_dict(merge(raw, env_overrides(environ)))
    return cfg.validate(check_paths) if check_paths else cfg
