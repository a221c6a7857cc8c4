"""Experiment configuration: one YAML tree with ``env``, ``vus``, ``ppo`` and
``run`` sections. Every key has a default, so an empty file is a complete
experiment."""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from ..env import EnvConfig, VuSpec
from ..ppo import PpoHyper
from ..trainers import Algo

WORKERS_ENV = "UCHA_WORKERS"


class ConfigError(ValueError):
    """Raised for unreadable or invalid experiment files; messages carry key paths."""


class RunSection(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    algos: list[Algo] = Field(default_factory=lambda: list(Algo))
    vu_counts: Optional[list[int]] = None        # None: just env.n_vus
    seeds: list[int] = Field(default_factory=lambda: [0])
    total_steps: int = Field(200_000, gt=0)
    eval_interval: int = Field(500, gt=0)
    eval_episodes: int = Field(5, gt=0)
    greedy_eval: bool = False
    out_dir: str = "runs"
    checkpoints: Literal["none", "latest", "all"] = "latest"
    workers: int = Field(1, ge=1)

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        if any(s < 0 for s in v):
            raise ValueError("seeds must be non-negative")
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        return v

    @field_validator("algos")
    @classmethod
    def _algos(cls, v):
        if not v:
            raise ValueError("at least one algorithm is required")
        return list(dict.fromkeys(v))

    @field_validator("vu_counts")
    @classmethod
    def _vu_counts(cls, v):
        if v is not None and (not v or any(n < 1 for n in v)):
            raise ValueError("vu_counts must be a non-empty list of positive integers")
        return v


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    env: EnvConfig = Field(default_factory=EnvConfig)
    vus: list[VuSpec] = Field(default_factory=list)
    ppo: PpoHyper = Field(default_factory=PpoHyper)
    run: RunSection = Field(default_factory=RunSection)

    def scenarios(self) -> list[int]:
        return list(self.run.vu_counts or [self.env.n_vus])

    def env_for(self, n_vus: int) -> EnvConfig:
        return EnvConfig(**{**self.env.model_dump(), "n_vus": n_vus})


def _format_error(err: ValidationError, source: str) -> ConfigError:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {path}: {e['msg']}")
    return ConfigError(f"{source}: invalid configuration\n" + "\n".join(lines))


def config_from_dict(data: dict | None, source: str = "<config>") -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping, got {type(data).__name__}")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise _format_error(err, source) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"{path}: cannot read ({err.strerror})") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: YAML parse error: {err}") from None
    return config_from_dict(data, str(path))


def config_to_dict(config: ExperimentConfig) -> dict:
    return config.model_dump(mode="json")


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=True)


def apply_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    """``section.key=value`` assignments; values are parsed as YAML scalars or lists."""
    data = config_to_dict(config)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a config section")
            node = node[p]
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(data, "<overrides>")
