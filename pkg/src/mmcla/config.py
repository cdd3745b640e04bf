"""Declarative run configuration (YAML).

One file holds every knob of a run. Unknown keys are rejected, and all
validation problems are reported together.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .augment import AugmentPolicy
from .cache import PreprocessConfig
from .model import ModelConfig
from .training import TrainConfig

PathLike = Union[str, os.PathLike]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Strict):
    manifest: Optional[str] = None
    cache: Optional[str] = None
    split_file: Optional[str] = None
    split_fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    split_seed: int = 0
    label_threshold: float = Field(10.0, ge=0.0, le=20.0)


class EvalConfig(_Strict):
    threshold: float = Field(0.5, ge=0.0, le=1.0)
    batch_size: int = Field(16, ge=1)


class RunConfig(_Strict):
    output_dir: str = "runs/default"
    data: DataConfig = DataConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    augment: AugmentPolicy = AugmentPolicy()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _shapes_agree(self):
        problems = []
        if tuple(self.model.audio_shape) != self.preprocess.audio_shape:
            problems.append(f"model.audio_shape {tuple(self.model.audio_shape)} != preprocess output {self.preprocess.audio_shape}")
        if tuple(self.model.video_shape) != self.preprocess.video_shape:
            problems.append(f"model.video_shape {tuple(self.model.video_shape)} != preprocess output {self.preprocess.video_shape}")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def resolve(self, base: PathLike) -> "RunConfig":
        """Copy with relative paths made absolute against ``base``."""
        base = Path(base)

        def fix(p: Optional[str]) -> Optional[str]:
            if p is None or Path(p).is_absolute():
                return p
            return str((base / p).resolve())

        data = self.data.model_copy(
            update={"manifest": fix(self.data.manifest), "cache": fix(self.data.cache), "split_file": fix(self.data.split_file)}
        )
        return self.model_copy(update={"data": data, "output_dir": fix(self.output_dir)})


def _describe(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        where = ".".join(str(p) for p in e["loc"]) or "<root>"
        if e["type"] == "extra_forbidden":
            lines.append(f"  unknown key: {where}")
        else:
            lines.append(f"  {where}: {e['msg']}")
    return "invalid run config:\n" + "\n".join(lines)


def config_from_dict(raw) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a mapping at the top level")
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as err:
        raise ConfigError(_describe(err)) from None


def load_config(path: PathLike) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: not valid YAML: {err}") from None
    return config_from_dict(raw)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True, default_flow_style=False)


def save_config(path: PathLike, config: RunConfig) -> None:
    Path(path).write_text(dump_config(config), encoding="utf-8")
