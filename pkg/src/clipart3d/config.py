"""Pipeline configuration: one validated document drives every subcommand."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field

from .compositor import SceneConfig
from .errors import ConfigError, ParseError
from .metrics import OcclusionBins
from .pose_fit import FitOptions
from .synth import NoiseSpec, SynthSpec


@dataclass(frozen=True)
class MiningConfig:
    delta: float = 0.1
    strip_mode: str = "strip_area"  # or "iou"
    iou_gate: float = 0.3
    max_age: int = 3

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta {self.delta} outside [0, 1]")
        if self.strip_mode not in ("iou", "strip_area"):
            raise ValueError(f"unknown strip_mode {self.strip_mode!r}")
        if self.max_age < 0:
            raise ValueError("max_age must be nonnegative")


@dataclass(frozen=True)
class EvalOptions:
    iou_threshold: float = 0.5
    pck_alpha: float = 0.1
    bin_edges: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)

    def __post_init__(self):
        OcclusionBins(self.bin_edges)  # validates
        if not 0.0 < self.pck_alpha < 1.0:
            raise ValueError("pck_alpha must be in (0, 1)")


@dataclass(frozen=True)
class PipelineConfig:
    calibration: str | None = None
    shape_basis: str | None = None
    detections: str | None = None
    background: str | None = None
    frames_dir: str | None = None
    output: str | None = None
    seed: int = 0
    threads: int = 0               # 0 means all available cores
    n_scenes: int = 10
    mining: MiningConfig = field(default_factory=MiningConfig)
    fit: FitOptions = field(default_factory=FitOptions)
    scene: SceneConfig = field(default_factory=SceneConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    eval: EvalOptions = field(default_factory=EvalOptions)


def _convert(value, hint, where):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        non_none = [a for a in args if a is not type(None)]
        return _convert(value, non_none[0], where)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return _config_from_dict(hint, value, where)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if hint is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if hint is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    raise ConfigError(f"{where}: unsupported config field type {hint}")


def _config_from_dict(cls, doc, where):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in names:
            raise ConfigError(f"{where}: unknown field '{key}'")
    hints = typing.get_type_hints(cls)
    kwargs = {
        f.name: _convert(doc[f.name], hints[f.name], f"{where}.{f.name}")
        for f in dataclasses.fields(cls)
        if f.name in doc
    }
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(doc) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    return _config_from_dict(PipelineConfig, doc, "config")


def _to_jsonable(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _to_jsonable(getattr(value, f.name))
                for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return [_to_jsonable(v) for v in value]
    return value


def config_to_dict(cfg: PipelineConfig) -> dict:
    return _to_jsonable(cfg)


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(doc)


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, indent=1, sort_keys=True)
        f.write("\n")
