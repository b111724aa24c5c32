"""JSON experiment configuration shared by every command.

Config files are plain JSON objects whose keys mirror the dataclass fields
below; missing keys take the defaults and unknown keys are rejected. Paths are
resolved relative to the config file.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .diffusion import TrainConfig
from .errors import RejectedInputError
from .experiments import GuidanceSpec, ModelSpec
from .fluidsim import FluidConfig, FluidDataSpec
from .thermal import ClipSpec

SCHEMA_VERSION = 1
KINDS = ("fluid", "thermal", "theory")


@dataclass(frozen=True)
class TheoryConfig:
    chains: int = 10_000
    seed: int = 0
    threshold: float = 0.05


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "fluid"
    out_dir: str = "runs/default"
    data_dir: str = ""
    fluid_data: FluidDataSpec = FluidDataSpec()
    fluid_solver: FluidConfig = FluidConfig()
    thermal_data: ClipSpec = ClipSpec()
    model: ModelSpec = ModelSpec()
    train: TrainConfig = TrainConfig()
    guidance: GuidanceSpec = GuidanceSpec()
    sample_seed: int = 0
    ensemble_size: int = 40
    theory: TheoryConfig = TheoryConfig()
    schema_version: int = SCHEMA_VERSION
    base_dir: str = field(default=".", compare=False, repr=False)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise RejectedInputError(f"unsupported config schema {self.schema_version!r}")
        if self.kind not in KINDS:
            raise RejectedInputError(f"experiment kind must be one of {KINDS}, got {self.kind!r}")
        if self.ensemble_size < 2:
            raise RejectedInputError("ensemble size must be at least 2")

    @property
    def out_path(self) -> Path:
        return (Path(self.base_dir) / self.out_dir).resolve()

    @property
    def data_path(self) -> Path:
        return (Path(self.base_dir) / self.data_dir).resolve() if self.data_dir else self.out_path / "data"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _coerce(tp, value, where: str):
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise RejectedInputError(f"{where}: expected an object")
        return build_dataclass(tp, value, where)
    origin = typing.get_origin(tp)
    if origin is tuple and isinstance(value, list):
        return tuple(value)
    if origin in (typing.Union, types.UnionType):
        if value is None:
            return None
        inner = [a for a in typing.get_args(tp) if a is not type(None)]
        return _coerce(inner[0], value, where) if len(inner) == 1 else value
    if tp is float and isinstance(value, int):
        return float(value)
    return value


def build_dataclass(cls, data: dict, where: str = "config"):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise RejectedInputError(f"{where}: unknown keys {unknown}")
    kw = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kw)
    except TypeError as exc:
        raise RejectedInputError(f"{where}: {exc}") from exc


def config_from_dict(data: dict, base_dir=".") -> ExperimentConfig:
    if "base_dir" in data:
        raise RejectedInputError("base_dir is derived from the config location")
    return dataclasses.replace(build_dataclass(ExperimentConfig, data), base_dir=str(base_dir))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise RejectedInputError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise RejectedInputError(f"{path}: config must be a JSON object")
    return config_from_dict(data, path.parent)


def write_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


__all__ = ["ExperimentConfig", "KINDS", "SCHEMA_VERSION", "TheoryConfig", "build_dataclass", "config_from_dict", "load_config",
           "write_config"]
