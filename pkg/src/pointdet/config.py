"""Run configuration: one human-readable JSON document covering scene
generation, model architecture, training, inference, and evaluation.

Parsing is strict and total: unknown keys, wrong types, and invariant
violations all raise :class:`ConfigError` carrying the dotted key path and a
reason. Defaults live on the dataclasses themselves; ``dump_run_config``
emits a fully populated document that doubles as a template.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .evaluation import EvalConfig
from .pipeline import InferenceConfig, ModelConfig, TrainConfig
from .scenes import SceneGenConfig


class ConfigError(ValueError):
    """A configuration problem at a specific key."""

    def __init__(self, path: str, reason: str):
        self.path = path or "<root>"
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scene: SceneGenConfig = field(default_factory=SceneGenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


# ---------------------------------------------------------------------------
# Generic strict dataclass <-> dict conversion
# ---------------------------------------------------------------------------

def _coerce(value, target, path: str):
    origin = typing.get_origin(target)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(target)
        if value is None and type(None) in args:
            return None
        non_none = [a for a in args if a is not type(None)]
        if len(non_none) == 1:
            return _coerce(value, non_none[0], path)
        raise ConfigError(path, f"unsupported union type {target}")
    if dataclasses.is_dataclass(target):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {type(value).__name__}")
        return dataclass_from_dict(target, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        args = typing.get_args(target)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(
                _coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)
            )
        if len(args) != len(value):
            raise ConfigError(path, f"expected {len(args)} entries, got {len(value)}")
        return tuple(
            _coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args))
        )
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(path, f"expected a number, got {type(value).__name__}")
        try:
            return float(value)
        except ValueError:
            raise ConfigError(path, f"cannot read {value!r} as a number") from None
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {type(value).__name__}")
        return int(value)
    if target is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {type(value).__name__}")
        return value
    if target is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {type(value).__name__}")
        return value
    raise ConfigError(path, f"unsupported config field type {target}")


def dataclass_from_dict(cls, data: dict, path: str = ""):
    """Build a dataclass strictly: every key must match a field."""
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        child = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(child, "unknown key")
        kwargs[key] = _coerce(value, hints[key], child)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from exc


def dataclass_to_dict(obj):
    """Plain-JSON-representable dict of a (possibly nested) dataclass."""
    if dataclasses.is_dataclass(obj):
        return {
            f.name: dataclass_to_dict(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
        }
    if isinstance(obj, (list, tuple)):
        return [dataclass_to_dict(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# Run-config entry points
# ---------------------------------------------------------------------------

def parse_run_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "the config document must be a JSON object")
    return dataclass_from_dict(RunConfig, data)


def load_run_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read config file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON in {path}: {exc}") from exc
    return parse_run_config(data)


def dump_run_config(config: RunConfig | None = None) -> str:
    """Fully populated config document (defaults when none given)."""
    return json.dumps(dataclass_to_dict(config or RunConfig()), indent=2)


def model_config_to_json(model: ModelConfig) -> str:
    """Canonical (sorted, compact) JSON for checkpoint headers."""
    return json.dumps(dataclass_to_dict(model), sort_keys=True,
                      separators=(",", ":"))


def model_config_from_json(text: str) -> ModelConfig:
    return dataclass_from_dict(ModelConfig, json.loads(text), "model")
