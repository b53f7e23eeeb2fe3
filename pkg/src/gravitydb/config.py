"""Run configuration: one JSON document for every numeric parameter.

Sections mirror the pipeline stages (``bridge``, ``field``, ``mask``,
``metrics``, ``io``). Loading is strict: unknown keys and wrong types are
rejected, and every nested invariant is checked. Individual keys can be
overridden with dotted paths such as ``bridge.alpha=0.02`` or
``bridge.stages.1.sigma_scale=0.04``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass
from pathlib import Path

from .bridge import BridgeConfig, NoiseSchedule, StageSpec
from .errors import ConfigError, MissingFile
from .field import FieldTemplate

MASK_METHODS = ("scene", "nearest", "ray", "external")


@dataclass
class MaskConfig:
    """Contact source for ``refine`` and parameters for ``contact``.

    ``scene`` uses the mask stored with the scene (or its nearest-point
    fallback); the other methods recompute it.
    """

    method: str = "scene"
    tau: float = 0.01
    softness: float | None = None
    max_range: float = 0.05
    path: str | None = None

    def __post_init__(self):
        if self.method not in MASK_METHODS:
            raise ConfigError(f"mask.method must be one of {MASK_METHODS}")
        if not self.tau > 0:
            raise ConfigError("mask.tau must be > 0")
        if self.softness is not None and not self.softness > 0:
            raise ConfigError("mask.softness must be > 0")
        if not self.max_range > 0:
            raise ConfigError("mask.max_range must be > 0")


@dataclass
class MetricsConfig:
    iv_resolution: int = 128
    pd_tolerance: float = 0.0005

    def __post_init__(self):
        if self.iv_resolution < 16:
            raise ConfigError("metrics.iv_resolution must be >= 16")
        if not self.pd_tolerance >= 0:
            raise ConfigError("metrics.pd_tolerance must be >= 0")


@dataclass
class IOConfig:
    input_dir: str | None = None
    output_dir: str | None = None
    seed: int = 0


@dataclass
class RunConfig:
    bridge: BridgeConfig = dataclasses.field(default_factory=BridgeConfig)
    field: FieldTemplate = dataclasses.field(default_factory=FieldTemplate)
    mask: MaskConfig = dataclasses.field(default_factory=MaskConfig)
    metrics: MetricsConfig = dataclasses.field(default_factory=MetricsConfig)
    io: IOConfig = dataclasses.field(default_factory=IOConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# ------------------------------------------------------------------ parsing


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{where}: null is not allowed")
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
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
    if hint in (list, tuple) or origin in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return value
    raise ConfigError(f"{where}: unsupported field type {hint}")


# fields whose element type is not recoverable from the annotation alone
_ELEMENTS = {(BridgeConfig, "stages"): StageSpec, (FieldTemplate, "sigmas"): float, (FieldTemplate, "ks"): float}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        elem = _ELEMENTS.get((cls, key))
        if elem is not None:
            if not isinstance(value, list):
                raise ConfigError(f"{path}: expected a list")
            items = [_coerce(v, elem, f"{path}.{i}") for i, v in enumerate(value)]
            kwargs[key] = tuple(items) if cls is FieldTemplate else items
        else:
            kwargs[key] = _coerce(value, hints[key], path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the JSON file at ``path`` (if any), then ``key=value`` overrides."""
    data = RunConfig().to_dict()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingFile(str(p))
        try:
            user = json.loads(p.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{p}: config must be a JSON object")
        _merge(data, user, "")
    for item in overrides:
        apply_override(data, item)
    return from_dict(data)


def _merge(base: dict, user: dict, where: str):
    for key, value in user.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"{path}: unknown key")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, path)
        else:
            base[key] = value


def apply_override(data: dict, item: str) -> None:
    """Apply ``dotted.path=value``; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    parts = key.strip().split(".")
    node = data
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            if not part.isdigit() or int(part) >= len(node):
                raise ConfigError(f"override {key!r}: bad list index {part!r}")
            idx = int(part)
            if last:
                node[idx] = value
            else:
                node = node[idx]
        elif isinstance(node, dict):
            if part not in node:
                raise ConfigError(f"override {key!r}: unknown key {part!r}")
            if last:
                node[part] = value
            else:
                node = node[part]
        else:
            raise ConfigError(f"override {key!r}: {part!r} is not a section")


__all__ = [
    "RunConfig", "MaskConfig", "MetricsConfig", "IOConfig", "NoiseSchedule", "StageSpec",
    "load_config", "from_dict", "apply_override",
]
