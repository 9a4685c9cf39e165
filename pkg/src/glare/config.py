"""Run configuration: defaults, config-file values, then --set overrides.

Every field has an explicit value after resolution; the fully resolved
configuration is written into the run directory so a run can be reproduced
from that copy alone. Unknown keys fail fast and name the offending key.
"""

from __future__ import annotations

import dataclasses
import types
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Union, get_args, get_origin, get_type_hints

import yaml

from .augment import AugConfig, PatchBlurConfig
from .backbone import BackboneConfig
from .objectives import HeadConfig, LossConfig
from .regions import RegionConfig
from .train import TrainConfig


@dataclass
class RunConfig:
    model: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    patch_blur: PatchBlurConfig = field(default_factory=PatchBlurConfig)
    regions: RegionConfig = field(default_factory=RegionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_root: str = ""
    out_dir: str = ""
    resume: str | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        return _build_dataclass(RunConfig, data, prefix="")


def _to_plain(value):
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def _field_types(cls) -> dict:
    return get_type_hints(cls)


def _unwrap_optional(tp):
    """Return (inner_type, optional_flag) for X | None annotations."""
    if get_origin(tp) in (Union, types.UnionType):
        args = [a for a in get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _build_dataclass(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ValueError(f"config section {prefix or '<root>'} must be a mapping")
    hints = _field_types(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        where = f"{prefix}." if prefix else ""
        raise ValueError(
            f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name in known:
        if name not in data:
            continue
        sub_prefix = f"{prefix}.{name}" if prefix else name
        tp, optional = _unwrap_optional(hints[name])
        value = data[name]
        if value is None and optional:
            kwargs[name] = None
        elif is_dataclass(tp):
            kwargs[name] = _build_dataclass(tp, value, sub_prefix)
        else:
            kwargs[name] = _coerce(value, tp, sub_prefix)
    return cls(**kwargs)


def _coerce(value, tp, key: str):
    origin = get_origin(tp)
    if origin is tuple or tp is tuple:
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"config key {key} expects a sequence, got {value!r}")
        return tuple(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ValueError(f"config key {key} expects a boolean, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"config key {key} expects a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"config key {key} expects an integer, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ValueError(f"config key {key} expects a string, got {value!r}")
        return value
    raise ValueError(f"config key {key} has unsupported type {tp}")


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply dotted ``key=value`` overrides onto a nested config dict."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {key}: {part} is not a section")
        node[parts[-1]] = yaml.safe_load(text)
    return data


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, overlaid with a YAML file, overlaid with --set overrides."""
    data: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {path} must hold a mapping")
        data = loaded
    if overrides:
        data = apply_overrides(data, overrides)
    return RunConfig.from_dict(data)


def save_config(cfg: RunConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
