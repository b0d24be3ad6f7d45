"""Run configuration documents (YAML) with dotted ``key=value`` overrides."""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Any, Iterable, Optional

import yaml

from mhvae.errors import ContractError
from mhvae.hierarchy import CHANNEL_FLOOR, HierarchySpec, validate_spec
from mhvae.networks import ArchConfig
from mhvae.objective import LossWeights
from mhvae.trainer import TrainConfig


class ConfigError(ContractError):
    pass


_SECTIONS = ("hierarchy", "arch", "loss")
_TOP_KEYS = {f.name for f in fields(TrainConfig)} - set(_SECTIONS)
_ARCH_KEYS = {f.name for f in fields(ArchConfig)}
_LOSS_KEYS = {f.name for f in fields(LossWeights)}
# either the compact ladder description or an explicit one
_HIER_KEYS = {"num_levels", "top_channels", "floor", "spatial", "channels"}


def default_document() -> dict:
    cfg = TrainConfig()
    d = cfg.to_dict()
    d["hierarchy"] = {"num_levels": cfg.hierarchy.num_levels, "top_channels": cfg.hierarchy.channels[0], "floor": CHANNEL_FLOOR}
    return d


def _check_keys(d: Any, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _hierarchy(d: dict) -> HierarchySpec:
    _check_keys(d, _HIER_KEYS, "hierarchy")
    if "spatial" in d or "channels" in d:
        if "top_channels" in d or "floor" in d:
            raise ConfigError("hierarchy: give either spatial/channels or top_channels/floor, not both")
        try:
            spec = HierarchySpec(
                int(d.get("num_levels", len(d["channels"]))),
                tuple(tuple(s) for s in d["spatial"]),
                tuple(d["channels"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"hierarchy: malformed explicit ladder ({exc})") from exc
    else:
        spec = HierarchySpec.build(
            int(d.get("num_levels", 7)), int(d.get("top_channels", 256)), int(d.get("floor", CHANNEL_FLOOR))
        )
    validate_spec(spec)
    return spec


def _coerce(value: Any, like: Any, where: str) -> Any:
    if like is None or value is None:
        return value
    if isinstance(like, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(like, int) and not isinstance(like, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(like, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(like, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def _section(cls, d: dict, allowed: set, where: str):
    _check_keys(d, allowed, where)
    defaults = cls()
    kwargs = {k: _coerce(v, getattr(defaults, k), f"{where}.{k}") for k, v in d.items()}
    return cls(**kwargs)


def build_config(doc: dict) -> TrainConfig:
    """Turn a configuration mapping into a validated TrainConfig."""
    doc = dict(doc or {})
    _check_keys(doc, _TOP_KEYS | set(_SECTIONS), "config")
    defaults = TrainConfig()
    top = {k: _coerce(v, getattr(defaults, k), k) for k, v in doc.items() if k not in _SECTIONS}
    cfg = TrainConfig(
        hierarchy=_hierarchy(doc.get("hierarchy") or {}),
        arch=_section(ArchConfig, doc.get("arch") or {}, _ARCH_KEYS, "arch"),
        loss=_section(LossWeights, doc.get("loss") or {}, _LOSS_KEYS, "loss"),
        **top,
    )
    cfg.validate()
    return cfg


def apply_override(doc: dict, assignment: str) -> dict:
    """Set ``a.b=value`` in a nested mapping; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override {assignment!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {assignment!r}: {exc}") from exc
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {assignment!r}: {p} is not a section")
    node[parts[-1]] = value
    return doc


def read_document(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def load_config(path: Optional[str] = None, overrides: Iterable[str] = (), check_paths: bool = True) -> TrainConfig:
    doc = read_document(path) if path else {}
    for o in overrides:
        apply_override(doc, o)
    cfg = build_config(doc)
    if check_paths:
        manifest = Path(cfg.data_dir) / "manifest.json"
        if not manifest.is_file():
            raise ConfigError(f"data_dir {cfg.data_dir} has no manifest.json")
        out = Path(cfg.out_dir)
        if out.exists() and not out.is_dir():
            raise ConfigError(f"out_dir {out} exists and is not a directory")
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
