"""Experiment configuration: nested dataclasses with a strict ``section.key = value`` text format."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"          # "synthetic" or a prepared dataset directory
    n_nodes: int = 60
    n_steps: int = 2016
    sample_period_minutes: int = 5
    seed: int = 0
    noise_std: float = 1.0
    event_std: float = 4.0
    threshold: float = 0.1
    unobserved_ratio: float = 0.2


@dataclass
class MissingConfig:
    pattern: str = "mixed"
    rate: float = 0.2
    block_len_min: int = 6
    block_len_max: int = 12
    block_spatial_hops: int = 1
    block_max_nodes: int = 5


@dataclass
class ModelConfig:
    hidden: int = 64
    order: int = 2
    n_layers: int = 3
    d_m: int = 32
    gamma: float = 0.1


@dataclass
class JigsawConfig:
    K_w: int = 5
    K_n: int = 8
    tau_w: float = 0.1
    tau_n: float = 0.1
    d_tau: int = 32
    d_w: int = 32
    d_o: int = 32
    d_n: int = 32
    exclude_overlap: bool = True


@dataclass
class EvalConfig:
    mape_eps: float = 1.0
    mape_max_excluded: float = 0.5
    preimpute: tuple = ()              # proxies among {"mean", "locf"}


@dataclass
class GridConfig:
    patterns: tuple = ("mixed",)
    rates: tuple = (0.2, 0.4, 0.6, 0.8)
    unobserved_ratios: tuple = ()
    variants: tuple = ("vanilla", "full")
    seeds: tuple = (0, 1, 2)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    data: DataConfig = field(default_factory=DataConfig)
    missing: MissingConfig = field(default_factory=MissingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    jigsaw: JigsawConfig = field(default_factory=JigsawConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    grid: GridConfig = field(default_factory=GridConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()

    def jigsaw_kwargs(self) -> dict:
        return dataclasses.asdict(self.jigsaw)


_SECTIONS = [f.name for f in dataclasses.fields(ExperimentConfig) if f.name != "name"]


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _scalar(text: str, kind, key: str):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None


_TUPLE_ELEM = {"patterns": str, "rates": float, "unobserved_ratios": float, "variants": str,
               "seeds": int, "preimpute": str}


def _parse_value(text: str, kind, key: str):
    if kind is tuple:
        elem = _TUPLE_ELEM[key.rsplit(".", 1)[-1]]
        return tuple(_scalar(s, elem, key) for s in (p.strip() for p in text.split(",")) if s)
    return _scalar(text, kind, key)


def apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    """Apply ``section.key=value`` strings (or ``(key, value)`` pairs); unknown keys raise."""
    sections = {name: dataclasses.asdict(getattr(cfg, name)) for name in _SECTIONS}
    name = cfg.name
    for item in pairs:
        key, value = item if isinstance(item, tuple) else _split(item)
        if key == "name":
            name = value.strip()
            continue
        sec, _, sub = key.partition(".")
        if sec not in sections or not sub:
            raise ConfigError(f"unknown config key {key!r}")
        types = _field_types(type(getattr(cfg, sec)))
        if sub not in types:
            raise ConfigError(f"unknown config key {key!r}")
        sections[sec][sub] = _parse_value(value, types[sub], key)
    try:
        built = {sec: type(getattr(cfg, sec))(**vals) for sec, vals in sections.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(name=name, **built)


def _split(item: str):
    if "=" not in item:
        raise ConfigError(f"expected key=value, got {item!r}")
    key, value = item.split("=", 1)
    return key.strip(), value


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value))
    return apply_overrides(base or ExperimentConfig(), pairs)


def load_config(path, overrides=()) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return apply_overrides(parse_config_text(p.read_text()), overrides)


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = [f"name = {cfg.name}"]
    for sec in _SECTIONS:
        for key, value in dataclasses.asdict(getattr(cfg, sec)).items():
            lines.append(f"{sec}.{key} = {_format(value)}")
    return "\n".join(lines) + "\n"
