"""Run configuration in a flat ``section.key = value`` text format."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .anticipation import AnticipationConfig
from .data import SyntheticConfig
from .model import ModelConfig
from .training import OptimConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    path: str = ""  # feature file; empty means generate from the data section
    count: int = 1200
    val_fraction: float = 0.2
    actions: int = 0  # 0 means verbs * nouns


@dataclass
class RunSection:
    seed: int = 0
    deterministic: bool = False
    out: str = "run"
    checkpoint_every: int = 1  # epochs


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    anticipation: AnticipationConfig = field(default_factory=AnticipationConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    run: RunSection = field(default_factory=RunSection)

    @property
    def num_actions(self) -> int:
        return self.dataset.actions or self.data.verbs * self.data.nouns


SECTIONS = tuple(f.name for f in dataclasses.fields(RunConfig))


def _hints(cls) -> dict[str, object]:
    return typing.get_type_hints(cls)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, typ, key: str):
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typing.get_origin(typ) is tuple:
            (inner, *_) = typing.get_args(typ)
            return tuple(inner(p.strip()) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{key}: unsupported type {typ}")


def to_pairs(cfg: RunConfig) -> list[tuple[str, str]]:
    pairs = []
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            pairs.append((f"{sec}.{f.name}", _format(getattr(obj, f.name))))
    return pairs


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_pairs(cfg))


def set_value(cfg: RunConfig, key: str, raw: str) -> None:
    sec, _, name = key.partition(".")
    if sec not in SECTIONS or not name:
        raise ConfigError(f"unknown config key {key!r}")
    obj = getattr(cfg, sec)
    hints = _hints(type(obj))
    if name not in hints or name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(obj, name, _parse(raw, hints[name], key))


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        set_value(cfg, key.strip(), value.strip())
    try:
        cfg.anticipation.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
