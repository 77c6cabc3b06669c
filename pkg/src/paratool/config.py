"""Run configuration: nested dataclasses loaded strictly from JSON."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .adapter import AdapterConfig
from .gating import GateConfig
from .model import ModelConfig
from .pipeline import BackboneConfig, Stage1Config, Stage3Config, StageConfig
from .synth import SynthConfig
from .theory import TheoryConfig


class ConfigError(ValueError):
    pass


@dataclass
class FlopsConfig:
    profiles: str | None = None  # optional profile file; corpus-derived profiles are always added
    large_scale: bool = True


@dataclass
class RunConfig:
    name: str = "default"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    model: ModelConfig = field(default_factory=ModelConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    stages: StageConfig = field(default_factory=StageConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    theory: TheoryConfig = field(default_factory=TheoryConfig)
    flops: FlopsConfig = field(default_factory=FlopsConfig)
    backbone_path: str | None = None

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value, tp = data[f.name], hints[f.name]
        key = f"{where}.{f.name}" if where else f.name
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, value, key)
        elif typing.get_origin(tp) is tuple and isinstance(value, list):
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def smoke() -> RunConfig:
    """Seconds-scale settings for tests: same code paths, tiny budgets."""
    return RunConfig(
        name="smoke",
        seeds=[0],
        model=ModelConfig(hidden=16, layers=1, heads=2, d_ff=32, max_len=160),
        adapter=AdapterConfig(rank=4, scale=16.0),
        stages=StageConfig(
            backbone=BackboneConfig(episodes=200, steps=20, batch_size=16),
            stage1=Stage1Config(epochs=1, batch_size=32),
            gate=GateConfig(hidden=16, epochs=2),
            stage3=Stage3Config(epochs=1, batch_size=64),
        ),
        synth=SynthConfig(n_tools=4, atomic_per_tool=4, test_atomic_per_tool=2),
        theory=TheoryConfig(n_inputs=2, n_alpha=8, held_out_alpha=8, beta_probes=8, radius_probes=8),
    )


def published() -> RunConfig:
    cfg = RunConfig(name="published", stages=StageConfig.published())
    return cfg


PRESETS = {"default": RunConfig, "smoke": smoke, "published": published}


def load(spec: str) -> RunConfig:
    """A preset name or a path to a JSON config file."""
    if spec in PRESETS:
        return PRESETS[spec]()
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"no preset or file named {spec!r}; presets: {sorted(PRESETS)}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_dict(data)
