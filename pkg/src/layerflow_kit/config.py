"""One JSON document holding every run default; unknown keys are errors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .backbone import BackboneConfig


@dataclass
class ScheduleConfig:
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2


@dataclass
class DataConfig:
    count: int = 64            # quadruples per tier
    frames: int = 4
    height: int = 16
    width: int = 16
    dir: str = "data"


@dataclass
class StageSettings:
    lr: float
    steps: int
    batch_size: int = 2
    prompt_drop: float = 0.1
    frozen_fraction: float = 0.8


def _default_stages() -> dict:
    return {
        "1": StageSettings(lr=1e-4, steps=2000),
        "2": StageSettings(lr=1e-3, steps=500),
        "3": StageSettings(lr=5e-3, steps=1000),
    }


@dataclass
class SampleConfig:
    steps: int = 20
    scale: float = 6.0
    dump_frames: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    stages: dict = field(default_factory=_default_stages)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def echo(self, out_dir) -> Path:
        """Write the resolved config next to a command's outputs."""
        path = Path(out_dir) / "resolved_config.json"
        path.write_text(self.dumps())
        return path


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ValueError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ValueError(f"unknown config key {where}.{unknown[0]}")
    base = cls() if cls is not StageSettings else None
    kwargs = {}
    for name, f in known.items():
        if name not in raw:
            continue
        current = getattr(base, name) if base is not None else None
        value = raw[name]
        if is_dataclass(current):
            value = _build(type(current), value, f"{where}.{name}")
        elif name == "stages":
            value = _build_stages(value, f"{where}.stages")
        kwargs[name] = value
    return cls(**kwargs)


def _build_stages(raw, where: str) -> dict:
    out = _default_stages()
    if not isinstance(raw, dict):
        raise ValueError(f"{where}: expected an object")
    for key, val in raw.items():
        if key not in out:
            raise ValueError(f"unknown config key {where}.{key}")
        merged = {**asdict(out[key]), **val} if isinstance(val, dict) else val
        out[key] = _build(StageSettings, merged, f"{where}.{key}")
    return out


def from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "config")


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e})") from None
    return from_dict(raw)
