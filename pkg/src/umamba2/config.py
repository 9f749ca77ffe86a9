"""Run configuration: one JSON document covering every pipeline stage."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .architecture import ArchConfig, ConfigError
from .data_io import PhantomConfig
from .ssd import SsdConfig
from .training import DaeConfig, TrainConfig


@dataclass
class DaeSection:
    epochs: int = 20
    iters_per_epoch: int = 4
    batch_size: int = 2
    lr: float = 1e-2
    corruption: dict = field(default_factory=dict)

    def dae_config(self) -> DaeConfig:
        return _build(DaeConfig, self.corruption, "dae.corruption")


@dataclass
class InferenceSection:
    step_fraction: float = 0.5
    gaussian_blend: bool = True
    tta_axes: list = field(default_factory=lambda: [[1, 2]])


@dataclass
class PostprocessSection:
    connectivity: int = 26
    percentile: float = 0.5


@dataclass
class PathsSection:
    data_dir: str = "data"
    out_dir: str = "runs"


SECTIONS = {
    "arch": ArchConfig,
    "training": TrainConfig,
    "dae": DaeSection,
    "inference": InferenceSection,
    "postprocess": PostprocessSection,
    "phantom": PhantomConfig,
    "paths": PathsSection,
}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object, got {type(values).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    if cls is ArchConfig and "ssd" in values:
        values = dict(values, ssd=_build(SsdConfig, values["ssd"], f"{where}.ssd"))
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    dae: DaeSection = field(default_factory=DaeSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    postprocess: PostprocessSection = field(default_factory=PostprocessSection)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    paths: PathsSection = field(default_factory=PathsSection)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = sorted(set(d) - set(SECTIONS) - {"seed"})
        if unknown:
            raise ConfigError(f"unknown top-level config keys {unknown}")
        seed = int(d.get("seed", 0))
        parts = {}
        for name, section in SECTIONS.items():
            values = dict(d.get(name, {}))
            if "seed" in {f.name for f in dataclasses.fields(section)}:
                values.setdefault("seed", seed)
            parts[name] = _build(section, values, name)
        return cls(seed=seed, **parts)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)
