"""Run configuration: one JSON file covering every stage, with a content digest."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .ingest import DEFAULT_SCHEMA
from .model import ModelConfig
from .nn import ConfigurationError, config_digest


@dataclass(frozen=True)
class IngestConfig:
    certainty_threshold: float = 0.9
    schema: tuple[str, ...] = DEFAULT_SCHEMA
    column_map: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AudioConfig:
    chunk_seconds: float = 2.0
    hop_seconds: float = 2.0


@dataclass(frozen=True)
class FeatureConfig:
    n_fft: int = 2048
    hop: int = 512
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float | None = None


@dataclass(frozen=True)
class SynthConfig:
    min_seconds: float = 2.0
    max_seconds: float = 8.0
    negative_confusion: float = 0.3


@dataclass(frozen=True)
class SplitConfig:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    targets: dict = field(default_factory=lambda: {"train": 600, "val": 75, "test": 75})


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.9
    level: str = "recording"  # or "chunk"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    ingest: IngestConfig = IngestConfig()
    audio: AudioConfig = AudioConfig()
    features: FeatureConfig = FeatureConfig()
    synth: SynthConfig = SynthConfig()
    split: SplitConfig = SplitConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, ModelConfig):
                d[f.name] = value.to_dict()
            elif is_dataclass(value):
                d[f.name] = json.loads(json.dumps(asdict(value)))
            else:
                d[f.name] = value
        return d

    @property
    def digest(self) -> str:
        return config_digest(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        sections = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(sections)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for name, value in data.items():
            default = getattr(cls(), name)
            if isinstance(default, ModelConfig):
                kw[name] = ModelConfig.from_dict(value)
            elif is_dataclass(default):
                kw[name] = _section(type(default), value, name)
            else:
                kw[name] = value
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _section(kind, value: dict, name: str):
    if not isinstance(value, dict):
        raise ConfigurationError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(kind)}
    unknown = set(value) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in {name!r}: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
    return kind(**kw)


def override(config: RunConfig, dotted: str, value) -> RunConfig:
    """Return a copy with ``section.key`` (or a top-level key) replaced."""
    d = config.to_dict()
    parts = dotted.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigurationError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node and not (len(parts) > 1 and parts[0] in ("split", "ingest") and parts[1] in ("targets", "column_map")):
        raise ConfigurationError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value
    return RunConfig.from_dict(d)
