"""Run configuration: strict JSON documents with a stable content hash."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from . import io
from .blocks import BlockVariant
from .diffusion import TrainConfig, ddim_timesteps, linear_schedule
from .errors import ConfigError
from .model import ModelConfig
from .toytask import TaskConfig


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 20
    # 0.5 quarters every SNR; at 1.0 the last step still shows most of the
    # target, and the network never has to copy the garment precisely
    signal_scale: float = 0.5

    def __post_init__(self):
        self.build()
        ddim_timesteps(self.T, self.sample_steps)

    def build(self):
        return linear_schedule(self.T, self.beta_start, self.beta_end, self.signal_scale)


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 16
    swap_samples: int = 50


def _strict(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class RunConfig:
    variant: str = BlockVariant.MN_V3.value
    seed: int = 0
    out: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = {
        "model": ModelConfig,
        "schedule": ScheduleConfig,
        "train": TrainConfig,
        "task": TaskConfig,
        "eval": EvalConfig,
    }

    def __post_init__(self):
        try:
            BlockVariant(self.variant)
        except ValueError:
            raise ConfigError(f"unknown variant {self.variant!r}") from None
        m, t = self.model, self.task
        if (m.height, m.width, m.channels, m.garment_size) != (t.height, t.width, t.channels, t.garment_size):
            raise ConfigError("model and task grids disagree")
        if t.frames > m.frames:
            raise ConfigError(f"task frames {t.frames} exceed model base frames {m.frames}")

    @property
    def block_variant(self) -> BlockVariant:
        return BlockVariant(self.variant)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        top = {"variant", "seed", "out", *cls.SECTIONS}
        unknown = sorted(set(data) - top)
        if unknown:
            raise ConfigError(f"unknown keys {unknown}")
        kwargs = {k: data[k] for k in ("variant", "seed", "out") if k in data}
        for name, section in cls.SECTIONS.items():
            if name in data:
                kwargs[name] = _strict(section, data[name], name)
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "out": self.out,
            **{name: dataclasses.asdict(getattr(self, name)) for name in self.SECTIONS},
        }

    @classmethod
    def load(cls, path: Path) -> RunConfig:
        try:
            data = io.read_json(path)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path: Path) -> None:
        io.write_json(path, self.to_dict())

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    @property
    def hash(self) -> str:
        """Content hash; the output directory does not take part."""
        d = self.to_dict()
        d.pop("out")
        return io.content_hash(d)

    def budget(self) -> dict:
        """Everything that must match for two runs to be comparable in an ablation."""
        d = self.to_dict()
        return {k: d[k] for k in ("model", "schedule", "train", "task", "eval")}
