"""Run configuration: paths, model and training settings, split sizes and seed, stored as YAML."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .model import ConfigError, ModelConfig
from .training import TrainConfig


@dataclass
class Paths:
    corpus_root: str = "data/Guzheng_Tech99"
    cache_dir: str | None = None
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    # train / valid / test track counts
    split_sizes: list[int] = field(default_factory=lambda: [79, 10, 10])
    seed: int = 0

    def validate(self) -> None:
        if len(self.split_sizes) != 3 or any(int(s) < 1 for s in self.split_sizes):
            raise ConfigError(f"split_sizes: need three positive track counts, got {self.split_sizes}")
        self.model.validate()
        self.train.validate()

    def to_dict(self) -> dict:
        return {
            "paths": asdict(self.paths),
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "split_sizes": [int(s) for s in self.split_sizes],
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        sections = {}
        for name, build in (("paths", _paths), ("model", ModelConfig.from_dict), ("train", TrainConfig.from_dict)):
            if name in d:
                raw = d.pop(name) or {}
                if not isinstance(raw, dict):
                    raise ConfigError(f"{name}: expected a mapping, got {type(raw).__name__}")
                try:
                    sections[name] = build(raw)
                except (ConfigError, TypeError, ValueError) as exc:
                    raise ConfigError(f"{name}: {exc}") from None
        cfg = cls(**sections, **d)
        cfg.split_sizes = list(cfg.split_sizes)
        cfg.validate()
        return cfg

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)


def _paths(d: dict) -> Paths:
    unknown = set(d) - {f.name for f in fields(Paths)}
    if unknown:
        raise ConfigError(f"unknown field(s): {sorted(unknown)}")
    return Paths(**d)
