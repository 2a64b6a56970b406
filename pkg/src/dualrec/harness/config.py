"""Experiment configuration: JSON files describing tasks, corpora, strategy grids and seeds."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..synth import PRESETS, TaskSpec, cipher_task, preset_task
from ..trainers import DESK_CONFIG, TrainConfig, parse_strategy

DEFAULT_GRID = (
    "supervised",
    "BT",
    "IBT-batch",
    "IBT-epoch(1)",
    "IBT-epoch(2)",
    "IBT-epoch(3)",
    "DualLearning(0)",
    "DualLearning(0.1)",
    "DualLearning(0.5)",
)
FORMATS = ("csv", "json", "svg")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: dict = field(default_factory=lambda: {"preset": "low-resource"})
    corpus: dict = field(default_factory=dict)
    train: dict = field(default_factory=lambda: dict(DESK_CONFIG))
    strategies: list = field(default_factory=lambda: list(DEFAULT_GRID))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out: str = ""
    formats: list = field(default_factory=lambda: list(FORMATS))
    theory: dict = field(default_factory=dict)
    mi: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        try:
            self.seeds = [int(s) for s in self.seeds]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"seeds must be integers: {e}") from None
        bad = set(self.formats) - set(FORMATS)
        if bad:
            raise ConfigError(f"unknown report formats {sorted(bad)}")
        preset = self.task.get("preset")
        if preset is not None and preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        if preset is None and "spec" not in self.task:
            raise ConfigError("task needs either 'preset' or 'spec'")
        for entry in self.strategies:
            try:
                self.train_config(entry, 0)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"strategy {entry!r}: {e}") from None
        try:
            self.task_spec()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"task: {e}") from None

    def task_spec(self) -> TaskSpec:
        if "spec" in self.task:
            return cipher_task(**self.task["spec"])
        return preset_task(self.task["preset"], seed=int(self.task.get("task_seed", 0)))

    def corpus_sizes(self) -> dict:
        sizes = dict(PRESETS[self.task.get("preset", "low-resource")])
        sizes.update(self.corpus)
        return sizes

    def train_config(self, entry, seed: int) -> TrainConfig:
        """Base train settings overlaid with a grid entry (a label or a dict of deltas)."""
        d = dict(self.train)
        if isinstance(entry, str):
            d["strategy"] = entry
        elif isinstance(entry, dict):
            d.update(entry)
        else:
            raise TypeError("grid entries are strategy labels or objects of TrainConfig fields")
        d["seed"] = seed
        parse_strategy(d.get("strategy", "supervised"))
        return TrainConfig.from_dict(d)

    def as_dict(self) -> dict:
        return {
            "task": self.task, "corpus": self.corpus, "train": self.train, "strategies": self.strategies,
            "seeds": self.seeds, "out": self.out, "formats": self.formats, "theory": self.theory, "mi": self.mi,
        }

    def digest(self) -> str:
        """Hash of everything that affects results (not the output location or formats)."""
        d = self.as_dict()
        d.pop("out")
        d.pop("formats")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def task_id(self) -> str:
        blob = json.dumps({"task": self.task, "corpus": self.corpus_sizes()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def load_config(path=None, **overrides) -> ExperimentConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: malformed JSON ({e})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be an object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    try:
        return ExperimentConfig(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def parse_distribution(text, size=None) -> np.ndarray:
    """``uniform:N``, ``zipf:N`` or an explicit list of weights."""
    if isinstance(text, str):
        kind, _, n = text.partition(":")
        n = int(n or size or 0)
        if n < 1:
            raise ConfigError(f"distribution {text!r} needs a size")
        if kind == "uniform":
            return np.full(n, 1.0 / n)
        if kind == "zipf":
            w = 1.0 / np.arange(1, n + 1)
            return w / w.sum()
        raise ConfigError(f"unknown distribution {text!r}")
    v = np.asarray(text, dtype=np.float64)
    if v.ndim != 1 or np.any(v < 0) or v.sum() <= 0:
        raise ConfigError("distribution weights must be a non-negative list")
    return v / v.sum()
