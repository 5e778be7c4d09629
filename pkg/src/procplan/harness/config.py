"""One JSON document holding world, training and evaluation settings."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..gail import ABLATIONS, TrainConfig, parse_ablations
from ..planner import EXACT_LIMIT, MAX_HORIZON
from ..taskworld import WorldConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    horizons: tuple = (3, 4)
    walk_horizon: int = 4
    # None evaluates every window of every test trajectory
    queries_per_trajectory: int | None = None
    test_fraction: float = 0.3
    plan_mode: str = "mean"
    num_samples: int = 1
    rollout_mode: str = "greedy"

    def __post_init__(self):
        self.horizons = tuple(int(h) for h in self.horizons)
        if not self.horizons or min(self.horizons) < 2:
            raise ConfigError("eval horizons must be >= 2")
        if max(self.horizons) > MAX_HORIZON:
            raise ConfigError(f"eval horizon {max(self.horizons)} exceeds the planner maximum {MAX_HORIZON}")
        if not 2 <= self.walk_horizon <= EXACT_LIMIT:
            raise ConfigError(f"walk_horizon must lie in [2, {EXACT_LIMIT}]")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.queries_per_trajectory is not None and self.queries_per_trajectory < 1:
            raise ConfigError("queries_per_trajectory must be >= 1 or null")


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    variant: str = "ext"
    ablations: tuple = ()
    # drives the split, training and evaluation; the world has its own seed
    seed: int = 0

    def __post_init__(self):
        self.world = _build(WorldConfig, self.world, "world")
        self.train = _build(TrainConfig, self.train, "train")
        self.eval = _build(EvalConfig, self.eval, "eval")
        if self.variant not in ("int", "ext"):
            raise ConfigError(f"variant must be 'int' or 'ext', got {self.variant!r}")
        try:
            self.ablations = tuple(sorted(parse_ablations(self.ablations)))
        except ValueError as e:
            raise ConfigError(str(e)) from None
        self.validate()

    def validate(self):
        lo, hi = self.world.steps_per_task
        if max(self.eval.horizons) > hi or self.eval.walk_horizon > hi:
            raise ConfigError(f"eval horizons {self.eval.horizons} / walk {self.eval.walk_horizon} "
                              f"exceed the longest task ({hi} steps)")
        if self.world.steps_per_task[0] < 2:
            raise ConfigError("tasks need at least two steps")

    def with_seed(self, seed):
        d = self.to_dict()
        d["seed"] = int(seed)
        return ExperimentConfig.from_dict(d)

    def train_config(self) -> TrainConfig:
        d = asdict(self.train)
        d["seed"] = self.seed
        d["context"]["seed"] = self.seed
        return TrainConfig(**d)

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        return cls(**d)


def _build(cls, value, section):
    if isinstance(value, cls):
        return value
    if not isinstance(value, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(value) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {sorted(unknown)}")
    try:
        return cls(**value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return ExperimentConfig.from_dict(raw)


__all__ = ["ABLATIONS", "ConfigError", "EvalConfig", "ExperimentConfig", "load_config"]
