"""Experiment configuration: one JSON document fully determines a run."""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .ddpg import DdpgConfig
from .scheduler import combination_label, combinations


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


STRATEGIES = ("flexmod", "entire_update", "single_modality", "fixed_beta")


@dataclass(frozen=True)
class Strategy:
    kind: str
    modality: int | None = None      # 0-based, single_modality only
    beta: float | None = None        # fixed_beta only
    pin: int | None = None           # flexmod: force every slot onto this combination

    @classmethod
    def parse(cls, text: str, modality_names: list[str] | None = None) -> "Strategy":
        """``flexmod``, ``entire_update``, ``single_modality:<name or 1-based index>``,
        ``fixed_beta:<value>``."""
        kind, _, arg = text.strip().partition(":")
        if kind not in STRATEGIES:
            raise ConfigError(f"unknown strategy {text!r}; expected one of {', '.join(STRATEGIES)}")
        if kind == "single_modality":
            names = modality_names or []
            if arg in names:
                return cls(kind, modality=names.index(arg))
            try:
                m = int(arg) - 1
            except ValueError:
                raise ConfigError(f"strategy {text!r}: unknown modality {arg!r}") from None
            if m < 0 or (names and m >= len(names)):
                raise ConfigError(f"strategy {text!r}: modality index out of range")
            return cls(kind, modality=m)
        if kind == "fixed_beta":
            try:
                beta = float(arg)
            except ValueError:
                raise ConfigError(f"strategy {text!r}: fixed_beta needs a numeric value") from None
            if not 0.0 <= beta <= 1.0:
                raise ConfigError(f"strategy {text!r}: beta must lie in [0, 1]")
            return cls(kind, beta=beta)
        if arg:
            raise ConfigError(f"strategy {text!r} takes no argument")
        return cls(kind)

    def label(self, modality_names: list[str] | None = None) -> str:
        if self.kind == "single_modality":
            name = modality_names[self.modality] if modality_names else str(self.modality + 1)
            return f"single_modality:{name}"
        if self.kind == "fixed_beta":
            return f"fixed_beta:{self.beta:g}"
        return self.kind


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    modalities: list[str] = field(default_factory=lambda: ["acc", "gyro"])
    num_classes: int = 6
    dims: list[int] = field(default_factory=lambda: [14, 80])
    informativeness: list[float] = field(default_factory=lambda: [0.9, 0.3])
    noise: float = 1.7
    csv_paths: list[str] = field(default_factory=list)
    label_column: str = "label"
    clients: int = 10
    samples_per_client: int = 600
    alpha: float = 10.0
    validation_fraction: float = 0.01


@dataclass
class ModelConfig:
    feature_dim: int = 16
    encoder_hidden: list[list[int]] = field(default_factory=lambda: [[32], [32]])
    header_hidden: list[int] = field(default_factory=lambda: [32])
    encoder_activation: str = "relu"


@dataclass
class ScheduleConfig:
    times: dict[str, int] = field(default_factory=lambda: {"acc": 4, "gyro": 3, "acc+gyro": 5})
    budget: int = 24
    strategy: str = "flexmod"
    batch_size: int = 64
    slot: str = "sweep"                # "sweep" (pass over the shard) or "minibatch"
    learning_rate: float = 0.05
    lr_decay: float = 0.99
    lr_floor: float = 0.001


@dataclass
class RunConfig:
    rounds: int = 30
    seed: int = 0
    early_stop: bool = False
    target_acc: float = 0.68
    output_dir: str = "runs/latest"
    agent_checkpoint_in: str | None = None
    agent_checkpoint_out: str | None = None


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    agent: dict[str, Any] = field(default_factory=dict)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        self.validate()

    # -- derived views

    @property
    def num_modalities(self) -> int:
        return len(self.dataset.modalities)

    def strategy(self) -> Strategy:
        return Strategy.parse(self.schedule.strategy, self.dataset.modalities)

    def ddpg_config(self) -> DdpgConfig:
        return DdpgConfig(**{**self.agent, "target_acc": self.run.target_acc})

    def time_table(self) -> np.ndarray:
        """Unit times in combination-index order."""
        names = self.dataset.modalities
        lookup = {}
        for key, t in self.schedule.times.items():
            parts = [p.strip() for p in key.split("+")]
            lookup[frozenset(names.index(p) for p in parts)] = t
        return np.array([lookup[frozenset(c)] for c in combinations(len(names))], dtype=np.int64)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Copy with ``section={field: value}`` overrides applied."""
        d = copy.deepcopy(self.to_dict())
        for section, values in sections.items():
            if section == "agent":
                d["agent"].update(values)
            else:
                d[section].update(values)
        return ExperimentConfig.from_dict(d)

    # -- validation

    def validate(self) -> None:
        ds, md, sc, rn = self.dataset, self.model, self.schedule, self.run
        m = len(ds.modalities)
        if m < 1:
            raise ConfigError("dataset.modalities: at least one modality required")
        if len(set(ds.modalities)) != m or any("+" in n or not n for n in ds.modalities):
            raise ConfigError("dataset.modalities: names must be unique, non-empty and free of '+'")
        if ds.source not in ("synthetic", "csv"):
            raise ConfigError(f"dataset.source: expected 'synthetic' or 'csv', got {ds.source!r}")
        if ds.source == "synthetic":
            if len(ds.dims) != m:
                raise ConfigError(f"dataset.dims: expected {m} entries, got {len(ds.dims)}")
            if len(ds.informativeness) != m:
                raise ConfigError(f"dataset.informativeness: expected {m} entries, got {len(ds.informativeness)}")
            if any(not 0 <= v <= 1 for v in ds.informativeness):
                raise ConfigError("dataset.informativeness: values must lie in [0, 1]")
            if ds.num_classes < 2:
                raise ConfigError("dataset.num_classes: must be >= 2")
            if ds.noise <= 0:
                raise ConfigError("dataset.noise: must be positive")
        elif len(ds.csv_paths) != m:
            raise ConfigError(f"dataset.csv_paths: expected one file per modality ({m}), got {len(ds.csv_paths)}")
        if ds.clients < 1:
            raise ConfigError("dataset.clients: must be >= 1")
        if ds.samples_per_client < 1:
            raise ConfigError("dataset.samples_per_client: must be >= 1")
        if ds.alpha <= 0:
            raise ConfigError("dataset.alpha: must be positive")
        if not 0 < ds.validation_fraction < 1:
            raise ConfigError("dataset.validation_fraction: must lie in (0, 1)")

        if md.feature_dim < 1:
            raise ConfigError("model.feature_dim: must be >= 1")
        if len(md.encoder_hidden) != m:
            raise ConfigError(f"model.encoder_hidden: expected {m} entries, got {len(md.encoder_hidden)}")
        if md.encoder_activation not in ("relu", "tanh", "sigmoid", "identity"):
            raise ConfigError(f"model.encoder_activation: unknown activation {md.encoder_activation!r}")

        names = ds.modalities
        seen = set()
        for key, t in sc.times.items():
            parts = [p.strip() for p in key.split("+")]
            unknown = [p for p in parts if p not in names]
            if unknown:
                raise ConfigError(f"schedule.times[{key!r}]: unknown modality {unknown[0]!r}")
            if not isinstance(t, int) or isinstance(t, bool) or t < 1:
                raise ConfigError(f"schedule.times[{key!r}]: unit time must be a positive integer, got {t!r}")
            seen.add(frozenset(names.index(p) for p in parts))
        for c in combinations(m):
            if frozenset(c) not in seen:
                raise ConfigError(f"schedule.times: missing unit time for combination "
                                  f"{combination_label(c, names)!r}")
        if not isinstance(sc.budget, int) or sc.budget < 0:
            raise ConfigError("schedule.budget: must be a non-negative integer")
        if sc.batch_size < 1:
            raise ConfigError("schedule.batch_size: must be >= 1")
        if sc.slot not in ("sweep", "minibatch"):
            raise ConfigError("schedule.slot: expected 'sweep' or 'minibatch'")
        if sc.learning_rate <= 0 or not 0 < sc.lr_decay <= 1 or not 0 < sc.lr_floor <= sc.learning_rate:
            raise ConfigError("schedule.learning_rate/lr_decay/lr_floor: need lr > 0, decay in (0, 1], "
                              "0 < floor <= lr")
        strategy = Strategy.parse(sc.strategy, names)
        if strategy.kind == "single_modality" and strategy.modality >= m:
            raise ConfigError("schedule.strategy: modality index out of range")

        unknown = set(self.agent) - {f.name for f in fields(DdpgConfig)} - {"target_acc"}
        if unknown:
            raise ConfigError(f"agent.{sorted(unknown)[0]}: unknown field")
        try:
            self.ddpg_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"agent: {exc}") from None

        if not isinstance(rn.seed, int) or rn.seed < 0:
            raise ConfigError("run.seed: must be a non-negative integer")
        if rn.rounds < 0:
            raise ConfigError("run.rounds: must be >= 0")
        if not 0 <= rn.target_acc <= 1:
            raise ConfigError("run.target_acc: must lie in [0, 1]")

    # -- construction

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: top level must be a JSON object")
        unknown = set(d) - {"dataset", "model", "schedule", "agent", "run"}
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown section")
        sections = {}
        for name, klass in (("dataset", DatasetConfig), ("model", ModelConfig),
                            ("schedule", ScheduleConfig), ("run", RunConfig)):
            raw = d.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"{name}: must be an object")
            allowed = {f.name for f in fields(klass)}
            for key in raw:
                if key not in allowed:
                    raise ConfigError(f"{name}.{key}: unknown field")
            sections[name] = klass(**copy.deepcopy(raw))
        agent = d.get("agent", {})
        if not isinstance(agent, dict):
            raise ConfigError("agent: must be an object")
        return cls(agent=copy.deepcopy(agent), **sections)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named sub-stream of the root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])
