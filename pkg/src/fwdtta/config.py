"""Run configuration and the scenario builder shared by the CLI and scripts.

A JSON config has optional sections ``data``, ``model``, ``stream``,
``adapt`` and ``sensitivity`` plus top-level ``seed`` and ``checkpoint``.
Unknown keys at any level raise :class:`ConfigError`. Every seed used by a run
is derived from the single top-level ``seed``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import CORRUPTIONS, Architecture, Corruption, Dataset, StreamPlan, fit_source_model, make_dataset
from .engine import AdaptConfig
from .model import FeatureStats, QuantizedModel
from .numerics import make_rng
from .objective import DEFAULT_CALIBRATION_SIZE, calibrate_source_stats

DATA_ALIASES = {"blobs": "synthetic-blobs", "spirals": "synthetic-spirals", "idx": "idx-images"}


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (a usage error)."""


@dataclass
class DataConfig:
    kind: str = "synthetic-blobs"
    params: dict = field(default_factory=lambda: {
        "image_shape": [3, 12, 12], "num_classes": 10, "n_train": 2000, "n_calib": 64, "n_test": 2000,
        "separation": 0.25, "noise": 0.1})

    def __post_init__(self):
        self.kind = DATA_ALIASES.get(self.kind, self.kind)


@dataclass
class ModelConfig:
    arch: str = "cnn"
    widths: list[int] = field(default_factory=lambda: [16, 32, 32])
    strides: list[int] = field(default_factory=lambda: [1, 2, 2])
    norm: str | None = None
    bits: int | None = 8
    frozen_layers: list[str] = field(default_factory=list)
    calibration_size: int = DEFAULT_CALIBRATION_SIZE

    def architecture(self) -> Architecture:
        return Architecture(self.arch, tuple(self.widths), tuple(self.strides), self.norm, tuple(self.frozen_layers))


@dataclass
class StreamConfig:
    corruptions: list[str] = field(default_factory=lambda: list(CORRUPTIONS))
    severity: int = 3
    rounds: int = 10
    batch_size: int = 64
    batches_per_episode: int = 10

    def plan(self, seed: int) -> StreamPlan:
        eps = [Corruption(k, self.severity) for k in self.corruptions]
        return StreamPlan(eps, self.rounds, self.batch_size, self.batches_per_episode, seed)


@dataclass
class SensitivityConfig:
    dim: int = 32
    num_samples: int = 100_000
    bits: list[int] = field(default_factory=lambda: list(range(2, 9)))
    num_models: int = 2000


_ADAPT_KEYS = {f.name for f in fields(AdaptConfig)} - {"seed"}


@dataclass
class RunConfig:
    seed: int = 0
    checkpoint: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    adapt: dict = field(default_factory=dict)
    sensitivity: SensitivityConfig = field(default_factory=SensitivityConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(d, {f.name for f in fields(cls)}, "config")
        kw = {k: d[k] for k in ("seed", "checkpoint") if k in d}
        for name, sub in (("data", DataConfig), ("model", ModelConfig), ("stream", StreamConfig),
                          ("sensitivity", SensitivityConfig)):
            if name in d:
                _reject_unknown(d[name], {f.name for f in fields(sub)}, name)
                kw[name] = sub(**d[name])
        if "adapt" in d:
            _reject_unknown(d["adapt"], _ADAPT_KEYS, "adapt")
            kw["adapt"] = dict(d["adapt"])
        cfg = cls(**kw)
        cfg.adapt_config()  # validate early
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def seeds(self) -> dict[str, int]:
        """Independent child seeds for every random consumer of a run."""
        children = np.random.SeedSequence(self.seed).spawn(4)
        names = ("data", "model", "stream", "adapt")
        return {n: int(c.generate_state(1, dtype=np.uint32)[0]) for n, c in zip(names, children)}

    def adapt_config(self) -> AdaptConfig:
        try:
            return AdaptConfig(**{**self.adapt, "seed": self.seeds()["adapt"]})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"adapt: {exc}") from exc

    def resolved(self) -> dict:
        """Fully resolved config with every default filled in."""
        out = asdict(self)
        out["adapt"] = asdict(self.adapt_config())
        out["derived_seeds"] = self.seeds()
        return out


def _reject_unknown(d, allowed: set[str], where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


@dataclass
class Scenario:
    dataset: Dataset
    model: QuantizedModel
    source_stats: FeatureStats
    plan: StreamPlan


def build_dataset(cfg: RunConfig) -> Dataset:
    return make_dataset(cfg.data.kind, cfg.data.params, make_rng(cfg.seeds()["data"]))


def fit_model(cfg: RunConfig, dataset: Dataset) -> QuantizedModel:
    return fit_source_model(cfg.model.architecture(), dataset, cfg.model.bits, make_rng(cfg.seeds()["model"]))


def source_stats_for(cfg: RunConfig, model: QuantizedModel, dataset: Dataset) -> FeatureStats:
    x = dataset.x_calib[: cfg.model.calibration_size]
    if model.arch["kind"] == "mlp":
        x = x.reshape(len(x), -1)
    return calibrate_source_stats(model, x, batch_stats=cfg.adapt_config().norm_batch_stats)


def build_scenario(cfg: RunConfig, model: QuantizedModel | None = None,
                   stats: FeatureStats | None = None) -> Scenario:
    dataset = build_dataset(cfg)
    model = model if model is not None else fit_model(cfg, dataset)
    stats = stats if stats is not None else source_stats_for(cfg, model, dataset)
    return Scenario(dataset, model, stats, cfg.stream.plan(cfg.seeds()["stream"]))
