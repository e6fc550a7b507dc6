"""Test-time loss: prediction entropy plus feature-statistics alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import FeatureStats, ForwardTrace, QuantizedModel, batch_feature_stats
from .numerics import DTYPE

PROB_FLOOR = 1e-12
DEFAULT_CALIBRATION_SIZE = 32
LAMBDA_DENSE = 30.0
LAMBDA_CONV = 1.0


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = LAMBDA_CONV

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("trade-off lambda must be non-negative")

    @classmethod
    def for_model(cls, model: QuantizedModel) -> "ObjectiveConfig":
        return cls(LAMBDA_CONV if model.arch["kind"] == "cnn" else LAMBDA_DENSE)


def calibrate_source_stats(model: QuantizedModel, id_batch: np.ndarray,
                           batch_stats: bool | None = None) -> FeatureStats:
    """Block statistics of unlabeled in-distribution data at zero offset."""
    id_batch = np.asarray(id_batch, dtype=DTYPE)
    if id_batch.shape[0] < 2:
        raise ValueError("calibration needs at least 2 samples")
    return batch_feature_stats(model.forward(None, id_batch, batch_stats=batch_stats))


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def entropy_term(logits) -> float:
    """Mean prediction entropy divided by the class count."""
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.ndim != 2 or logits.shape[0] < 1 or logits.shape[1] < 2:
        raise ValueError("logits must be B x C with B >= 1 and C >= 2")
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    p = softmax_rows(logits)
    ent = -np.sum(p * np.log(np.maximum(p, PROB_FLOOR)), axis=1)
    return float(ent.sum() / (logits.shape[0] * logits.shape[1]))


def alignment_term(test_stats: FeatureStats, source_stats: FeatureStats) -> float:
    if test_stats.num_blocks != source_stats.num_blocks:
        raise ValueError("block counts differ")
    total = 0.0
    for mt, st, ms, ss in zip(test_stats.means, test_stats.stds, source_stats.means, source_stats.stds):
        if mt.shape != ms.shape:
            raise ValueError("channel counts differ")
        total += np.linalg.norm(mt - ms) + np.linalg.norm(st - ss)
    return float(total / test_stats.num_blocks)


def total_loss(trace: ForwardTrace, source_stats: FeatureStats, config: ObjectiveConfig) -> float:
    ent = entropy_term(trace.logits)
    if config.lam == 0:
        return ent
    return ent + config.lam * alignment_term(batch_feature_stats(trace), source_stats)
