"""Two-forward-pass continual adaptation loop.

Per batch:
  1. forward at offset ``aggregate(kb, theta)``: predictions and loss L
  2. draw eps (for theta) and nu (for the logits); forward at
     ``aggregate(kb with logits + c_alpha nu, theta + c_theta eps)``: loss L'
  3. joint SPSA gradients from L' - L; SGD on theta, AdamW on the logits
  4. shift check on the pass-1 stem statistics; on a shift, store the
     ensemble offset and re-initialise theta, then evict down to capacity
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import objective as obj
from .knowledge import KnowledgeBase
from .model import FeatureStats, LayeredVector, QuantizedModel
from .numerics import make_rng
from .shift import DomainProfile, ShiftConfig, batch_profile, detect, update_profile
from .zo import SGD, AdamW, PerturbConfig, apply_update, joint_spsa_gradient, sample_perturbation

log = logging.getLogger(__name__)

MODES = ("zoa", "zoa-no-drl", "source", "bn-adapt")


@dataclass
class AdaptConfig:
    """Adaptation hyperparameters; the defaults are the reference settings used throughout."""

    mode: str = "zoa"
    c_theta: float = 0.02
    c_alpha: float = 0.05
    lr_theta: float = 5e-4
    lr_alpha: float = 0.01
    wd_theta: float = 0.4
    wd_alpha: float = 0.1
    lam: float | None = None  # None: 30 for dense models, 1 for conv models
    threshold: float = 0.1
    kl_variant: str = "full-gaussian"
    ema: float = 0.8
    capacity: int = 32
    temperature: float = 10.0
    magnitude_cap: float = 0.01
    batch_size: int = 64
    distribution: str = "segmented-uniform"
    batch_stats: bool = True
    reset_per_domain: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        for name in ("c_theta", "c_alpha", "lr_theta", "lr_alpha", "temperature", "threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")

    @property
    def adapts(self) -> bool:
        return self.mode in ("zoa", "zoa-no-drl")

    @property
    def uses_knowledge(self) -> bool:
        return self.mode == "zoa"

    @property
    def norm_batch_stats(self) -> bool:
        # bn-adapt is defined by batch statistics; source is the frozen model
        return self.mode == "bn-adapt" or (self.mode != "source" and self.batch_stats)


@dataclass
class BatchRecord:
    round: int
    domain: str
    batch_index: int
    accuracy: float
    loss: float
    distance: float
    shifted: bool
    kb_size: int
    fp_count: int


@dataclass
class AdaptState:
    theta: LayeredVector
    kb: KnowledgeBase
    sgd: SGD
    adamw: AdamW
    profile: DomainProfile
    rng: np.random.Generator
    fp_count: int = 0
    batches: int = 0
    records: list[BatchRecord] = field(default_factory=list)

    def offset(self) -> LayeredVector:
        return self.kb.aggregate(self.theta)


def init_state(config: AdaptConfig, model: QuantizedModel) -> AdaptState:
    schema = model.schema
    kb = KnowledgeBase.with_zero_vector(schema, temperature=config.temperature, capacity=config.capacity,
                                        magnitude_cap=config.magnitude_cap)
    adamw = AdamW(config.lr_alpha, config.wd_alpha)
    adamw.insert_slot()
    return AdaptState(
        theta=LayeredVector.zeros(schema),
        kb=kb,
        sgd=SGD(config.lr_theta, config.wd_theta),
        adamw=adamw,
        profile=DomainProfile(config.ema),
        rng=make_rng(config.seed),
    )


class Adapter:
    """Holds the model, source statistics and mutable adaptation state."""

    def __init__(self, config: AdaptConfig, model: QuantizedModel, source_stats: FeatureStats):
        self.config = config
        self.model = model
        self.source_stats = source_stats
        self.objective = obj.ObjectiveConfig(config.lam) if config.lam is not None else \
            obj.ObjectiveConfig.for_model(model)
        self.shift = ShiftConfig(config.threshold, config.kl_variant)
        self.theta_perturb = PerturbConfig(config.c_theta, distribution=config.distribution)
        self.alpha_perturb = PerturbConfig(config.c_alpha, distribution=config.distribution)
        self.state = init_state(config, model)

    def _forward(self, offset: LayeredVector, x: np.ndarray):
        trace = self.model.forward(offset, x, batch_stats=self.config.norm_batch_stats)
        self.state.fp_count += 1
        return trace

    def adapt_batch(self, x: np.ndarray, round_: int = 1, domain: str = "", y: np.ndarray | None = None):
        """Process one batch; returns the predictions of the unperturbed pass.

        Any error restores the state held before the call and is re-raised.
        """
        snapshot = copy.deepcopy(self.state)
        try:
            return self._adapt(x, round_, domain, y)
        except Exception:
            self.state = snapshot
            raise

    def _adapt(self, x, round_, domain, y):
        cfg, st = self.config, self.state
        if cfg.mode == "source" or cfg.mode == "bn-adapt":
            trace = self._forward(LayeredVector.zeros(self.model.schema), x)
            loss = obj.total_loss(trace, self.source_stats, self.objective)
            dist, shifted = self._check_shift(trace)
            return self._finish(trace, loss, dist, shifted, round_, domain, y)

        # pass 1: unperturbed
        trace = self._forward(st.kb.aggregate(st.theta), x)
        loss = obj.total_loss(trace, self.source_stats, self.objective)

        eps = sample_perturbation(self.theta_perturb, self.model.schema, st.rng)
        nu = sample_perturbation(self.alpha_perturb, len(st.kb), st.rng)
        theta_p = st.theta + cfg.c_theta * eps
        logits_p = st.kb.logits + cfg.c_alpha * nu
        # pass 2: perturbed
        trace_p = self._forward(st.kb.aggregate(theta_p, logits_p), x)
        loss_p = obj.total_loss(trace_p, self.source_stats, self.objective)

        g_theta, g_alpha = joint_spsa_gradient(loss, loss_p, (cfg.c_theta, cfg.c_alpha), eps, nu)
        theta = apply_update(st.sgd, st.theta, g_theta)
        logits = st.kb.logits
        if cfg.uses_knowledge:
            logits = apply_update(st.adamw, st.kb.logits, g_alpha)
        if not theta.is_finite() or np.any(np.isnan(logits)):
            raise FloatingPointError("update produced non-finite parameters")
        st.theta = theta
        st.kb.logits = logits

        dist, shifted = self._check_shift(trace)
        if shifted:
            self._on_shift()
        return self._finish(trace, loss, dist, shifted, round_, domain, y)

    def _check_shift(self, trace) -> tuple[float, bool]:
        st = self.state
        phi = batch_profile(trace)
        shifted, dist = detect(st.profile, phi, self.shift)
        if shifted:
            st.profile.reset(phi)
        else:
            update_profile(st.profile, phi)
        return dist, shifted

    def _on_shift(self):
        cfg, st = self.config, self.state
        if cfg.reset_per_domain:
            fresh = init_state(cfg, self.model)
            fresh.rng, fresh.profile, fresh.fp_count = st.rng, st.profile, st.fp_count
            fresh.batches, fresh.records = st.batches, st.records
            self.state = fresh
            return
        if not cfg.uses_knowledge:
            return
        st.theta = st.kb.preserve(st.theta)
        st.adamw.insert_slot()
        for pos in st.kb.evict_if_full():
            st.adamw.remove_slot(pos)

    def _finish(self, trace, loss, dist, shifted, round_, domain, y):
        st = self.state
        preds = trace.predictions()
        acc = float(np.mean(preds == y)) if y is not None else float("nan")
        st.records.append(BatchRecord(round_, domain, st.batches, acc, float(loss), float(dist), bool(shifted),
                                      len(st.kb), st.fp_count))
        st.batches += 1
        return preds


# ---------------------------------------------------------------------------
# results


@dataclass
class ResultsLog:
    records: list[BatchRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    CSV_FIELDS = ("round", "domain", "batch_index", "accuracy", "loss", "distance", "shifted", "kb_size",
                  "fp_count")

    def __len__(self):
        return len(self.records)

    @property
    def fp_count(self) -> int:
        return self.records[-1].fp_count if self.records else 0

    def mean_accuracy(self, round_: int | None = None) -> float:
        accs = [r.accuracy for r in self.records if round_ is None or r.round == round_]
        return float(np.mean(accs)) if accs else float("nan")

    def per_round(self) -> dict[int, float]:
        rounds = sorted({r.round for r in self.records})
        return {k: self.mean_accuracy(k) for k in rounds}

    def per_domain(self) -> dict[str, float]:
        out: dict[str, list[float]] = {}
        for r in self.records:
            out.setdefault(r.domain, []).append(r.accuracy)
        return {k: float(np.mean(v)) for k, v in out.items()}

    def summary(self) -> dict:
        return {
            "config": self.config,
            "batches": len(self.records),
            "forward_passes": self.fp_count,
            "mean_accuracy": self.mean_accuracy(),
            "per_round": {str(k): v for k, v in self.per_round().items()},
            "per_domain": self.per_domain(),
            "shifts_detected": int(sum(r.shifted for r in self.records)),
            "final_kb_size": self.records[-1].kb_size if self.records else 0,
        }

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.CSV_FIELDS)
            w.writeheader()
            for r in self.records:
                w.writerow(asdict(r))

    def write_summary(self, path: str | Path):
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True))


def run_stream(config: AdaptConfig, model: QuantizedModel, stream: Iterable, source_stats: FeatureStats,
               adapter: Adapter | None = None) -> ResultsLog:
    """Adapt over a stream of batches carrying ``x``, ``y``, ``round`` and ``domain``."""
    adapter = adapter or Adapter(config, model, source_stats)
    for batch in stream:
        adapter.adapt_batch(batch.x, batch.round, batch.domain, batch.y)
    return ResultsLog(list(adapter.state.records), asdict(config))
