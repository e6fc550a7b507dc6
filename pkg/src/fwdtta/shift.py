"""Online domain-shift detection from stem-layer batch statistics.

Each batch is summarised by per-channel (mean, std) of the pooled stem
features. A running profile of the current domain is kept as an exponential
moving average, and a symmetric Gaussian KL between the profile and the new
batch flags a shift.

Two distance variants are available. ``paper-literal`` evaluates
``KL(p1 || p2) = (s1^2 + (m1 - m2)^2) / (2 s2^2)``, which is 1/2 for identical
inputs, so the symmetric sum is 1 for a batch identical to the profile.
``full-gaussian`` adds the ``ln(s2 / s1) - 1/2`` terms of the exact Gaussian
KL and is 0 on identical inputs; its default threshold is 0.1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ForwardTrace, pooled_stats

PAPER_LITERAL = "paper-literal"
FULL_GAUSSIAN = "full-gaussian"
KL_VARIANTS = (PAPER_LITERAL, FULL_GAUSSIAN)
SIGMA_FLOOR = 1e-6
DEFAULT_EMA = 0.8
DEFAULT_THRESHOLD = 0.1
LITERAL_THRESHOLD = 1.1


@dataclass
class ShiftConfig:
    threshold: float = DEFAULT_THRESHOLD
    kl_variant: str = FULL_GAUSSIAN

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.kl_variant not in KL_VARIANTS:
            raise ValueError(f"kl_variant must be one of {KL_VARIANTS}")

    @classmethod
    def for_variant(cls, variant: str) -> "ShiftConfig":
        return cls(LITERAL_THRESHOLD if variant == PAPER_LITERAL else DEFAULT_THRESHOLD, variant)


@dataclass
class BatchProfile:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class DomainProfile:
    ema: float = DEFAULT_EMA
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if not 0 < self.ema <= 1:
            raise ValueError("ema factor must lie in (0, 1]")

    @property
    def initialized(self) -> bool:
        return self.mean is not None

    def reset(self, phi: BatchProfile):
        self.mean = phi.mean.copy()
        self.std = phi.std.copy()


def batch_profile(trace: ForwardTrace) -> BatchProfile:
    mean, std = pooled_stats(trace.stem_feature)
    return BatchProfile(mean, std)


def update_profile(profile: DomainProfile, phi: BatchProfile) -> DomainProfile:
    if not profile.initialized:
        profile.reset(phi)
        return profile
    if phi.mean.shape != profile.mean.shape:
        raise ValueError("profile dimension mismatch")
    b = profile.ema
    profile.mean = b * phi.mean + (1 - b) * profile.mean
    profile.std = b * phi.std + (1 - b) * profile.std
    return profile


def _kl(m1, s1, m2, s2, variant):
    out = (s1**2 + (m1 - m2) ** 2) / (2 * s2**2)
    if variant == FULL_GAUSSIAN:
        out = out + np.log(s2 / s1) - 0.5
    return out


def distance(profile: DomainProfile | BatchProfile, phi: BatchProfile, variant: str = FULL_GAUSSIAN) -> float:
    if variant not in KL_VARIANTS:
        raise ValueError(f"unknown kl variant {variant!r}")
    md, mt = np.asarray(profile.mean), np.asarray(phi.mean)
    if md.shape != mt.shape:
        raise ValueError("profile dimension mismatch")
    sd = np.maximum(profile.std, SIGMA_FLOOR)
    st = np.maximum(phi.std, SIGMA_FLOOR)
    both = _kl(md, sd, mt, st, variant) + _kl(mt, st, md, sd, variant)
    return float(np.mean(both))


def detect(profile: DomainProfile, phi: BatchProfile, config: ShiftConfig) -> tuple[bool, float]:
    """``(shifted, distance)``. An uninitialised profile never reports a shift."""
    if not profile.initialized:
        return False, 0.0
    d = distance(profile, phi, config.kl_variant)
    return d > config.threshold, d
