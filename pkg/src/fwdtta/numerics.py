"""Dense-array helpers and seeded sampling.

Arrays are plain float64 numpy arrays. Random streams come from
``numpy.random.Generator`` over PCG64, which numpy guarantees to be
reproducible across platforms for a given seed.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

DTYPE = np.float64


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """PCG64 generator. Same seed gives the same stream everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child generators from ``rng``."""
    seeds = rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)
    return [make_rng(int(s)) for s in seeds]


def as_tensor(x, shape: Sequence[int] | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if shape is not None:
        arr = arr.reshape(tuple(shape))
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def sample_gaussian(rng: np.random.Generator, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    if std == 0:
        return np.full(shape, mean, dtype=DTYPE)
    return rng.normal(mean, std, size=shape).astype(DTYPE, copy=False)


def softmax_with_temperature(logits, temperature: float = 1.0) -> np.ndarray:
    """softmax(logits * temperature), with -inf logits mapping to exactly 0."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=DTYPE) * temperature
    if z.size == 0:
        return z
    if np.any(np.isnan(z)) or np.any(z == np.inf):
        raise ValueError("logits must be finite or -inf")
    top = z.max()
    if top == -np.inf:
        raise ValueError("all logits are -inf")
    e = np.exp(z - top)
    return e / e.sum()
