"""SPSA gradient estimates and the two update rules used during adaptation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import LayeredVector, ParamSchema, SchemaMismatch
from .numerics import DTYPE

RADEMACHER = "rademacher"
SEGMENTED_UNIFORM = "segmented-uniform"
DISTRIBUTIONS = (RADEMACHER, SEGMENTED_UNIFORM)

# bound on |L(theta + c eps) - L(theta)| before division by c
LOSS_DIFF_CLIP = 10.0


@dataclass(frozen=True)
class PerturbConfig:
    scale: float = 0.02
    steps: int = 1
    distribution: str = SEGMENTED_UNIFORM
    lo: float = 0.5
    hi: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("perturbation scale must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.distribution!r}; choose from {DISTRIBUTIONS}")
        if self.distribution == SEGMENTED_UNIFORM and not (0 < self.lo < self.hi):
            raise ValueError("segmented uniform needs 0 < lo < hi")


def _draw(config: PerturbConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    sign = rng.integers(0, 2, size=n) * 2.0 - 1.0
    if config.distribution == RADEMACHER:
        return sign.astype(DTYPE)
    return sign * rng.uniform(config.lo, config.hi, size=n)


def sample_perturbation(config: PerturbConfig, target: ParamSchema | int,
                        rng: np.random.Generator) -> LayeredVector | np.ndarray:
    """Draw a mean-zero direction. Frozen layers of a schema get zeros."""
    if isinstance(target, ParamSchema):
        eps = _draw(config, target.total, rng) * target.mask()
        return LayeredVector(target, eps)
    return _draw(config, int(target), rng)


def reciprocal(eps) -> np.ndarray:
    """Elementwise 1/eps, with masked (zero) entries mapping to 0."""
    e = eps.data if isinstance(eps, LayeredVector) else np.asarray(eps, dtype=DTYPE)
    out = np.zeros_like(e)
    nz = e != 0
    out[nz] = 1.0 / e[nz]
    return out


def _loss_scale(loss_base: float, loss_perturbed: float, c: float, clip: float | None) -> float:
    if not (np.isfinite(loss_base) and np.isfinite(loss_perturbed)):
        raise FloatingPointError(f"non-finite loss pair ({loss_base}, {loss_perturbed})")
    if not c > 0:
        raise ValueError("perturbation scale must be positive")
    diff = loss_perturbed - loss_base
    if clip is not None:
        diff = float(np.clip(diff, -clip, clip))
    return diff / c


def spsa_gradient(loss_base: float, loss_perturbed: float, c: float, eps,
                  clip: float | None = LOSS_DIFF_CLIP):
    """One-sided single-direction SPSA estimate ``(dL / c) * eps^-1``."""
    g = _loss_scale(loss_base, loss_perturbed, c, clip) * reciprocal(eps)
    if isinstance(eps, LayeredVector):
        return LayeredVector(eps.schema, g)
    return g


def joint_spsa_gradient(loss_base: float, loss_perturbed: float, c, eps_theta, eps_alpha,
                        clip: float | None = LOSS_DIFF_CLIP):
    """Gradients for two parameter groups perturbed in the same forward pass.

    ``c`` is either one scale or a ``(c_theta, c_alpha)`` pair; each group is
    divided by the scale it was perturbed with.
    """
    c_theta, c_alpha = (c, c) if np.isscalar(c) else c
    g_theta = spsa_gradient(loss_base, loss_perturbed, c_theta, eps_theta, clip)
    g_alpha = spsa_gradient(loss_base, loss_perturbed, c_alpha, np.asarray(eps_alpha, dtype=DTYPE), clip)
    return g_theta, g_alpha


def spsa_estimate(loss_fn: Callable[[np.ndarray], float], theta: np.ndarray, config: PerturbConfig,
                  rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """q-direction averaged estimate. Returns the gradient and evaluation count (q + 1)."""
    theta = np.asarray(theta, dtype=DTYPE)
    base = loss_fn(theta)
    evals = 1
    g = np.zeros_like(theta)
    for _ in range(config.steps):
        eps = _draw(config, theta.size, rng).reshape(theta.shape)
        g += spsa_gradient(base, loss_fn(theta + config.scale * eps), config.scale, eps, clip=None)
        evals += 1
    return g / config.steps, evals


# ---------------------------------------------------------------------------
# update rules


@dataclass
class SGD:
    """p <- p - lr * (g + weight_decay * p)."""

    lr: float
    weight_decay: float = 0.0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * (grad + self.weight_decay * params)


@dataclass
class AdamW:
    """Bias-corrected Adam moments with decoupled weight decay.

    Non-finite parameters (the ``-inf`` sentinel logit) are left untouched and
    their moment slots stay at zero.
    """

    lr: float
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def _ensure(self, n: int):
        if self.m.shape != (n,):
            if self.t == 0 and self.m.size == 0:
                self.m, self.v = np.zeros(n), np.zeros(n)
            else:
                raise SchemaMismatch(f"moment buffers hold {self.m.size} slots, params have {n}")

    def insert_slot(self, index: int | None = None):
        index = self.m.size if index is None else index
        self.m = np.insert(self.m, index, 0.0)
        self.v = np.insert(self.v, index, 0.0)

    def remove_slot(self, index: int):
        self.m = np.delete(self.m, index)
        self.v = np.delete(self.v, index)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        params = np.asarray(params, dtype=DTYPE)
        self._ensure(params.size)
        live = np.isfinite(params)
        g = np.where(live, grad, 0.0)
        b1, b2 = self.betas
        self.t += 1
        self.m = np.where(live, b1 * self.m + (1 - b1) * g, 0.0)
        self.v = np.where(live, b2 * self.v + (1 - b2) * g * g, 0.0)
        m_hat = self.m / (1 - b1**self.t)
        v_hat = self.v / (1 - b2**self.t)
        out = params.copy()
        upd = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * params
        out[live] = params[live] - self.lr * upd[live]
        return out


def apply_update(rule, params, gradient):
    """Apply ``rule`` to an array or a :class:`LayeredVector`."""
    if isinstance(params, LayeredVector):
        if not isinstance(gradient, LayeredVector) or gradient.schema != params.schema:
            raise SchemaMismatch("gradient schema does not match parameters")
        return LayeredVector(params.schema, rule.step(params.data, gradient.data))
    params = np.asarray(params, dtype=DTYPE)
    gradient = np.asarray(gradient, dtype=DTYPE)
    if params.shape != gradient.shape:
        raise SchemaMismatch(f"gradient shape {gradient.shape} != params shape {params.shape}")
    return rule.step(params, gradient)
