"""Uniform weight quantization and the bit-width sensitivity harness."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import DTYPE, sample_gaussian


@dataclass(frozen=True)
class QuantSpec:
    """Symmetric uniform grid with ``2**bits`` levels spanning ``[-a, a]``."""

    bits: int
    a: float = 1.0

    def __post_init__(self):
        if int(self.bits) != self.bits or self.bits < 2:
            raise ValueError(f"bits must be an integer >= 2, got {self.bits}")
        if not (self.a >= 0 and np.isfinite(self.a)):
            raise ValueError(f"range a must be finite and non-negative, got {self.a}")

    @property
    def levels(self) -> int:
        return 2**self.bits

    @property
    def step(self) -> float:
        return 2.0 * self.a / (2**self.bits - 1)

    def grid(self) -> np.ndarray:
        return -self.a + self.step * np.arange(self.levels, dtype=DTYPE)

    def error_variance(self) -> float:
        """Variance of the rounding error when weights are spread uniformly."""
        return self.a**2 / (3.0 * (2**self.bits - 1) ** 2)


def quantize(w, spec: QuantSpec) -> np.ndarray:
    """Clamp to ``[-a, a]`` and snap to the nearest grid point.

    Ties go away from zero. The grid is mirror-symmetric, so the magnitude is
    quantized on the upper half and the sign reapplied; this keeps the
    result exactly idempotent.
    """
    w = np.asarray(w, dtype=DTYPE)
    if spec.a == 0:
        return np.zeros_like(w)
    phi = spec.step
    half = spec.levels // 2
    # positive half-grid: a - (half - 1 - j) * phi for j = 0 .. half - 1, smallest point phi / 2
    mag = np.minimum(np.abs(w), spec.a)
    j = np.clip(np.floor((mag - phi / 2) / phi + 0.5), 0, half - 1)
    snapped = spec.a - (half - 1 - j) * phi
    return np.where(np.signbit(w), -snapped, snapped)


def quantization_errors(spec: QuantSpec, rng: np.random.Generator, num_samples: int) -> np.ndarray:
    """Rounding errors ``quantize(w) - w`` for ``w ~ U[-a, a]``."""
    w = rng.uniform(-spec.a, spec.a, size=num_samples)
    return quantize(w, spec) - w


def quantization_error_variance(spec: QuantSpec, rng: np.random.Generator,
                                num_samples: int = 10**6) -> tuple[float, float]:
    """Return ``(empirical, predicted)`` rounding-error variance."""
    if num_samples < 10**4:
        raise ValueError("num_samples must be at least 1e4")
    err = quantization_errors(spec, rng, num_samples)
    return float(np.var(err)), spec.error_variance()


@dataclass
class SensitivityRow:
    bits: int
    delta_loss: float
    predicted: float


@dataclass
class SensitivityReport:
    rows: list[SensitivityRow] = field(default_factory=list)
    dim: int = 0
    weight_range: float = 0.0
    trace_cov: float = 0.0

    def log2_slope(self, bits_min: int = 3, bits_max: int = 8) -> float:
        """Least-squares slope of log2(delta_loss) against bit-width."""
        pts = [(r.bits, r.delta_loss) for r in self.rows if bits_min <= r.bits <= bits_max]
        if len(pts) < 2:
            raise ValueError("need at least two bit-widths in range to fit a slope")
        n = np.array([p[0] for p in pts], dtype=DTYPE)
        y = np.log2([p[1] for p in pts])
        return float(np.polyfit(n, y, 1)[0])

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "delta_loss_empirical", "delta_loss_predicted_shape"])
        for r in self.rows:
            w.writerow([r.bits, repr(r.delta_loss), repr(r.predicted)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _mse(target: np.ndarray, pred: np.ndarray) -> float:
    return float(np.mean(np.sum((target - pred) ** 2, axis=1)))


def direct_loss_gap(W: np.ndarray, Wq: np.ndarray, x: np.ndarray, delta: np.ndarray,
                    xi: np.ndarray) -> float:
    """Per-sample evaluation of MSE(quantized) - MSE(full) on ``x + delta``."""
    target = x @ W.T + xi
    z = x + delta
    return _mse(target, z @ Wq.T) - _mse(target, z @ W.T)


def sensitivity_experiment(dim: int, bit_list, num_samples: int, rng: np.random.Generator,
                           num_models: int = 2000, shift_std: float = 0.5,
                           noise_std: float = 0.1, weight_range: float = 1.0) -> SensitivityReport:
    """Measure the extra MSE a quantized linear model pays on shifted inputs.

    Square models ``y = W x`` with ``W ~ U[-r, r]`` are compared to their
    quantized copies on inputs ``x + delta``; labels are ``W x + xi``. One set
    of ``num_samples`` draws of ``(x, delta, xi)`` is shared by every model
    and bit-width, and the reported gap is averaged over ``num_models``
    independent weight draws. For one model the cross term
    ``tr(W^T dW cov_delta)`` fluctuates at the scale of ``sqrt(var(dW))``,
    which swamps the ``var(dW)`` signal at high bit-widths; averaging over
    models shrinks it to its mean, which is itself proportional to
    ``var(dW)`` (a boundary effect of the two half-width end cells).

    Each model's loss gap is the exact empirical MSE difference over the
    drawn samples, evaluated through the sample second-moment matrices
    (identical to :func:`direct_loss_gap` up to float rounding).

    The ``predicted`` column is ``dim * var(dW) * tr(cov_x + cov_delta)``,
    the expectation of ``tr(dW^T dW (cov_x + cov_delta))`` for i.i.d. errors,
    with covariances measured on the drawn samples.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    bits = [int(b) for b in bit_list]
    if not bits:
        raise ValueError("bit_list must be non-empty")
    if num_samples < 2 or num_models < 1:
        raise ValueError("need num_samples >= 2 and num_models >= 1")

    x = sample_gaussian(rng, (num_samples, dim))
    delta = sample_gaussian(rng, (num_samples, dim), std=shift_std)
    xi = sample_gaussian(rng, (num_samples, dim), std=noise_std)
    z = x + delta
    s_zz = z.T @ z / num_samples
    s_zxi = z.T @ xi / num_samples
    s_zd = z.T @ delta / num_samples
    trace_cov = float(np.trace(np.cov(x, rowvar=False)) + np.trace(np.cov(delta, rowvar=False)))

    W = rng.uniform(-weight_range, weight_range, size=(num_models, dim, dim))
    a = np.max(np.abs(W), axis=(1, 2))
    # residual of the full model is e = xi - W delta; cross = mean e^T dW z
    # = tr(dW (S_zxi - S_zd W^T))
    cross_mat = s_zxi[None] - np.einsum("ij,mkj->mik", s_zd, W)

    report = SensitivityReport(dim=dim, weight_range=float(a.mean()), trace_cov=trace_cov)
    for n in bits:
        levels = 2**n - 1
        Wq = np.stack([quantize(W[m], QuantSpec(n, float(a[m]))) for m in range(num_models)])
        dW = Wq - W
        quad = np.einsum("mij,jk,mik->m", dW, s_zz, dW)
        cross = np.einsum("mij,mji->m", dW, cross_mat)
        gap = quad - 2.0 * cross
        var_err = a**2 / (3.0 * levels**2)
        report.rows.append(SensitivityRow(n, float(gap.mean()), float(np.mean(dim * var_err) * trace_cov)))
    return report
