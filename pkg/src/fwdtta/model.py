"""Forward-only networks with frozen quantized weights.

Only normalization affine parameters are adaptable. They live in a
:class:`LayeredVector` whose layout is fixed by a :class:`ParamSchema`; every
forward call receives an offset vector that is added to the source values.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import DTYPE
from .quant import QuantSpec, quantize

NORM_EPS = 1e-5


class SchemaMismatch(ValueError):
    pass


class NonFiniteActivation(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite activations produced by layer {layer!r}")
        self.layer = layer


@dataclass(frozen=True)
class ParamSchema:
    names: tuple[str, ...]
    sizes: tuple[int, ...]
    frozen: tuple[bool, ...] = ()

    def __post_init__(self):
        if not self.frozen:
            object.__setattr__(self, "frozen", (False,) * len(self.names))
        if not (len(self.names) == len(self.sizes) == len(self.frozen)):
            raise ValueError("names, sizes and frozen flags must have equal length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate layer names in schema")
        if any(s <= 0 for s in self.sizes):
            raise ValueError("layer sizes must be positive")
        if self.adaptable_size == 0:
            raise ValueError("schema has no adaptable parameters")

    @property
    def total(self) -> int:
        return int(sum(self.sizes))

    @property
    def adaptable_size(self) -> int:
        return int(sum(s for s, f in zip(self.sizes, self.frozen) if not f))

    @property
    def num_layers(self) -> int:
        return len(self.names)

    def slices(self) -> Iterator[tuple[str, slice]]:
        start = 0
        for name, size in zip(self.names, self.sizes):
            yield name, slice(start, start + size)
            start += size

    def slice_of(self, name: str) -> slice:
        for n, sl in self.slices():
            if n == name:
                return sl
        raise KeyError(name)

    def mask(self) -> np.ndarray:
        """1.0 on adaptable entries, 0.0 on frozen ones."""
        return np.concatenate([np.full(s, 0.0 if f else 1.0) for s, f in zip(self.sizes, self.frozen)])

    def with_frozen(self, frozen_names) -> "ParamSchema":
        frozen_names = set(frozen_names)
        unknown = frozen_names - set(self.names)
        if unknown:
            raise KeyError(f"unknown layers: {sorted(unknown)}")
        return ParamSchema(self.names, self.sizes, tuple(n in frozen_names for n in self.names))


class LayeredVector:
    """Flat float64 buffer partitioned into named layers."""

    __slots__ = ("schema", "data")

    def __init__(self, schema: ParamSchema, data=None):
        self.schema = schema
        if data is None:
            data = np.zeros(schema.total, dtype=DTYPE)
        data = np.asarray(data, dtype=DTYPE)
        if data.shape != (schema.total,):
            raise SchemaMismatch(f"expected {schema.total} entries, got shape {data.shape}")
        self.data = data

    @classmethod
    def zeros(cls, schema: ParamSchema) -> "LayeredVector":
        return cls(schema)

    @classmethod
    def from_layers(cls, schema: ParamSchema, layers: dict) -> "LayeredVector":
        parts = []
        for name, size in zip(schema.names, schema.sizes):
            arr = np.asarray(layers[name], dtype=DTYPE).ravel()
            if arr.size != size:
                raise SchemaMismatch(f"layer {name!r}: expected {size} entries, got {arr.size}")
            parts.append(arr)
        return cls(schema, np.concatenate(parts))

    def layer(self, name: str) -> np.ndarray:
        return self.data[self.schema.slice_of(name)]

    def layers(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, sl in self.schema.slices():
            yield name, self.data[sl]

    def copy(self) -> "LayeredVector":
        return LayeredVector(self.schema, self.data.copy())

    def _check(self, other: "LayeredVector"):
        if not isinstance(other, LayeredVector) or other.schema != self.schema:
            raise SchemaMismatch("layered vectors have different schemas")

    def __add__(self, other):
        self._check(other)
        return LayeredVector(self.schema, self.data + other.data)

    def __sub__(self, other):
        self._check(other)
        return LayeredVector(self.schema, self.data - other.data)

    def __mul__(self, k: float):
        return LayeredVector(self.schema, self.data * float(k))

    __rmul__ = __mul__

    def __neg__(self):
        return LayeredVector(self.schema, -self.data)

    def __eq__(self, other):
        return isinstance(other, LayeredVector) and other.schema == self.schema and np.array_equal(
            self.data, other.data)

    def __repr__(self):
        return f"LayeredVector({self.schema.num_layers} layers, {self.schema.total} entries)"

    def mean_abs(self) -> np.ndarray:
        """Mean absolute value of each layer."""
        return np.array([np.mean(np.abs(v)) for _, v in self.layers()])

    def cosine(self, other: "LayeredVector") -> np.ndarray:
        """Per-layer cosine similarity; a zero-norm layer scores 0."""
        self._check(other)
        out = np.zeros(self.schema.num_layers)
        for i, (_, sl) in enumerate(self.schema.slices()):
            a, b = self.data[sl], other.data[sl]
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            if na > 0 and nb > 0:
                out[i] = float(a @ b) / (na * nb)
        return out

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))


@dataclass
class ForwardTrace:
    logits: np.ndarray
    block_features: list[np.ndarray]
    stem_feature: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]

    def predictions(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)


@dataclass
class FeatureStats:
    """Per-block channel means and (population) standard deviations."""

    means: list[np.ndarray]
    stds: list[np.ndarray]

    def __post_init__(self):
        if len(self.means) != len(self.stds):
            raise ValueError("means and stds must have the same block count")
        self.means = [np.asarray(m, dtype=DTYPE) for m in self.means]
        self.stds = [np.asarray(s, dtype=DTYPE) for s in self.stds]
        for m, s in zip(self.means, self.stds):
            if m.shape != s.shape:
                raise ValueError("mean/std shape mismatch within a block")
            if np.any(s < 0):
                raise ValueError("standard deviations must be non-negative")

    @property
    def num_blocks(self) -> int:
        return len(self.means)


def pooled_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Channel mean and population std across the batch axis."""
    features = np.asarray(features, dtype=DTYPE)
    if features.shape[0] < 2:
        raise ValueError("batch statistics need at least 2 samples")
    std = features.std(axis=0)
    # rounding in the mean leaves ~1e-16 residue on constant channels
    std[np.all(features == features[:1], axis=0)] = 0.0
    return features.mean(axis=0), std


def batch_feature_stats(trace: ForwardTrace) -> FeatureStats:
    means, stds = zip(*(pooled_stats(f) for f in trace.block_features))
    return FeatureStats(list(means), list(stds))


# ---------------------------------------------------------------------------
# layers

def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """3x3-style 'same' convolution, zero padding, NCHW layout."""
    k = w.shape[-1]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: B, C, H', W', k, k
    b, c, h, wd = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * wd, c * k * k)
    out = cols @ w.reshape(w.shape[0], -1).T
    return out.reshape(b, h, wd, w.shape[0]).transpose(0, 3, 1, 2)


def _normalize(h: np.ndarray, kind: str, running: tuple[np.ndarray, np.ndarray] | None,
               scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    shape = (1, -1) + (1,) * (h.ndim - 2)
    if kind == "layer":
        axes = tuple(range(1, h.ndim))
        mu = h.mean(axis=axes, keepdims=True)
        var = h.var(axis=axes, keepdims=True)
    elif running is None:
        axes = (0,) + tuple(range(2, h.ndim))
        mu = h.mean(axis=axes).reshape(shape)
        var = h.var(axis=axes).reshape(shape)
    else:
        mu = running[0].reshape(shape)
        var = running[1].reshape(shape)
    return (h - mu) / np.sqrt(var + NORM_EPS) * scale.reshape(shape) + shift.reshape(shape)


def _check_finite(h: np.ndarray, layer: str):
    if not np.all(np.isfinite(h)):
        raise NonFiniteActivation(layer)


# ---------------------------------------------------------------------------
# model

@dataclass
class QuantizedModel:
    """A frozen MLP or small CNN.

    ``arch`` keys:
      kind: "mlp" or "cnn"
      input_shape: feature count (mlp) or (C, H, W) (cnn)
      widths: hidden widths (mlp) or conv channels per block (cnn)
      strides: conv strides per block (cnn only)
      num_classes
      norm: "layer" or "batch"
    """

    arch: dict
    weights: dict[str, np.ndarray]
    quant: dict[str, QuantSpec | None]
    source_params: LayeredVector
    running: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    _fp_count: int = field(default=0, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)
    _record: dict | None = field(default=None, repr=False, compare=False)

    @property
    def schema(self) -> ParamSchema:
        return self.source_params.schema

    @property
    def num_blocks(self) -> int:
        return len(self.arch["widths"])

    @property
    def num_classes(self) -> int:
        return int(self.arch["num_classes"])

    @property
    def forward_count(self) -> int:
        return self._fp_count

    @property
    def uses_batch_norm(self) -> bool:
        return self.arch["norm"] == "batch"

    def _bump(self):
        with self._lock:
            self._fp_count += 1

    def input_shape(self) -> tuple[int, ...]:
        s = self.arch["input_shape"]
        return (int(s),) if np.isscalar(s) else tuple(int(v) for v in s)

    def forward(self, delta: LayeredVector | None, batch: np.ndarray,
                batch_stats: bool | None = None) -> ForwardTrace:
        """Run the network with normalization parameters ``theta0 + delta``.

        ``batch_stats`` selects per-batch normalization statistics (True) or
        the stored source running statistics (False) for batch-norm models;
        by default running statistics are used. Layer-norm models ignore it.
        """
        if delta is None:
            delta = LayeredVector.zeros(self.schema)
        if not isinstance(delta, LayeredVector) or delta.schema != self.schema:
            raise SchemaMismatch("delta does not conform to the model's parameter schema")
        batch = np.asarray(batch, dtype=DTYPE)
        if batch.shape[1:] != self.input_shape():
            raise ValueError(f"batch shape {batch.shape} does not match input {self.input_shape()}")
        self._bump()
        params = self.source_params + delta
        use_batch = bool(batch_stats) if self.uses_batch_norm else False
        if self.arch["kind"] == "mlp":
            return self._forward_mlp(params, batch, use_batch)
        return self._forward_cnn(params, batch, use_batch)

    def _norm(self, i: int, h: np.ndarray, params: LayeredVector, use_batch: bool) -> np.ndarray:
        kind = self.arch["norm"]
        running = None if (kind == "layer" or use_batch) else self.running[f"norm{i}"]
        if self._record is not None:
            axes = (0,) + tuple(range(2, h.ndim))
            self._record[f"norm{i}"] = (h.mean(axis=axes), h.var(axis=axes))
        out = _normalize(h, kind, running, params.layer(f"norm{i}.scale"), params.layer(f"norm{i}.shift"))
        _check_finite(out, f"norm{i}")
        return out

    def _forward_mlp(self, params, x, use_batch) -> ForwardTrace:
        h = x
        feats = []
        stem = None
        for i in range(self.num_blocks):
            h = h @ self.weights[f"fc{i}.weight"].T + self.weights[f"fc{i}.bias"]
            _check_finite(h, f"fc{i}")
            if i == 0:
                stem = h
            h = np.maximum(self._norm(i, h, params, use_batch), 0.0)
            feats.append(h)
        logits = h @ self.weights["head.weight"].T + self.weights["head.bias"]
        _check_finite(logits, "head")
        return ForwardTrace(logits, feats, stem)

    def _forward_cnn(self, params, x, use_batch) -> ForwardTrace:
        h = x
        feats = []
        stem = None
        for i, stride in enumerate(self.arch["strides"]):
            h = conv2d(h, self.weights[f"conv{i}.weight"], stride)
            _check_finite(h, f"conv{i}")
            if i == 0:
                stem = h.mean(axis=(2, 3))
            h = np.maximum(self._norm(i, h, params, use_batch), 0.0)
            feats.append(h.mean(axis=(2, 3)))
        logits = feats[-1] @ self.weights["head.weight"].T + self.weights["head.bias"]
        _check_finite(logits, "head")
        return ForwardTrace(logits, feats, stem)

    def reset_counter(self):
        with self._lock:
            self._fp_count = 0

    def collect_norm_stats(self, batch: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Per-channel mean/variance entering each norm layer, whole batch at once."""
        if not self.uses_batch_norm:
            return {}
        self._record = {}
        try:
            self.forward(None, batch, batch_stats=True)
            return self._record
        finally:
            self._record = None

    def snapshot_weights(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.weights.items()}


def norm_schema(widths) -> ParamSchema:
    names, sizes = [], []
    for i, w in enumerate(widths):
        names += [f"norm{i}.scale", f"norm{i}.shift"]
        sizes += [int(w), int(w)]
    return ParamSchema(tuple(names), tuple(sizes))


def build_model(arch: dict, weights: dict[str, np.ndarray], bits: int | None,
                running: dict | None = None, frozen_layers=()) -> QuantizedModel:
    """Freeze ``weights`` onto per-tensor grids (``a = max|w|``) and wrap them.

    ``bits=None`` keeps full precision. Biases are never quantized.
    """
    qweights, qspecs = {}, {}
    for name, w in weights.items():
        w = np.asarray(w, dtype=DTYPE)
        if bits is not None and name.endswith(".weight"):
            spec = QuantSpec(int(bits), float(np.max(np.abs(w))))
            qweights[name] = quantize(w, spec)
            qspecs[name] = spec
        else:
            qweights[name] = w.copy()
            qspecs[name] = None
    schema = norm_schema(arch["widths"]).with_frozen(frozen_layers)
    layers = {}
    for i, w in enumerate(arch["widths"]):
        layers[f"norm{i}.scale"] = np.ones(w)
        layers[f"norm{i}.shift"] = np.zeros(w)
    theta0 = LayeredVector.from_layers(schema, layers)
    return QuantizedModel(dict(arch), qweights, qspecs, theta0, dict(running or {}))
