"""Desk-scale datasets, corruptions, continual streams and source-model fitting.

Nothing here uses backpropagation: hidden layers of the source model are
random projections, normalization statistics come from a forward pass over
the training split, and the classifier head is a ridge least-squares fit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from .model import QuantizedModel, build_model
from .numerics import DTYPE, make_rng

CORRUPTIONS = ("gaussian-noise", "shot-noise", "impulse-noise", "blur", "contrast", "brightness")

# one entry per severity 1..5
SEVERITY_TABLE = {
    "gaussian-noise": (0.08, 0.12, 0.18, 0.26, 0.38),  # noise std
    "shot-noise": (60.0, 25.0, 12.0, 5.0, 3.0),  # photon count scale
    "impulse-noise": (0.03, 0.06, 0.09, 0.17, 0.27),  # replaced fraction
    "blur": (0.5, 0.75, 1.0, 1.25, 1.5),  # gaussian sigma, pixels
    "contrast": (0.4, 0.3, 0.2, 0.1, 0.05),  # contrast factor
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),  # additive offset
}


@dataclass(frozen=True)
class Corruption:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLE:
            raise ValueError(f"unknown corruption {self.kind!r}; known: {CORRUPTIONS}")
        if not 0 <= int(self.severity) <= 5:
            raise ValueError("severity must be in 0..5 (0 = identity)")

    @property
    def level(self) -> float:
        return SEVERITY_TABLE[self.kind][self.severity - 1]

    @property
    def name(self) -> str:
        return f"{self.kind}-{self.severity}"


def corrupt(batch: np.ndarray, corruption: Corruption, rng: np.random.Generator,
            clip: bool = True) -> np.ndarray:
    """Apply a corruption to inputs in [0, 1]. Images are NCHW, vectors N x D."""
    x = np.asarray(batch, dtype=DTYPE)
    if corruption.severity == 0:
        return x.copy()
    kind, level = corruption.kind, corruption.level
    if kind == "gaussian-noise":
        out = x + rng.normal(0.0, level, size=x.shape)
    elif kind == "shot-noise":
        out = rng.poisson(np.clip(x, 0, None) * level) / level
    elif kind == "impulse-noise":
        u = rng.random(x.shape)
        out = x.copy()
        hit = u < level
        out[hit] = (u[hit] < level / 2).astype(DTYPE)  # half salt, half pepper
    elif kind == "blur":
        sigma = (0, 0, level, level) if x.ndim == 4 else (0, level)
        out = ndimage.gaussian_filter(x, sigma=sigma, mode="reflect")
    elif kind == "contrast":
        axes = tuple(range(1, x.ndim))
        mu = x.mean(axis=axes, keepdims=True)
        out = (x - mu) * level + mu
    else:  # brightness
        out = x + level
    return np.clip(out, 0.0, 1.0) if clip else out


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_calib: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.x_train.shape[1:]


def _split(x, y, n_train, n_calib, num_classes, rng) -> Dataset:
    order = rng.permutation(len(x))
    x, y = x[order], y[order]
    a, b = n_train, n_train + n_calib
    return Dataset(x[:a], y[:a], x[a:b], x[b:], y[b:], num_classes)


def _blobs(rng, num_classes, n_total, image_shape, dim, separation, noise):
    y = rng.integers(0, num_classes, size=n_total)
    if image_shape is None:
        centers = rng.normal(0.0, separation, size=(num_classes, dim))
        x = centers[y] + rng.normal(0.0, noise, size=(n_total, dim))
        return x, y
    c, h, w = image_shape
    # smooth class templates in [0, 1]
    raw = rng.normal(size=(num_classes, c, h, w))
    raw = ndimage.gaussian_filter(raw, sigma=(0, 0, 1.0, 1.0), mode="wrap")
    raw /= raw.std(axis=(1, 2, 3), keepdims=True)
    centers = np.clip(0.5 + separation * raw, 0.0, 1.0)
    # spatially correlated jitter, so that blurring cannot act as a denoiser
    jitter = ndimage.gaussian_filter(rng.normal(size=(n_total, c, h, w)), sigma=(0, 0, 1.0, 1.0), mode="wrap")
    jitter *= noise / jitter.std()
    gain = rng.uniform(0.8, 1.2, size=(n_total, 1, 1, 1))
    x = np.clip(0.5 + gain * (centers[y] - 0.5) + jitter, 0.0, 1.0)
    return x, y


def _spirals(rng, num_classes, n_total, noise, turns=1.5):
    y = rng.integers(0, num_classes, size=n_total)
    t = rng.uniform(0.1, 1.0, size=n_total)
    angle = 2 * np.pi * (turns * t + y / num_classes)
    x = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)
    x = x + rng.normal(0, noise, size=x.shape)
    return 0.5 + 0.45 * x, y


def make_dataset(kind: str, params: dict | None, rng: np.random.Generator) -> Dataset:
    """Build train / calibration / test splits.

    kinds and params:
      synthetic-blobs: num_classes, n_train, n_calib, n_test, image_shape or dim,
                       separation, noise
      synthetic-spirals: num_classes, n_train, n_calib, n_test, noise
      idx-images: images, labels (IDX file paths), n_train, n_calib
    """
    p = dict(params or {})
    if kind == "idx-images":
        x = read_idx(p["images"]).astype(DTYPE)
        y = read_idx(p["labels"]).astype(np.int64)
        if x.shape[0] != y.shape[0]:
            raise ValueError("image and label counts differ")
        if x.ndim == 3:
            x = x[:, None]
        if x.max() > 1.0:
            x = x / 255.0
        num_classes = int(y.max()) + 1
        n = len(x)
        n_train = p.get("n_train", n // 2)
        n_calib = p.get("n_calib", min(64, n // 10))
        return _split(x, y, n_train, n_calib, num_classes, rng)

    num_classes = int(p.get("num_classes", 10))
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    n_train, n_calib, n_test = (int(p.get(k, d)) for k, d in
                                (("n_train", 2000), ("n_calib", 64), ("n_test", 2000)))
    if min(n_train, n_calib, n_test) <= 0:
        raise ValueError("split sizes must be positive")
    n_total = n_train + n_calib + n_test
    if kind == "synthetic-blobs":
        shape = p.get("image_shape")
        x, y = _blobs(rng, num_classes, n_total, tuple(shape) if shape else None, int(p.get("dim", 16)),
                      float(p.get("separation", 0.25 if shape else 3.0)), float(p.get("noise", 0.1 if shape else 1.0)))
    elif kind == "synthetic-spirals":
        x, y = _spirals(rng, num_classes, n_total, float(p.get("noise", 0.03)))
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return _split(x, y, n_train, n_calib, num_classes, rng)


# ---------------------------------------------------------------------------
# IDX container (big-endian header, magic 0x0000 <type> <ndim>)

_IDX_TYPES = {0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
              0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}


def write_idx(path: str | Path, array: np.ndarray):
    arr = np.asarray(array)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {arr.dtype} has no IDX type code")
    header = struct.pack(">BBBB", 0, 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(_IDX_TYPES[code]).tobytes())


def read_idx(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: not an IDX file")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise ValueError(f"{path}: unknown IDX type code 0x{code:02x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    dtype = _IDX_TYPES[code]
    offset = 4 + 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    if len(raw) != offset + count * dtype.itemsize:
        raise ValueError(f"{path}: payload size does not match header")
    return np.frombuffer(raw, dtype=dtype, offset=offset, count=count).reshape(dims).astype(dtype.newbyteorder("="))


# ---------------------------------------------------------------------------
# continual streams


@dataclass
class StreamPlan:
    episodes: list[Corruption]
    rounds: int = 10
    batch_size: int = 64
    batches_per_episode: int = 10
    seed: int = 0

    def __post_init__(self):
        self.episodes = [e if isinstance(e, Corruption) else Corruption(**e) for e in self.episodes]
        if not self.episodes:
            raise ValueError("stream plan needs at least one episode")
        if self.rounds < 1 or self.batches_per_episode < 1:
            raise ValueError("rounds and batches_per_episode must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")

    def to_json(self) -> str:
        d = asdict(self)
        d["episodes"] = [{"kind": e.kind, "severity": e.severity} for e in self.episodes]
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "StreamPlan":
        d = json.loads(text)
        allowed = {"episodes", "rounds", "batch_size", "batches_per_episode", "seed"}
        extra = set(d) - allowed
        if extra:
            raise ValueError(f"unknown stream plan keys: {sorted(extra)}")
        return cls(**d)

    @property
    def num_batches(self) -> int:
        return self.rounds * len(self.episodes) * self.batches_per_episode


@dataclass
class StreamBatch:
    x: np.ndarray
    y: np.ndarray
    round: int
    domain: str
    index: int


def build_stream(plan: StreamPlan, x_pool: np.ndarray, y_pool: np.ndarray) -> Iterator[StreamBatch]:
    """Yield corrupted batches round by round, episode by episode."""
    rng = make_rng(plan.seed)
    need = plan.batch_size * plan.batches_per_episode
    if len(x_pool) < plan.batch_size:
        raise ValueError("test pool smaller than one batch")
    index = 0
    for r in range(plan.rounds):
        for ep in plan.episodes:
            sel = rng.permutation(len(x_pool))
            if need > len(sel):
                sel = np.concatenate([sel, rng.integers(0, len(x_pool), size=need - len(sel))])
            sel = sel[:need]
            xs = corrupt(x_pool[sel], ep, rng)
            ys = y_pool[sel]
            for b in range(plan.batches_per_episode):
                sl = slice(b * plan.batch_size, (b + 1) * plan.batch_size)
                yield StreamBatch(xs[sl], ys[sl], r + 1, ep.name, index)
                index += 1


# ---------------------------------------------------------------------------
# source model fitting


@dataclass
class Architecture:
    kind: str = "cnn"
    widths: tuple[int, ...] = (16, 32, 32)
    strides: tuple[int, ...] = (1, 2, 2)
    norm: str | None = None
    frozen_layers: tuple[str, ...] = field(default_factory=tuple)

    def to_arch(self, input_shape, num_classes) -> dict:
        if self.kind not in ("mlp", "cnn"):
            raise ValueError(f"unknown architecture {self.kind!r}")
        norm = self.norm or ("batch" if self.kind == "cnn" else "layer")
        arch = {"kind": self.kind, "widths": [int(w) for w in self.widths], "num_classes": int(num_classes),
                "norm": norm}
        if self.kind == "cnn":
            if len(input_shape) != 3:
                raise ValueError("cnn needs C x H x W inputs")
            arch["input_shape"] = [int(v) for v in input_shape]
            arch["strides"] = [int(s) for s in self.strides][: len(self.widths)]
        else:
            arch["input_shape"] = int(np.prod(input_shape))
        return arch


def _random_weights(arch: dict, rng: np.random.Generator) -> dict[str, np.ndarray]:
    w = {}
    if arch["kind"] == "cnn":
        cin = arch["input_shape"][0]
        for i, cout in enumerate(arch["widths"]):
            fan_in = cin * 9
            w[f"conv{i}.weight"] = rng.normal(0, np.sqrt(2.0 / fan_in), size=(cout, cin, 3, 3))
            cin = cout
    else:
        din = arch["input_shape"]
        for i, dout in enumerate(arch["widths"]):
            w[f"fc{i}.weight"] = rng.normal(0, np.sqrt(2.0 / din), size=(dout, din))
            w[f"fc{i}.bias"] = np.zeros(dout)
            din = dout
    return w


def solve_ridge(features: np.ndarray, targets: np.ndarray, ridge: float = 1e-3) -> np.ndarray:
    """Closed-form ridge solution of ``[features, 1] @ W = targets``; returns W (D+1 x K)."""
    f = np.hstack([features, np.ones((len(features), 1))])
    gram = f.T @ f + ridge * len(f) * np.eye(f.shape[1])
    return np.linalg.solve(gram, f.T @ targets)


def solve_ridge_iterative(features: np.ndarray, targets: np.ndarray, ridge: float = 1e-3,
                          tol: float = 1e-12, max_iter: int = 10_000) -> np.ndarray:
    """Same problem as :func:`solve_ridge`, by conjugate gradients on the normal equations."""
    f = np.hstack([features, np.ones((len(features), 1))])
    A = f.T @ f + ridge * len(f) * np.eye(f.shape[1])
    B = f.T @ targets
    X = np.zeros_like(B)
    for k in range(B.shape[1]):
        x = X[:, k]
        r = B[:, k] - A @ x
        p = r.copy()
        rs = r @ r
        for _ in range(max_iter):
            if np.sqrt(rs) < tol:
                break
            Ap = A @ p
            step = rs / (p @ Ap)
            x = x + step * p
            r = r - step * Ap
            rs_new = r @ r
            p = r + (rs_new / rs) * p
            rs = rs_new
        X[:, k] = x
    return X


def _flat(x: np.ndarray, arch: dict) -> np.ndarray:
    return x.reshape(len(x), -1) if arch["kind"] == "mlp" else x


def fit_source_model(architecture: Architecture, dataset: Dataset, bits: int | None,
                     rng: np.random.Generator, ridge: float = 1e-3) -> QuantizedModel:
    """Fit a frozen source model. ``bits=None`` keeps full precision.

    Hidden weights are quantized first, normalization statistics are then
    measured through the quantized layers, and the head is fit on those
    features before being quantized itself.
    """
    arch = architecture.to_arch(dataset.input_shape, dataset.num_classes)
    hidden = _random_weights(arch, rng)
    last = arch["widths"][-1]
    placeholder = {"head.weight": np.zeros((arch["num_classes"], last)), "head.bias": np.zeros(arch["num_classes"])}
    model = build_model(arch, {**hidden, **placeholder}, bits, frozen_layers=architecture.frozen_layers)
    x_train = _flat(dataset.x_train, arch)
    if model.uses_batch_norm:
        model.running = model.collect_norm_stats(x_train)
    feats = model.forward(None, x_train).block_features[-1]
    targets = np.eye(arch["num_classes"])[dataset.y_train]
    sol = solve_ridge(feats, targets, ridge)
    if not np.all(np.isfinite(sol)):
        raise FloatingPointError("head fit diverged")
    head = {"head.weight": sol[:-1].T.copy(), "head.bias": sol[-1].copy()}
    # hidden weights already sit on grids with a = max|w|, so re-quantizing is a no-op for them
    final = build_model(arch, {**model.weights, **head}, bits, model.running, architecture.frozen_layers)
    final.reset_counter()
    return final


def accuracy(model: QuantizedModel, x: np.ndarray, y: np.ndarray, batch_stats: bool | None = None,
             batch_size: int | None = None) -> float:
    x = _flat(x, model.arch)
    if batch_size is None:
        preds = model.forward(None, x, batch_stats=batch_stats).predictions()
    else:
        preds = np.concatenate([model.forward(None, x[i:i + batch_size], batch_stats=batch_stats).predictions()
                                for i in range(0, len(x), batch_size)])
    return float(np.mean(preds == y))
