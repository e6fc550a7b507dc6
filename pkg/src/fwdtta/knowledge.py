"""Bounded store of domain vectors combined through softmax coefficients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .model import LayeredVector, ParamSchema, SchemaMismatch
from .numerics import softmax_with_temperature

DEFAULT_TEMPERATURE = 10.0
DEFAULT_CAPACITY = 32
DEFAULT_MAGNITUDE_CAP = 0.01


@dataclass
class DomainVector:
    delta: LayeredVector
    index: int


def layer_cosine(a: LayeredVector, b: LayeredVector) -> float:
    """Cosine averaged over the adaptable layers (zero-norm layers score 0)."""
    cos = a.cosine(b)
    live = ~np.array(a.schema.frozen)
    return float(cos[live].mean())


def max_layer_mean_abs(v: LayeredVector) -> float:
    return float(np.max(v.mean_abs()))


@dataclass
class KnowledgeBase:
    schema: ParamSchema
    temperature: float = DEFAULT_TEMPERATURE
    capacity: int = DEFAULT_CAPACITY
    magnitude_cap: float = DEFAULT_MAGNITUDE_CAP
    vectors: list[DomainVector] = field(default_factory=list)
    logits: np.ndarray = field(default_factory=lambda: np.zeros(0))
    next_index: int = 0
    _sim: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)), repr=False)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.logits = np.asarray(self.logits, dtype=float)
        if len(self.logits) != len(self.vectors):
            raise ValueError("one logit per stored vector required")
        if self._sim.shape != (len(self.vectors),) * 2:
            self._sim = self.recompute_similarity()

    @classmethod
    def with_zero_vector(cls, schema: ParamSchema, **kw) -> "KnowledgeBase":
        """Store initialised with a single zero vector and logit 0."""
        kb = cls(schema, **kw)
        kb._append(LayeredVector.zeros(schema), 0.0)
        return kb

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def indices(self) -> list[int]:
        return [v.index for v in self.vectors]

    @property
    def similarity_matrix(self) -> np.ndarray:
        return self._sim.copy()

    def alphas(self, logits=None) -> np.ndarray:
        logits = self.logits if logits is None else np.asarray(logits, dtype=float)
        if len(logits) == 0:
            return logits.copy()
        return softmax_with_temperature(logits, self.temperature)

    def aggregate(self, theta_tilde: LayeredVector, logits=None) -> LayeredVector:
        """Offset ``sum_j alpha_j delta_j + theta_tilde`` applied on top of theta0."""
        if theta_tilde.schema != self.schema:
            raise SchemaMismatch("theta_tilde does not match the knowledge base schema")
        if not self.vectors:
            return theta_tilde.copy()
        alpha = self.alphas(logits)
        live = np.flatnonzero(alpha > 0)
        stacked = np.stack([self.vectors[i].delta.data for i in live])
        return LayeredVector(self.schema, alpha[live] @ stacked + theta_tilde.data)

    def shrink_factor(self, theta_tilde: LayeredVector) -> tuple[float, float]:
        """``(m, s)``: largest per-layer mean |theta_tilde| and ``max(1, m / w_m)``."""
        m = max_layer_mean_abs(theta_tilde)
        return m, max(1.0, m / self.magnitude_cap)

    def init_new_logit(self, theta_tilde: LayeredVector) -> float:
        """Logit giving the new vector weight ``(s - 1) / s`` after insertion.

        Returns ``-inf`` when ``s == 1`` and 0 for an empty store (the new
        vector is then the only one and necessarily has weight 1).
        """
        if not self.vectors:
            return 0.0
        _, s = self.shrink_factor(theta_tilde)
        if s == 1.0:
            return -np.inf
        return float((np.log(s - 1.0) + logsumexp(self.logits * self.temperature)) / self.temperature)

    def preserve(self, theta_tilde: LayeredVector) -> LayeredVector:
        """Store the current ensemble offset and return the re-initialised theta_tilde.

        The ensemble offset is the same before and after the call.
        """
        before = self.aggregate(theta_tilde)
        logit = self.init_new_logit(theta_tilde)
        self._append(before.copy(), logit)
        if logit == -np.inf:
            return theta_tilde.copy()
        with_old = self.aggregate(theta_tilde)
        return theta_tilde - (with_old - before)

    def _append(self, delta: LayeredVector, logit: float):
        if delta.schema != self.schema:
            raise SchemaMismatch("domain vector does not match the knowledge base schema")
        row = np.array([layer_cosine(delta, v.delta) for v in self.vectors])
        n = len(self.vectors)
        sim = np.zeros((n + 1, n + 1))
        sim[:n, :n] = self._sim
        sim[n, :n] = row
        sim[:n, n] = row
        sim[n, n] = layer_cosine(delta, delta)
        self._sim = sim
        self.vectors.append(DomainVector(delta, self.next_index))
        self.logits = np.append(self.logits, logit)
        self.next_index += 1

    def remove_at(self, pos: int):
        del self.vectors[pos]
        self.logits = np.delete(self.logits, pos)
        self._sim = np.delete(np.delete(self._sim, pos, axis=0), pos, axis=1)

    def recompute_similarity(self) -> np.ndarray:
        n = len(self.vectors)
        sim = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                sim[i, j] = layer_cosine(self.vectors[i].delta, self.vectors[j].delta)
        return sim

    def pairwise_similarity(self) -> tuple[int, int, float]:
        """Positions ``(k, p)``, ``k < p``, of the most similar pair and its score.

        Ties resolve to the lexicographically smallest position pair.
        """
        n = len(self.vectors)
        if n < 2:
            raise ValueError("need at least two stored vectors")
        iu, ju = np.triu_indices(n, k=1)
        vals = self._sim[iu, ju]
        best = int(np.argmax(vals))  # first max in row-major order == lexicographic
        return int(iu[best]), int(ju[best]), float(vals[best])

    def evict_if_full(self) -> list[int]:
        """Drop the older member of the most similar pair until within capacity.

        Returns the removed positions, in removal order, so that callers can
        drop matching optimizer slots.
        """
        removed = []
        while len(self.vectors) > self.capacity:
            k, p, _ = self.pairwise_similarity()
            pos, other = (k, p) if self.vectors[k].index < self.vectors[p].index else (p, k)
            if self._last_live(pos):
                # dropping the only finite logit would leave softmax undefined;
                # the zero-weight partner goes instead, which keeps the offset
                pos = other
            self.remove_at(pos)
            removed.append(pos)
        return removed

    def _last_live(self, pos: int) -> bool:
        live = np.isfinite(self.logits)
        return bool(live[pos]) and int(live.sum()) == 1
