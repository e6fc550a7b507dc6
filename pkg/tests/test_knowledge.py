import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fwdtta.knowledge import KnowledgeBase, layer_cosine, max_layer_mean_abs
from fwdtta.model import LayeredVector, ParamSchema, SchemaMismatch
from fwdtta.numerics import make_rng

SCHEMA = ParamSchema(("a", "b", "c"), (3, 2, 4))


def vec(values):
    return LayeredVector(SCHEMA, np.asarray(values, float))


def rand_vec(rng, scale=1.0):
    return vec(rng.normal(0, scale, SCHEMA.total))


def brute_offset(kb, theta):
    """Softmax-weighted sum of stored deltas plus theta, computed from scratch."""
    z = kb.logits * kb.temperature
    w = np.where(np.isfinite(z), np.exp(z - np.max(z[np.isfinite(z)])), 0.0)
    w = w / w.sum()
    return sum((wj * v.delta.data for wj, v in zip(w, kb.vectors)), np.zeros(SCHEMA.total)) + theta.data


def brute_eviction(kb):
    """Creation index that the rule should remove, by scoring every pair from scratch."""
    data = np.stack([v.delta.data for v in kb.vectors])
    sims = np.zeros((len(kb), len(kb)))
    for _, sl in SCHEMA.slices():
        block = data[:, sl]
        norms = np.linalg.norm(block, axis=1)
        unit = np.divide(block, norms[:, None], out=np.zeros_like(block), where=norms[:, None] > 0)
        sims += unit @ unit.T
    sims /= SCHEMA.num_layers
    best, best_pair = -np.inf, None
    for i, j in itertools.combinations(range(len(kb)), 2):
        if sims[i, j] > best + 1e-12:
            best, best_pair = sims[i, j], (i, j)
    i, j = best_pair
    older, newer = (i, j) if kb.vectors[i].index < kb.vectors[j].index else (j, i)
    if np.isfinite(kb.logits[older]) and np.isfinite(kb.logits).sum() == 1:
        return kb.vectors[newer].index
    return kb.vectors[older].index


def kb_with(vectors, logits=None, **kw):
    kb = KnowledgeBase(SCHEMA, **kw)
    for v, lg in zip(vectors, logits if logits is not None else [0.0] * len(vectors)):
        kb._append(v, lg)
    return kb


# ---------------------------------------------------------------------------
# aggregation


def test_empty_returns_theta():
    t = rand_vec(make_rng(0))
    assert KnowledgeBase(SCHEMA).aggregate(t) == t


def test_single_vector_returns_it():
    d = rand_vec(make_rng(1))
    np.testing.assert_array_equal(kb_with([d], [0.7]).aggregate(LayeredVector.zeros(SCHEMA)).data, d.data)


def test_equal_logits_average():
    rng = make_rng(2)
    d0, d1 = rand_vec(rng), rand_vec(rng)
    out = kb_with([d0, d1]).aggregate(LayeredVector.zeros(SCHEMA))
    np.testing.assert_allclose(out.data, (d0.data + d1.data) / 2, atol=1e-15)


def test_aggregate_schema_mismatch():
    with pytest.raises(SchemaMismatch):
        KnowledgeBase(SCHEMA).aggregate(LayeredVector.zeros(ParamSchema(("z",), (1,))))


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_aggregate_matches_brute_force(seed, n):
    rng = make_rng(seed)
    kb = kb_with([rand_vec(rng) for _ in range(n)], list(rng.normal(0, 0.5, n)))
    t = rand_vec(rng)
    np.testing.assert_allclose(kb.aggregate(t).data, brute_offset(kb, t), atol=1e-12)
    assert kb.alphas().sum() == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# new logit and preservation


def test_alpha_closed_form_example():
    kb = KnowledgeBase.with_zero_vector(SCHEMA)
    theta = vec(np.full(SCHEMA.total, 0.05))  # m = 0.05, w_m = 0.01 -> s = 5
    new = kb.preserve(theta)
    assert kb.alphas()[-1] == pytest.approx(0.8, abs=1e-12)
    np.testing.assert_allclose(new.data, 0.2 * theta.data, atol=1e-15)
    assert max_layer_mean_abs(new) == pytest.approx(0.01, abs=1e-12)


def test_small_theta_gets_sentinel():
    kb = KnowledgeBase.with_zero_vector(SCHEMA)
    theta = vec(np.full(SCHEMA.total, 0.004))
    new = kb.preserve(theta)
    assert kb.logits[-1] == -np.inf and kb.alphas()[-1] == 0.0
    assert new == theta


def test_zero_theta_stores_ensemble():
    rng = make_rng(3)
    kb = kb_with([rand_vec(rng), rand_vec(rng)], [0.1, -0.2])
    expect = kb.aggregate(LayeredVector.zeros(SCHEMA))
    new = kb.preserve(LayeredVector.zeros(SCHEMA))
    assert not new.data.any()
    np.testing.assert_array_equal(kb.vectors[-1].delta.data, expect.data)


def test_empty_store_first_logit():
    kb = KnowledgeBase(SCHEMA)
    assert kb.init_new_logit(vec(np.ones(SCHEMA.total))) == 0.0


@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.floats(0.011, 2.0))
def test_preserve_shrinks_theta(seed, n, scale):
    rng = make_rng(seed)
    kb = kb_with([rand_vec(rng) for _ in range(n)], list(rng.normal(0, 0.3, n)))
    theta = rand_vec(rng, scale)
    m, s = kb.shrink_factor(theta)
    new = kb.preserve(theta)
    if s > 1:
        a_t = (s - 1) / s
        assert kb.alphas()[-1] == pytest.approx(a_t, abs=1e-9)
        np.testing.assert_allclose(new.data, (1 - a_t) * theta.data, atol=1e-12)
        assert max_layer_mean_abs(new) == pytest.approx(kb.magnitude_cap, abs=1e-9)
    else:
        assert kb.alphas()[-1] == 0.0 and new == theta


@given(st.integers(0, 2**32 - 1))
def test_ensemble_invariance(seed):
    rng = make_rng(seed)
    kb = KnowledgeBase.with_zero_vector(SCHEMA, capacity=int(rng.integers(2, 8)))
    theta = LayeredVector.zeros(SCHEMA)
    for _ in range(12):
        theta = theta + rand_vec(rng, float(rng.choice([1e-3, 0.02, 0.3])))
        kb.logits = np.where(np.isfinite(kb.logits), kb.logits + rng.normal(0, 0.2, len(kb)), kb.logits)
        before = brute_offset(kb, theta)
        theta = kb.preserve(theta)
        assert np.max(np.abs(brute_offset(kb, theta) - before)) <= 1e-12
        kb.evict_if_full()


# ---------------------------------------------------------------------------
# similarity and eviction


def test_layer_cosine_average():
    u = vec([1, 0, 0, 1, 0, 0, 0, 0, 0])
    w = vec([2, 0, 0, 0, 1, 0, 0, 0, 0])
    # layer a: 1, layer b: 0, layer c: zero norm -> 0
    assert layer_cosine(u, w) == pytest.approx(1 / 3)
    two = ParamSchema(("p", "q"), (2, 2))
    assert layer_cosine(LayeredVector(two, [1, 0, 1, 0]), LayeredVector(two, [1, 0, 0, 1])) == 0.5


def test_layer_cosine_ignores_frozen_layers():
    s = ParamSchema(("p", "q"), (2, 2), (False, True))
    assert layer_cosine(LayeredVector(s, [1, 0, 1, 0]), LayeredVector(s, [1, 0, 0, 1])) == 1.0


def test_duplicate_is_most_similar():
    rng = make_rng(4)
    a, b = rand_vec(rng), rand_vec(rng)
    kb = kb_with([a, b, a.copy()])
    k, p, v = kb.pairwise_similarity()
    assert (k, p) == (0, 2) and v == pytest.approx(1.0)


def test_orthogonal_ties_lexicographic():
    basis = np.eye(SCHEMA.total)
    kb = kb_with([vec(basis[0]), vec(basis[1]), vec(basis[2])])
    assert kb.pairwise_similarity() == (0, 1, 0.0)


def test_pairwise_needs_two():
    with pytest.raises(ValueError):
        kb_with([vec(np.ones(SCHEMA.total))]).pairwise_similarity()


def test_evicts_older_member_of_top_pair():
    rng = make_rng(5)
    vs = [rand_vec(rng) for _ in range(6)]
    vs[5] = vs[2] * 3.0  # pair (2, 5) identical in direction
    kb = kb_with(vs, capacity=5)
    assert kb.evict_if_full() == [2]
    assert kb.indices == [0, 1, 3, 4, 5]


def test_last_finite_logit_survives():
    rng = make_rng(8)
    a = rand_vec(rng)
    kb = kb_with([a, a * 2.0, rand_vec(rng)], [0.0, -np.inf, -np.inf], capacity=2)
    offset = kb.aggregate(LayeredVector.zeros(SCHEMA))
    kb.evict_if_full()
    assert kb.indices == [0, 2]
    assert kb.aggregate(LayeredVector.zeros(SCHEMA)) == offset


def test_no_eviction_below_capacity():
    rng = make_rng(6)
    kb = kb_with([rand_vec(rng) for _ in range(3)], capacity=3)
    assert kb.evict_if_full() == [] and len(kb) == 3


def test_eviction_matches_oracle_over_many_insertions():
    rng = make_rng(7)
    kb = KnowledgeBase(SCHEMA, capacity=32)
    for step in range(1000):
        v = rand_vec(rng) if step % 7 else kb.vectors[int(rng.integers(len(kb)))].delta * 2.0 if len(kb) else rand_vec(rng)
        kb._append(v, float(rng.normal()))
        if len(kb) > kb.capacity:
            expect = brute_eviction(kb)
            kb.evict_if_full()
            assert expect not in kb.indices
        assert len(kb) <= 32
        assert len(kb.logits) == len(kb)
    np.testing.assert_allclose(kb.similarity_matrix, kb.recompute_similarity(), atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_similarity_cache_consistent(seed):
    rng = make_rng(seed)
    kb = KnowledgeBase.with_zero_vector(SCHEMA, capacity=4)
    theta = LayeredVector.zeros(SCHEMA)
    for _ in range(10):
        theta = theta + rand_vec(rng, 0.1)
        theta = kb.preserve(theta)
        kb.evict_if_full()
        np.testing.assert_allclose(kb.similarity_matrix, kb.recompute_similarity(), atol=1e-12)
        assert len(set(kb.indices)) == len(kb)


@given(st.integers(0, 2**32 - 1))
def test_eviction_deterministic(seed):
    rng = make_rng(seed)
    vs = [rand_vec(rng) for _ in range(6)]
    a, b = kb_with(vs, capacity=4), kb_with([v.copy() for v in vs], capacity=4)
    assert a.evict_if_full() == b.evict_if_full()
    assert a.indices == b.indices


def test_capacity_validation():
    with pytest.raises(ValueError):
        KnowledgeBase(SCHEMA, capacity=0)
    with pytest.raises(ValueError):
        KnowledgeBase(SCHEMA, temperature=0)
