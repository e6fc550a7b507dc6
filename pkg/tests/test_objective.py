import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fwdtta.model import FeatureStats, ForwardTrace, batch_feature_stats
from fwdtta.numerics import make_rng
from fwdtta.objective import (DEFAULT_CALIBRATION_SIZE, LAMBDA_CONV, LAMBDA_DENSE, ObjectiveConfig, alignment_term,
                              calibrate_source_stats, entropy_term, total_loss)

from test_model import small_cnn, small_mlp

logit_arrays = hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 6)), elements=st.floats(-30, 30))


def _trace(logits, feats):
    return ForwardTrace(np.asarray(logits, float), [np.asarray(f, float) for f in feats], np.zeros((len(logits), 1)))


def test_uniform_entropy():
    for b in (1, 3, 64):
        assert entropy_term(np.zeros((b, 10))) == pytest.approx(np.log(10) / 10, abs=1e-9)


def test_confident_entropy_zero():
    logits = np.full((4, 5), -1e4)
    logits[np.arange(4), [0, 1, 2, 3]] = 1e4
    assert entropy_term(logits) == pytest.approx(0.0, abs=1e-12)


def test_entropy_against_direct_formula():
    z = make_rng(0).normal(size=(5, 4))
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    assert entropy_term(z) == pytest.approx(-np.sum(p * np.log(p)) / (5 * 4), rel=1e-12)


@pytest.mark.parametrize("bad", [np.zeros((3, 1)), np.zeros((0, 3)), np.array([[np.nan, 0.0]])])
def test_entropy_rejects(bad):
    with pytest.raises((ValueError, FloatingPointError)):
        entropy_term(bad)


@given(logit_arrays, st.randoms())
def test_entropy_bounds_and_order(logits, rnd):
    c = logits.shape[1]
    e = entropy_term(logits)
    assert -1e-15 <= e <= np.log(c) / c + 1e-12
    idx = list(range(len(logits)))
    rnd.shuffle(idx)
    assert entropy_term(logits[idx]) == pytest.approx(e, rel=1e-12, abs=1e-15)


def test_alignment_hand_value():
    a = FeatureStats([np.array([0.0])], [np.array([1.0])])
    b = FeatureStats([np.array([3.0])], [np.array([5.0])])
    assert alignment_term(a, b) == pytest.approx(7.0)
    assert alignment_term(a, a) == 0.0


def test_alignment_averages_blocks_and_scales():
    rng = make_rng(1)
    s = FeatureStats([rng.normal(size=3), rng.normal(size=2)], [rng.uniform(size=3), rng.uniform(size=2)])
    d = [rng.normal(size=3), rng.normal(size=2)]
    t1 = FeatureStats([m + x for m, x in zip(s.means, d)], s.stds)
    t2 = FeatureStats([m + 2 * x for m, x in zip(s.means, d)], s.stds)
    expect = (np.linalg.norm(d[0]) + np.linalg.norm(d[1])) / 2
    assert alignment_term(t1, s) == pytest.approx(expect)
    assert alignment_term(t2, s) == pytest.approx(2 * expect)


def test_alignment_shape_mismatch():
    a = FeatureStats([np.zeros(2)], [np.zeros(2)])
    with pytest.raises(ValueError):
        alignment_term(a, FeatureStats([np.zeros(3)], [np.zeros(3)]))
    with pytest.raises(ValueError):
        alignment_term(a, FeatureStats([np.zeros(2)] * 2, [np.zeros(2)] * 2))


def test_total_loss_composition():
    feats = [np.array([[1.0, 2.0], [3.0, 0.0]])]
    tr = _trace(np.zeros((2, 10)), feats)
    same = batch_feature_stats(tr)
    assert total_loss(tr, same, ObjectiveConfig(30.0)) == pytest.approx(np.log(10) / 10, abs=1e-9)
    other = FeatureStats([np.zeros(2)], [np.zeros(2)])
    assert total_loss(tr, other, ObjectiveConfig(0.0)) == entropy_term(tr.logits)
    lam = 2.5
    assert total_loss(tr, other, ObjectiveConfig(lam)) == pytest.approx(
        entropy_term(tr.logits) + lam * alignment_term(same, other))


@given(hnp.arrays(np.float64, (5, 3), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (5, 4), elements=st.floats(-5, 5)), st.floats(0, 50), st.randoms())
def test_total_loss_nonnegative_and_permutation_invariant(logits, feats, lam, rnd):
    src = FeatureStats([np.zeros(4)], [np.ones(4)])
    cfg = ObjectiveConfig(lam)
    val = total_loss(_trace(logits, [feats]), src, cfg)
    idx = list(range(5))
    rnd.shuffle(idx)
    assert val >= 0
    assert total_loss(_trace(logits[idx], [feats[idx]]), src, cfg) == pytest.approx(val, rel=1e-9, abs=1e-12)


def test_lambda_defaults_per_architecture():
    assert (LAMBDA_DENSE, LAMBDA_CONV) == (30.0, 1.0)
    assert ObjectiveConfig.for_model(small_mlp()).lam == 30.0
    assert ObjectiveConfig.for_model(small_cnn()).lam == 1.0
    with pytest.raises(ValueError):
        ObjectiveConfig(-1.0)


def test_calibration():
    m = small_mlp()
    x = make_rng(2).normal(size=(DEFAULT_CALIBRATION_SIZE, 5))
    a, b = calibrate_source_stats(m, x), calibrate_source_stats(m, x)
    assert DEFAULT_CALIBRATION_SIZE == 32
    for u, v in zip(a.means + a.stds, b.means + b.stds):
        assert np.array_equal(u, v)
    const = calibrate_source_stats(m, np.ones((8, 5)))
    assert all(not s.any() for s in const.stds)
    with pytest.raises(ValueError):
        calibrate_source_stats(m, x[:1])
