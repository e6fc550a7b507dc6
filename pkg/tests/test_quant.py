import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fwdtta.numerics import make_rng
from fwdtta.quant import (QuantSpec, direct_loss_gap, quantization_error_variance, quantization_errors, quantize,
                          sensitivity_experiment)

specs = st.builds(QuantSpec, st.integers(2, 10), st.floats(0.01, 10))


def test_spec_step_and_grid():
    s = QuantSpec(2, 1.0)
    assert s.step == pytest.approx(2 / 3)
    np.testing.assert_allclose(s.grid(), [-1, -1 / 3, 1 / 3, 1], atol=1e-15)
    assert len(QuantSpec(8, 0.3).grid()) == 256


@pytest.mark.parametrize("bits", [1, 0, 2.5])
def test_spec_rejects_bad_bits(bits):
    with pytest.raises(ValueError):
        QuantSpec(bits, 1.0)


def test_quantize_nearest_grid_point():
    assert quantize(0.4, QuantSpec(2, 1.0)) == pytest.approx(1 / 3)


def test_quantize_clamps():
    assert quantize(1.7, QuantSpec(3, 1.0)) == 1.0
    assert quantize(-5.0, QuantSpec(3, 1.0)) == -1.0


def test_quantize_ties_away_from_zero():
    # n=3, a=1: grid step 2/7, points at +-1/7, +-3/7, ...; 2/7 sits midway between 1/7 and 3/7
    s = QuantSpec(3, 1.0)
    assert quantize(2 / 7, s) == pytest.approx(3 / 7)
    assert quantize(-2 / 7, s) == pytest.approx(-3 / 7)


def test_quantize_grid_points_fixed():
    s = QuantSpec(5, 0.7)
    g = s.grid()
    np.testing.assert_array_equal(quantize(quantize(g, s), s), quantize(g, s))
    np.testing.assert_allclose(quantize(g, s), g, atol=1e-15)


@given(specs, st.lists(st.floats(-20, 20), min_size=1, max_size=40))
def test_quantize_idempotent(spec, w):
    q = quantize(w, spec)
    assert np.array_equal(quantize(q, spec), q)


@given(specs, st.lists(st.floats(-1, 1), min_size=1, max_size=40))
def test_quantize_error_bound_and_grid(spec, w):
    w = np.asarray(w) * spec.a
    q = quantize(w, spec)
    assert np.all(np.abs(q - w) <= spec.step / 2 * (1 + 1e-9))
    k = (q + spec.a) / spec.step
    np.testing.assert_allclose(k, np.round(k), atol=1e-6)


def test_predicted_variance_values():
    assert QuantSpec(8, 1.0).error_variance() == pytest.approx(5.1262e-6, rel=1e-4)
    assert QuantSpec(2, 1.0).error_variance() == pytest.approx(1 / 27)


def test_zero_range_is_degenerate():
    emp, pred = quantization_error_variance(QuantSpec(4, 0.0), make_rng(0), 10**4)
    assert emp == 0 and pred == 0


def test_variance_needs_enough_samples():
    with pytest.raises(ValueError):
        quantization_error_variance(QuantSpec(4, 1.0), make_rng(0), 100)


@pytest.mark.parametrize("bits", [2, 4, 8])
def test_error_statistics_match_uniform_model(bits):
    spec = QuantSpec(bits, 1.0)
    err = quantization_errors(spec, make_rng(bits), 10**6)
    assert abs(err.mean()) < 3 * err.std() / np.sqrt(err.size) * 2
    # independent oracle: variance of U(-phi/2, phi/2) is phi^2 / 12
    assert err.var() == pytest.approx(spec.step**2 / 12, rel=0.05)


# ---------------------------------------------------------------------------
# sensitivity


def _brute_force_gap(dim, bits, num_samples, num_models, seed, shift_std=0.5, noise_std=0.1):
    """Re-draw the same streams as the harness and evaluate MSEs sample by sample."""
    rng = make_rng(seed)
    x = rng.normal(size=(num_samples, dim))
    delta = rng.normal(0, shift_std, size=(num_samples, dim))
    xi = rng.normal(0, noise_std, size=(num_samples, dim))
    W = rng.uniform(-1, 1, size=(num_models, dim, dim))
    gaps = []
    for m in range(num_models):
        spec = QuantSpec(bits, float(np.abs(W[m]).max()))
        gaps.append(direct_loss_gap(W[m], quantize(W[m], spec), x, delta, xi))
    return float(np.mean(gaps))


@pytest.mark.parametrize("bits", [2, 5])
def test_sensitivity_matches_per_sample_evaluation(bits):
    rep = sensitivity_experiment(6, [bits], 500, make_rng(11), num_models=7)
    assert rep.rows[0].delta_loss == pytest.approx(_brute_force_gap(6, bits, 500, 7, 11), rel=1e-9)


def test_sensitivity_without_shift_is_pure_quantization_term():
    dim, n = 8, 4000
    rep = sensitivity_experiment(dim, [3], n, make_rng(5), num_models=20, shift_std=0.0, noise_std=0.0)
    rng = make_rng(5)
    x = rng.normal(size=(n, dim))
    W = rng.uniform(-1, 1, size=(20, dim, dim))
    cov = x.T @ x / n
    terms = []
    for m in range(20):
        dW = quantize(W[m], QuantSpec(3, float(np.abs(W[m]).max()))) - W[m]
        terms.append(np.trace(dW.T @ dW @ cov))
    assert rep.rows[0].delta_loss == pytest.approx(np.mean(terms), rel=1e-9)


def test_sensitivity_ratio_between_adjacent_widths():
    rep = sensitivity_experiment(16, [4, 5], 20_000, make_rng(2), num_models=2000)
    ratio = rep.rows[0].delta_loss / rep.rows[1].delta_loss
    assert ratio == pytest.approx((31 / 15) ** 2, rel=0.1)


def test_sensitivity_positive_and_monotone():
    rep = sensitivity_experiment(16, range(2, 9), 20_000, make_rng(3), num_models=500)
    gaps = [r.delta_loss for r in rep.rows]
    assert all(g > 0 for g in gaps)
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


def test_sensitivity_predicted_shape():
    rep = sensitivity_experiment(8, [3, 4], 5000, make_rng(4), num_models=50)
    p3, p4 = (r.predicted for r in rep.rows)
    assert p3 / p4 == pytest.approx((15 / 7) ** 2)


def test_sensitivity_csv_columns(tmp_path):
    rep = sensitivity_experiment(4, [2, 3], 1000, make_rng(0), num_models=5)
    text = rep.to_csv(tmp_path / "r.csv")
    assert text.splitlines()[0] == "n,delta_loss_empirical,delta_loss_predicted_shape"
    assert (tmp_path / "r.csv").read_text() == text
    assert len(text.splitlines()) == 3


@pytest.mark.parametrize("kw", [dict(dim=1, bit_list=[3]), dict(dim=4, bit_list=[])])
def test_sensitivity_rejects_bad_input(kw):
    with pytest.raises(ValueError):
        sensitivity_experiment(num_samples=100, rng=make_rng(0), **kw)
