import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from pstrat import numkit
from pstrat.numkit import (fit_weighted_logistic, fit_weighted_multinomial, predict_probabilities,
                           weighted_least_squares)


def logistic_loglik(beta, x, y, w):
    eta = x @ beta
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def multinomial_loglik(coef, x, labels, w):
    eta = x @ coef.T
    return float(np.sum(w * (eta[np.arange(len(labels)), labels] - np.logaddexp.reduce(eta, axis=1))))


def fd_grad(f, beta, h=1e-6):
    g = np.zeros_like(beta)
    for j in range(beta.size):
        e = np.zeros_like(beta)
        e.flat[j] = h
        g.flat[j] = (f(beta + e) - f(beta - e)) / (2 * h)
    return g


def small_logistic(seed=3, n=20):
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = (rng.random(n) < 1 / (1 + np.exp(-(0.3 + 0.8 * x[:, 1])))).astype(int)
    y[:2] = (0, 1)
    return x, y, rng.uniform(0.5, 2.0, n)


def test_intercept_only_symmetric_labels():
    f = fit_weighted_logistic(np.ones((4, 1)), [1, 1, 0, 0])
    assert f.converged
    assert abs(f.coefficients[0]) < 1e-12
    assert predict_probabilities(f, [1.0]) == pytest.approx(0.5)


def test_all_ones_flags_separation_and_pushes_probability_up():
    f = fit_weighted_logistic(np.column_stack([np.ones(6), np.arange(6.0)]), [1] * 6)
    assert f.separation
    p = predict_probabilities(f, np.column_stack([np.ones(6), np.arange(6.0)]))
    assert (p > 0.999).all()


def test_logistic_gradient_is_zero_by_finite_differences():
    x, y, w = small_logistic()
    f = fit_weighted_logistic(x, y, w)
    assert f.converged and f.final_gradient_norm <= numkit.GRAD_TOL
    g = fd_grad(lambda b: logistic_loglik(b, x, y, w), f.coefficients)
    assert np.linalg.norm(g) <= 1e-8 * max(1.0, w.sum())


def test_logistic_matches_statsmodels():
    sm = pytest.importorskip("statsmodels.api")
    x, y, w = small_logistic(seed=7, n=200)
    ref = sm.GLM(y, x, family=sm.families.Binomial(), freq_weights=w).fit(tol=1e-14)
    f = fit_weighted_logistic(x, y, w)
    np.testing.assert_allclose(f.coefficients, ref.params, atol=1e-7)


def test_multinomial_equal_classes_is_uniform():
    f = fit_weighted_multinomial(np.ones((9, 1)), np.repeat([0, 1, 2], 3))
    np.testing.assert_allclose(f.coefficients, 0.0, atol=1e-12)
    np.testing.assert_allclose(predict_probabilities(f, [1.0]), [1 / 3] * 3, atol=1e-12)
    assert np.all(f.coefficients[f.reference] == 0)


def test_two_class_multinomial_reduces_to_logistic():
    x, y, w = small_logistic(seed=5, n=60)
    a = fit_weighted_logistic(x, y, w)
    b = fit_weighted_multinomial(x, y, w, n_classes=2)
    np.testing.assert_allclose(b.coefficients[1], a.coefficients, atol=1e-10)
    np.testing.assert_array_equal(b.coefficients[0], 0.0)


def test_fractional_weights_match_nelder_mead():
    # intercept-only three-class fit with an E-step style fractional table
    labels = np.array([0, 1, 2, 0, 1, 2])
    w = np.array([0.3, 0.7, 1.0, 1.4, 0.6, 0.2])
    x = np.ones((6, 1))
    f = fit_weighted_multinomial(x, labels, w, n_classes=3)

    def neg(v):
        return -multinomial_loglik(np.array([[0.0], [v[0]], [v[1]]]), x, labels, w)

    ref = minimize(neg, np.zeros(2), method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 10000})
    np.testing.assert_allclose(f.coefficients[1:, 0], ref.x, atol=1e-6)


def test_multinomial_reference_choice_changes_only_parametrization():
    rng = np.random.default_rng(1)
    x = np.column_stack([np.ones(90), rng.normal(size=90)])
    labels = rng.integers(0, 3, 90)
    f0 = fit_weighted_multinomial(x, labels, reference=0)
    f2 = fit_weighted_multinomial(x, labels, reference=2)
    assert np.all(f2.coefficients[2] == 0)
    np.testing.assert_allclose(predict_probabilities(f0, x), predict_probabilities(f2, x), atol=1e-9)


def test_multinomial_gradient_by_finite_differences():
    rng = np.random.default_rng(4)
    x = np.column_stack([np.ones(40), rng.normal(size=40)])
    labels = rng.integers(0, 3, 40)
    w = rng.uniform(0.2, 1.5, 40)
    f = fit_weighted_multinomial(x, labels, w)
    g = fd_grad(lambda c: multinomial_loglik(np.vstack([np.zeros(2), c.reshape(2, 2)]), x, labels, w),
                f.coefficients[1:].ravel())
    assert np.linalg.norm(g) <= 1e-7


def test_wls_interpolates_two_points():
    b = weighted_least_squares(np.array([[1.0, 0.0], [1.0, 1.0]]), [1.0, 3.0])
    np.testing.assert_allclose(b, [1.0, 2.0], atol=1e-12)


def test_wls_degenerate_weights_use_ridge():
    x = np.array([[1.0, 2.0], [1.0, 2.0], [1.0, 5.0]])
    b, ridged = weighted_least_squares(x, [4.0, 4.0, 9.0], [1.0, 1.0, 0.0], return_info=True)
    assert ridged
    assert x[0] @ b == pytest.approx(4.0, abs=1e-6)
    with pytest.raises(np.linalg.LinAlgError):
        weighted_least_squares(x, [4.0, 4.0, 9.0], [1.0, 1.0, 0.0], fallback=False)


def test_wls_residuals_orthogonal():
    rng = np.random.default_rng(9)
    x = np.column_stack([np.ones(30), rng.normal(size=(30, 2))])
    y = rng.normal(size=30)
    w = rng.uniform(0.1, 3.0, 30)
    b = weighted_least_squares(x, y, w)
    np.testing.assert_allclose(x.T @ (w * (y - x @ b)), 0.0, atol=1e-10)


def test_predict_zero_coefficients():
    f = fit_weighted_multinomial(np.ones((3, 1)), [0, 1, 2])
    np.testing.assert_allclose(predict_probabilities(f, [1.0]), [1 / 3] * 3)


def test_predict_clamps_extremes():
    f = numkit.GlmFit(np.array([100.0]), True, 1, 0.0)
    assert predict_probabilities(f, [1.0]) == 1 - numkit.DELTA
    f = numkit.GlmFit(np.array([-100.0]), True, 1, 0.0)
    assert predict_probabilities(f, [1.0]) == numkit.DELTA


def test_predict_dimension_mismatch():
    f = numkit.GlmFit(np.zeros(2), True, 1, 0.0)
    with pytest.raises(ValueError):
        predict_probabilities(f, [1.0, 2.0, 3.0])


def test_batch_matches_single_fits():
    x, y, _ = small_logistic(seed=2, n=50)
    rng = np.random.default_rng(0)
    w = rng.uniform(0.5, 2.0, (4, 50))
    batch = numkit.logistic_batch(x, y, w)
    for b in range(4):
        np.testing.assert_allclose(batch.coef[b, 0], fit_weighted_logistic(x, y, w[b]).coefficients, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_weight_scaling_leaves_coefficients(seed, c):
    x, y, w = small_logistic(seed=seed % 1000, n=30)
    a = fit_weighted_logistic(x, y, w)
    b = fit_weighted_logistic(x, y, c * w)
    if a.separation:
        return
    np.testing.assert_allclose(a.coefficients, b.coefficients, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_converged_fit_beats_zero_and_meets_gradient_tolerance(seed):
    rng = np.random.default_rng(seed)
    n = 40
    x = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    labels = rng.integers(0, 3, n)
    w = rng.uniform(0.1, 2.0, n)
    f = fit_weighted_multinomial(x, labels, w, n_classes=3)
    if f.converged:
        assert f.final_gradient_norm <= numkit.GRAD_TOL
        assert multinomial_loglik(f.coefficients, x, labels, w) >= multinomial_loglik(np.zeros((3, 3)), x, labels, w)
    p = predict_probabilities(f, x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
