import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from conftest import cell_data
from pstrat import simkit
from pstrat.dataset import build, summarize
from pstrat.pscore import (STRATA, EMConfig, Regime, ScoreModel, fit_em_batch,
                           fit_mono_em, fit_nomono_em, fit_scores, fit_strong_mono, membership_at,
                           nomono_proportions, observed_loglik, scores_at, xi_upper_bound)

SS, SSBAR, SBARS, SBARSBAR = STRATA


def four_cell_mle(counts):
    """Direct maximization of the monotonicity four-cell likelihood over the simplex."""
    n11, n10, n01, n00 = counts

    def neg(v):
        p = np.exp(np.r_[0.0, v])
        p /= p.sum()
        ss, sb, nn = p
        return -(n11 * np.log(ss + sb) + n10 * np.log(nn) + n01 * np.log(ss) + n00 * np.log(sb + nn))

    r = minimize(neg, np.zeros(2), method="Nelder-Mead",
                 options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 20000})
    p = np.exp(np.r_[0.0, r.x])
    return p / p.sum()


def test_em_cell_example_matches_direct_mle():
    m = fit_mono_em(cell_data((30, 20, 10, 40)))
    got = np.array([m.proportions[u] for u in (SS, SSBAR, SBARSBAR)])
    np.testing.assert_allclose(got, [0.2, 0.4, 0.4], atol=1e-6)
    np.testing.assert_allclose(got, four_cell_mle((30, 20, 10, 40)), atol=1e-6)
    assert m.converged


def test_em_trace_never_decreases():
    m = fit_mono_em(cell_data((30, 20, 10, 40)))
    assert np.all(np.diff(m.loglik_trace) >= -1e-12)


def test_equal_take_up_empties_complier_stratum():
    m = fit_mono_em(cell_data((30, 20, 30, 20)))
    assert m.proportions[SSBAR] < 1e-6


def test_plain_em_without_polish_is_monotone(mono_data):
    b = fit_em_batch(mono_data, np.ones((1, mono_data.n)), 0.0, EMConfig(polish=False, max_iter=60))
    assert np.all(np.diff(b.traces[0]) >= -1e-9 * abs(b.traces[0][-1]))


def test_trace_matches_independent_loglik(mono_data):
    from pstrat.pscore import _cell_design
    b = fit_em_batch(mono_data, np.ones((1, mono_data.n)))
    a = _cell_design(mono_data.z, mono_data.s, 0.0)
    ll = observed_loglik(mono_data.x, a, np.ones((1, mono_data.n)), b.coef)[0]
    # recompute from the reported scores, independent of the class layout
    e = b.scores[0]
    mix = np.where(a[:, 1] > 0, e[:, 0], 0) + np.where(a[:, 2] > 0, e[:, 3], 0) + a[:, 0] * e[:, 1]
    assert ll == pytest.approx(np.log(mix).sum(), rel=1e-10)
    assert b.traces[0][-1] == pytest.approx(ll, rel=1e-12)


def test_strong_intercept_only_share():
    m = fit_strong_mono(cell_data((60, 40, 0, 100)))
    assert m.proportions[SSBAR] == pytest.approx(0.6)
    assert scores_at(m, [1.0]) == pytest.approx({SSBAR: 0.6, SBARSBAR: 0.4})


def test_strong_separation_surfaces():
    cov = np.r_[np.arange(10), np.arange(10, 20), np.arange(10)].astype(float)
    d = build([1] * 20 + [0] * 10, [0] * 10 + [1] * 10 + [0] * 10, None, cov[:, None], ["c"])
    assert fit_strong_mono(d).separation


def test_strong_recovers_coefficients_at_large_n():
    rng = np.random.default_rng(2024)
    n = 50_000
    xv = rng.normal(size=n)
    s = (rng.random(n) < 1 / (1 + np.exp(-xv))).astype(int)
    d = build(np.ones(n, int).tolist()[:-1] + [0], s, None, xv[:, None], ["x"])
    m = fit_strong_mono(d)
    np.testing.assert_allclose(m.fit.coefficients, [0.0, 1.0], atol=0.05)


def test_mono_recovers_generator_at_large_n():
    # the binary covariate's coefficient has sd ~0.09 at n = 20000, so average four draws
    fits = []
    for seed in range(4):
        data, _ = simkit.generate(simkit.preset("mono-normal", theta=0.5, n=20_000), seed=seed)
        fits.append(fit_mono_em(data).fit.coefficients)
    c = np.mean(fits, axis=0)
    np.testing.assert_allclose(c[1], [0.25, 0.5, 0.5, 1.0, 1.0, 0.5], atol=0.1)
    np.testing.assert_allclose(c[2], [-0.25, 1.0, 1.0, 0.5, 0.5, 0.5], atol=0.1)


def test_nomono_at_zero_matches_mono(mono_data):
    a = fit_mono_em(mono_data)
    b = fit_nomono_em(mono_data, 0.0)
    np.testing.assert_allclose(a.score_matrix(mono_data.x), b.score_matrix(mono_data.x), atol=1e-4)
    for u in a.regime.strata:
        assert b.proportions[u] == pytest.approx(a.proportions[u], abs=1e-4)


def test_nomono_intercept_only_proportions():
    m = fit_nomono_em(cell_data((60, 40, 30, 70)), 0.2)
    want = {SSBAR: 0.375, SBARSBAR: 0.325, SS: 0.225, SBARS: 0.075}
    for u, v in want.items():
        assert m.proportions[u] == pytest.approx(v, abs=1e-6)
    assert all(np.diff(m.loglik_trace) >= -1e-12)


def test_nomono_rejects_xi_above_bound():
    d = cell_data((60, 40, 30, 70))
    with pytest.raises(ValueError, match="admissible"):
        fit_nomono_em(d, 0.6)


def test_scores_at_even_split():
    d = cell_data((60, 40, 30, 70))
    m = fit_nomono_em(d, 0.5)
    e = scores_at(m, [1.0])
    assert e[SBARS] / e[SSBAR] == pytest.approx(0.5)
    # at xi = 1 the shares are equal; exercised through the class-to-stratum map
    from pstrat.pscore import _strata_from_classes
    out = _strata_from_classes(np.array([[0.5, 0.3, 0.2]]), Regime.no_mono(1.0))[0]
    assert out[1] == pytest.approx(0.25) and out[2] == pytest.approx(0.25)


def test_zero_coefficients_give_thirds():
    d = cell_data((10, 10, 10, 10))
    m = fit_mono_em(d)
    zero = ScoreModel(m.regime, type(m.fit)(np.zeros((3, 1)), True, 0, 0.0, kind="multinomial"), m.proportions)
    assert scores_at(zero, [1.0]) == pytest.approx({SSBAR: 1 / 3, SS: 1 / 3, SBARSBAR: 1 / 3})


def test_membership_examples():
    from pstrat.pscore import _strata_from_classes
    # monotonicity model whose scores at x are ssbar 0.3, ss 0.5, sbarsbar 0.2
    eta = np.log([0.3, 0.5, 0.2]) - np.log(0.3)
    fit = type(fit_mono_em(cell_data((10, 10, 10, 10))).fit)(eta[:, None], True, 0, 0.0, kind="multinomial")
    m = ScoreModel(Regime.mono(), fit, {})
    assert membership_at(m, 1, 1, [1.0]) == pytest.approx({SSBAR: 0.375, SS: 0.625})
    assert membership_at(m, 1, 0, [1.0]) == pytest.approx({SBARSBAR: 1.0})
    # no-monotonicity: classes chosen so that e_ss = 0.2 and e_sbars = 0.1 (xi = 0.5)
    eta = np.log([0.3, 0.2, 0.5]) - np.log(0.3)
    fit = type(fit)(eta[:, None], True, 0, 0.0, kind="multinomial")
    m = ScoreModel(Regime.no_mono(0.5), fit, {})
    assert membership_at(m, 0, 1, [1.0]) == pytest.approx({SS: 2 / 3, SBARS: 1 / 3})
    assert _strata_from_classes(np.array([eta]), Regime.no_mono(0.5)).shape == (1, 4)


@pytest.mark.parametrize("p1, p0, bound", [(0.6, 0.3, 0.5), (0.4, 0.4, 1.0), (1.0, 0.0, 0.0)])
def test_xi_bound_examples(p1, p0, bound):
    summary = type(summarize(cell_data((1, 1, 1, 1))))({}, p1, p0)
    assert xi_upper_bound(summary) == pytest.approx(bound, abs=1e-15)


def test_xi_bound_requires_nonnegative_effect_on_s():
    summary = type(summarize(cell_data((1, 1, 1, 1))))({}, 0.3, 0.6)
    with pytest.raises(ValueError, match="swap"):
        xi_upper_bound(summary)


def test_closed_form_proportions_example():
    p = nomono_proportions(0.6, 0.3, 0.2)
    assert p == pytest.approx({SSBAR: 0.375, SBARSBAR: 0.325, SS: 0.225, SBARS: 0.075})


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_closed_form_proportions_are_a_distribution(a, b, t):
    p1, p0 = max(a, b), min(a, b)
    if p1 - p0 < 1e-6:
        return
    bound = xi_upper_bound(type(summarize(cell_data((1, 1, 1, 1))))({}, p1, p0))
    xi = t * bound
    if xi >= 1:
        return
    pr = nomono_proportions(p1, p0, xi)
    assert sum(pr.values()) == pytest.approx(1.0, abs=1e-12)
    assert min(pr.values()) >= -1e-12
    if bound < 1:
        at = nomono_proportions(p1, p0, bound)
        assert min(at[SS], at[SBARSBAR]) == pytest.approx(0.0, abs=1e-10)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.1, 0.3]))
def test_em_monotone_and_scores_normalized(seed, xi):
    rng = np.random.default_rng(seed)
    n = 120
    z = np.r_[1, 1, 0, 0, rng.integers(0, 2, n - 4)]
    s = np.r_[1, 0, 1, 0, rng.integers(0, 2, n - 4)]
    s[z == 1] = np.maximum(s[z == 1], rng.random((z == 1).sum()) < 0.3)
    d = build(z, s, None, rng.normal(size=(n, 2)), ["a", "b"])
    try:
        bound = xi_upper_bound(summarize(d))
    except ValueError:
        return
    xi = min(xi, bound)
    m = fit_scores(d, Regime.mono() if xi == 0 else Regime.no_mono(xi))
    assert np.all(np.diff(m.loglik_trace) >= -1e-10 * abs(m.loglik_trace[-1]))
    e = m.score_matrix(d.x)
    np.testing.assert_allclose(e.sum(axis=1), 1.0, atol=1e-10)
    cols = [STRATA.index(u) for u in m.regime.strata if not (u is SBARS and xi == 0)]
    assert (e[:, cols] >= 1e-12 * 0.999).all() and (e[:, cols] <= 1 - 1e-12 * 0.999).all()
    assert sum(m.proportions.values()) == pytest.approx(1.0, abs=1e-10)


def test_model_json_round_trip(mono_data):
    m = fit_mono_em(mono_data)
    back = ScoreModel.from_json(m.to_json())
    np.testing.assert_array_equal(back.score_matrix(mono_data.x), m.score_matrix(mono_data.x))
    assert back.proportions == m.proportions and back.regime == m.regime


def test_score_matrix_dimension_mismatch(mono_data):
    m = fit_mono_em(mono_data)
    with pytest.raises(ValueError, match="covariates"):
        m.score_matrix(np.ones((2, 3)))


def test_regime_validation():
    with pytest.raises(ValueError):
        Regime("mono", 0.3)
    with pytest.raises(ValueError):
        Regime("no-mono")
    assert Regime.strong().strata == (SSBAR, SBARSBAR)
    assert Regime.mono().strata == (SS, SSBAR, SBARSBAR)
    assert len(Regime.no_mono(0.1).strata) == 4
