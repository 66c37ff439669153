import json

import numpy as np
import pytest

from conftest import cell_data
from pstrat import estimators as est
from pstrat import sensitivity as sv
from pstrat import simkit
from pstrat.dataset import summarize
from pstrat.estimators import PipelineConfig, SensitivityParams
from pstrat.pscore import STRATA, Regime, xi_upper_bound

SS, SSBAR, SBARS, SBARSBAR = STRATA
B = 50


def _same(a, b):
    return (a.point, a.se, a.ci) == (b.point, b.se, b.ci)


@pytest.mark.parametrize("text, want", [
    ("1.5", [1.5]),
    ("0.5:2:3", [0.5, 1.0, 2.0]),
    ("0:0.4:5", [0.0, 0.1, 0.2, 0.3, 0.4]),
])
def test_parse_grid(text, want):
    np.testing.assert_allclose(sv.parse_grid(text), want)


@pytest.mark.parametrize("text", ["a", "1:2", "2:1:3", "1:2:0", "1:2:x"])
def test_parse_grid_rejects(text):
    with pytest.raises(ValueError, match="grid"):
        sv.parse_grid(text)


def test_default_grids(mono_data):
    g = sv.default_eps_grid()
    assert len(g) == 13 and g[0] == pytest.approx(0.5) and g[-1] == pytest.approx(2.0)
    assert g[6] == pytest.approx(1.0)
    x = sv.default_xi_grid(mono_data)
    assert len(x) == 11 and x[0] == 0 and x[-1] == pytest.approx(xi_upper_bound(summarize(mono_data)))


def test_eps_one_point_is_baseline(strong_data):
    grid = sv.grid_eps_strong(strong_data, [1.0], B=B, seed=2)
    base = est.bootstrap(strong_data, PipelineConfig(regime=Regime.strong()), B=B, seed=2)
    for e in base.estimates:
        assert _same(grid.lookup(e.stratum, e.variant, eps=1.0), e)


def test_eps_grid_recovers_population_truth_at_true_eps():
    rng = np.random.default_rng(11)
    pop = simkit.random_population(Regime.strong(), rng, SensitivityParams(eps=1.7), n_support=3)
    truth = pop.effects()
    for eps in (0.5, 1.0, 1.7, 2.0):
        got = simkit.population_estimates(pop, Regime.strong(), SensitivityParams(eps=eps))
        if eps == 1.7:
            for u, (w, a) in got.items():
                assert w == pytest.approx(truth[u], abs=1e-10) and a == pytest.approx(truth[u], abs=1e-10)
        else:
            assert abs(got[SSBAR][0] - truth[SSBAR]) > 1e-6


def test_mono_grid_dependence_structure(mono_data):
    e1 = [0.5, 1.0, 2.0]
    e0 = [0.7, 1.0, 1.4]
    grid = sv.grid_eps_mono(mono_data, e1, e0, B=B, seed=3)
    assert len(grid.points) == 9
    for var in est.VARIANTS:
        for a in e1:
            ss = [grid.lookup(SS, var, eps1=a, eps0=b) for b in e0]
            assert all(abs(s.point - ss[0].point) <= 1e-12 and s.ci == ss[0].ci for s in ss)
        for b in e0:
            nn = [grid.lookup(SBARSBAR, var, eps1=a, eps0=b) for a in e1]
            assert all(abs(s.point - nn[0].point) <= 1e-12 and s.ci == nn[0].ci for s in nn)
    base = est.bootstrap(mono_data, PipelineConfig(), B=B, seed=3)
    for e in base.estimates:
        assert _same(grid.lookup(e.stratum, e.variant, eps1=1.0, eps0=1.0), e)


def test_mono_grid_population_recovery():
    rng = np.random.default_rng(5)
    sens = SensitivityParams(eps1=0.6, eps0=1.8)
    pop = simkit.random_population(Regime.mono(), rng, sens, n_support=3)
    truth = pop.effects()
    for u, (w, a) in simkit.population_estimates(pop, Regime.mono(), sens).items():
        assert w == pytest.approx(truth[u], abs=1e-10) and a == pytest.approx(truth[u], abs=1e-10)


def test_xi_zero_point_matches_monotonicity(mono_data):
    grid = sv.grid_xi(mono_data, [0.0], B=B, seed=4)
    base = est.bootstrap(mono_data, PipelineConfig(), B=B, seed=4)
    for e in base.estimates:
        assert grid.lookup(e.stratum, e.variant, xi=0.0).point == pytest.approx(e.point, abs=1e-4)


def test_xi_population_recovery():
    rng = np.random.default_rng(9)
    pop = simkit.random_population(Regime.no_mono(0.35), rng, n_support=4)
    truth = pop.effects()
    for u, (w, a) in simkit.population_estimates(pop, Regime.no_mono(0.35)).items():
        assert w == pytest.approx(truth[u], abs=1e-10) and a == pytest.approx(truth[u], abs=1e-10)


def test_xi_grid_closed_form_proportions_feed_the_pipeline():
    rng = np.random.default_rng(0)
    d = cell_data((60, 40, 30, 70), y=rng.normal(size=200))
    full = est.full_sample(d, PipelineConfig(regime=Regime.no_mono(0.2)))
    props = full.scores.proportions[0]
    np.testing.assert_allclose(props[[STRATA.index(u) for u in (SSBAR, SBARSBAR, SS, SBARS)]],
                               [0.375, 0.325, 0.225, 0.075], atol=1e-6)


def test_xi_out_of_range_reports_bound(mono_data):
    bound = xi_upper_bound(summarize(mono_data))
    with pytest.raises(ValueError, match=f"{bound:.6g}"):
        sv.grid_xi(mono_data, [bound + 0.01], B=B)
    with pytest.raises(ValueError):
        sv.grid_xi(mono_data, [-0.1], B=B)


def test_grid_points_independent_of_order(mono_data):
    a = sv.grid_xi(mono_data, [0.0, 0.2], B=B, seed=6)
    b = sv.grid_xi(mono_data, [0.2, 0.0], B=B, seed=6)
    for xi in (0.0, 0.2):
        for u in (SS, SSBAR):
            assert _same(a.lookup(u, "adjusted", xi=xi), b.lookup(u, "adjusted", xi=xi))
    c = sv.grid_eps_strong(simkit.generate(simkit.preset("strong-normal"), 1)[0], [2.0, 0.5], B=B, seed=1)
    d = sv.grid_eps_strong(simkit.generate(simkit.preset("strong-normal"), 1)[0], [0.5, 2.0], B=B, seed=1)
    assert _same(c.lookup(SSBAR, eps=0.5), d.lookup(SSBAR, eps=0.5))


def test_grid_outputs(strong_data):
    grid = sv.grid_eps_strong(strong_data, [0.5, 2.0], B=B, seed=1)
    lines = grid.to_csv().splitlines()
    assert lines[0] == "eps,eps1,eps0,xi,stratum,variant,point,se,ci_low,ci_high,covers_zero,failed_replicates"
    assert len(lines) == 1 + 2 * 2 * 2
    doc = json.loads(grid.to_json())
    assert doc["axes"] == {"eps": [0.5, 2.0]} and doc["config"]["B"] == B
    for gp in grid.points:
        for (u, var), flag in gp.covers_zero().items():
            e = grid.lookup(u, var, eps=gp.params["eps"])
            assert flag == (e.ci[0] <= 0 <= e.ci[1])
    with pytest.raises(KeyError):
        grid.lookup(SSBAR, eps=1.3)
