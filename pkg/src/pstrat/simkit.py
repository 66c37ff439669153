"""Simulation scenarios, study runner and exact finite-population oracles.

Scenario generators follow a fixed design: ``X = (1, X1..X4, X5)`` with
``X1..X4 ~ N(0, 1)`` and ``X5 ~ Bernoulli(1/2)``, treatment ``Z`` a fair
coin per unit, strata drawn from a logit (strong monotonicity) or a
three-class multinomial logit (monotonicity) whose last coefficient is
``theta``. "obs" analyses drop ``X5``; "oracle" analyses keep it.

:class:`DiscretePopulation` describes a population with finitely many
covariate values. Every expectation over it is a finite sum, which gives
exact checks of the identification formulas and the balancing equalities.
"""
from __future__ import annotations

import csv
import functools
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import estimators as est
from .dataset import DataError, ExperimentData, build
from .estimators import PipelineConfig, SensitivityParams
from .pscore import IDX, STRATA, NumericalError, Regime, Stratum

log = logging.getLogger(__name__)

COVARIATES = ("x1", "x2", "x3", "x4", "x5")
THETAS = (-1.0, -0.5, 0.0, 0.5, 1.0)
MAX_FAILED_REPS = 0.05


def expit(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


@dataclass(frozen=True)
class ScenarioSpec:
    """A simulation scenario.

    ``regime`` is "strong-mono" or "mono"; ``outcome`` is "normal",
    "bernoulli" or "quadratic" (normal means plus ``sum_{j<=4} X_j^2``,
    strong monotonicity only).
    """

    regime: str = "strong-mono"
    outcome: str = "normal"
    theta: float = 0.0
    oracle: bool = True
    n: int = 500

    def __post_init__(self):
        if self.regime not in ("strong-mono", "mono"):
            raise ValueError(f"unknown scenario regime {self.regime!r}")
        if self.outcome not in ("normal", "bernoulli", "quadratic"):
            raise ValueError(f"unknown outcome model {self.outcome!r}")
        if self.outcome == "quadratic" and self.regime != "strong-mono":
            raise ValueError("the quadratic outcome model is defined for strong monotonicity only")
        if self.n < 20:
            raise ValueError("n must be at least 20")

    @property
    def analysis(self) -> str:
        return "oracle" if self.oracle else "obs"

    @property
    def pipeline_regime(self) -> Regime:
        return Regime(self.regime)

    def label(self) -> str:
        return f"{self.regime}/{self.outcome}/theta={self.theta:g}/{self.analysis}"


PRESETS = {
    "strong-normal": ScenarioSpec("strong-mono", "normal"),
    "strong-bernoulli": ScenarioSpec("strong-mono", "bernoulli"),
    "strong-quadratic": ScenarioSpec("strong-mono", "quadratic"),
    "mono-normal": ScenarioSpec("mono", "normal"),
    "mono-bernoulli": ScenarioSpec("mono", "bernoulli"),
}


def preset(name: str, theta: float = 0.0, oracle: bool = True, n: int = 500) -> ScenarioSpec:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return replace(base, theta=float(theta), oracle=oracle, n=int(n))


def _draw_covariates(rng, n):
    return np.column_stack([rng.standard_normal((n, 4)), rng.integers(0, 2, n).astype(float)])


def stratum_probs(spec: ScenarioSpec, cov) -> np.ndarray:
    """True ``(n, 4)`` stratum probabilities in ``STRATA`` column order."""
    xf = np.column_stack([np.ones(cov.shape[0]), cov])
    out = np.zeros((cov.shape[0], 4))
    if spec.regime == "strong-mono":
        theta = np.array([0.0, 0.5, 0.5, 1.0, 1.0, spec.theta])
        p = expit(xf @ theta)
        out[:, IDX[Stratum.SSBAR]] = p
        out[:, IDX[Stratum.SBARSBAR]] = 1.0 - p
        return out
    t_ss = np.array([0.25, 0.5, 0.5, 1.0, 1.0, spec.theta])
    t_nn = np.array([-0.25, 1.0, 1.0, 0.5, 0.5, spec.theta])
    eta = np.column_stack([np.zeros(cov.shape[0]), xf @ t_ss, xf @ t_nn])
    eta -= eta.max(axis=1, keepdims=True)
    e = np.exp(eta)
    e /= e.sum(axis=1, keepdims=True)
    out[:, IDX[Stratum.SSBAR]] = e[:, 0]
    out[:, IDX[Stratum.SS]] = e[:, 1]
    out[:, IDX[Stratum.SBARSBAR]] = e[:, 2]
    return out


def outcome_means(spec: ScenarioSpec, cov, u) -> tuple[np.ndarray, np.ndarray]:
    """Conditional means (or success probabilities) of ``Y(1)`` and ``Y(0)``.

    ``u`` is an array of stratum column indices, one per row.
    """
    sx = cov.sum(axis=1)
    ss = (u == IDX[Stratum.SS]).astype(float)
    sb = (u == IDX[Stratum.SSBAR]).astype(float)
    nn = (u == IDX[Stratum.SBARSBAR]).astype(float)
    if spec.regime == "strong-mono":
        if spec.outcome == "bernoulli":
            return expit(0.3 * sx + sb), expit(0.3 * sx + 0.5)
        m1, m0 = sx + 2.0 * sb + 1.0, sx + 2.0
        if spec.outcome == "quadratic":
            q = (cov[:, :4] ** 2).sum(axis=1)
            m1, m0 = m1 + q, m0 + q
        return m1, m0
    if spec.outcome == "bernoulli":
        return expit(0.3 * sx + 0.25 * (nn - 1.0)), expit(0.3 * sx + 0.25 * (1.0 - ss))
    return sx - nn + 4.0, sx + ss + 1.0


@functools.lru_cache(maxsize=None)
def _bernoulli_truth(regime: str, theta: float, draws: int = 2_000_000, seed: int = 20160401) -> dict:
    """Stratum effects for Bernoulli outcomes, averaging conditional means
    over a large covariate sample (Rao-Blackwellized over U and Y)."""
    spec = ScenarioSpec(regime, "bernoulli", theta)
    rng = np.random.default_rng(seed)
    num = {u: 0.0 for u in STRATA}
    den = {u: 0.0 for u in STRATA}
    for _ in range(draws // 250_000):
        cov = _draw_covariates(rng, 250_000)
        e = stratum_probs(spec, cov)
        for u in Regime(regime).strata:
            k = np.full(cov.shape[0], IDX[u])
            m1, m0 = outcome_means(spec, cov, k)
            num[u] += float((e[:, IDX[u]] * (m1 - m0)).sum())
            den[u] += float(e[:, IDX[u]].sum())
    return {u: num[u] / den[u] for u in Regime(regime).strata}


def true_effects(spec: ScenarioSpec) -> dict:
    """Population stratum effects of a scenario."""
    if spec.outcome == "bernoulli":
        return dict(_bernoulli_truth(spec.regime, float(spec.theta)))
    if spec.regime == "strong-mono":
        return {Stratum.SSBAR: 1.0, Stratum.SBARSBAR: -1.0}
    return {Stratum.SSBAR: 3.0, Stratum.SBARSBAR: 2.0, Stratum.SS: 2.0}


@dataclass
class Truth:
    """Hidden quantities behind a generated dataset."""

    strata: np.ndarray
    y1: np.ndarray
    y0: np.ndarray
    effects: dict

    def sample_effects(self) -> dict:
        """Within-sample stratum means of ``Y(1) - Y(0)``."""
        d = self.y1 - self.y0
        return {STRATA[k]: float(d[self.strata == k].mean()) for k in np.unique(self.strata)}

    def sample_effects_by_difference(self) -> dict:
        """Same effects as the difference of within-stratum means."""
        return {STRATA[k]: float(self.y1[self.strata == k].mean() - self.y0[self.strata == k].mean())
                for k in np.unique(self.strata)}


def generate(spec: ScenarioSpec, seed) -> tuple[ExperimentData, Truth]:
    """Draw a dataset; the analysis covariates follow ``spec.oracle``."""
    rng = np.random.default_rng(seed)
    n = spec.n
    cov = _draw_covariates(rng, n)
    e = stratum_probs(spec, cov)
    u = (rng.random(n)[:, None] > np.cumsum(e, axis=1)).sum(axis=1)
    u = np.minimum(u, 3)
    z = rng.integers(0, 2, n)
    s1 = np.array([STRATA[k].s1 for k in range(4)])[u]
    s0 = np.array([STRATA[k].s0 for k in range(4)])[u]
    s = np.where(z == 1, s1, s0)
    m1, m0 = outcome_means(spec, cov, u)
    if spec.outcome == "bernoulli":
        y1 = (rng.random(n) < m1).astype(float)
        y0 = (rng.random(n) < m0).astype(float)
    else:
        y1 = m1 + rng.standard_normal(n)
        y0 = m0 + rng.standard_normal(n)
    y = np.where(z == 1, y1, y0)
    names = COVARIATES if spec.oracle else COVARIATES[:4]
    data = build(z, s, y, cov[:, : len(names)], names)
    return data, Truth(u, y1, y0, true_effects(spec))


# ---------------------------------------------------------------- study runner

@dataclass
class StudyRow:
    regime: str
    outcome: str
    theta: float
    analysis: str
    stratum: str
    variant: str
    truth: float
    mean_bias: float
    coverage: float
    mean_se: float
    sd_point: float
    reps: int
    failed: int


@dataclass
class StudyResult:
    spec: ScenarioSpec
    rows: list
    points: np.ndarray
    covered: np.ndarray
    config: dict = field(default_factory=dict)

    def row(self, stratum, variant="adjusted") -> StudyRow:
        for r in self.rows:
            if r.stratum == str(Stratum(stratum)) and r.variant == variant:
                return r
        raise KeyError((stratum, variant))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        names = list(StudyRow.__dataclass_fields__)
        w = csv.writer(buf)
        w.writerow(names)
        for r in self.rows:
            w.writerow([getattr(r, k) for k in names])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def _one_rep(args):
    spec, rep, seed, B, level, cfg = args
    data, truth = generate(spec, [int(seed), 0, rep])
    try:
        if B > 0:
            report = est.bootstrap(data, cfg, B, level, seed=int(seed) * 1_000_003 + rep)
        else:
            report = est.point_estimates(data, cfg)
    except (NumericalError, DataError) as exc:
        log.info("repetition %d failed: %s", rep, exc)
        return None
    out = {}
    for e in report.estimates:
        out[(e.stratum, e.variant)] = (e.point, e.se, e.ci[0], e.ci[1])
    return out


def run_study(spec: ScenarioSpec, reps: int = 300, B: int = 300, level: float = 0.95, seed: int = 0,
              *, jobs: int = 1, config: PipelineConfig | None = None) -> StudyResult:
    """Repeat generate, fit, estimate and bootstrap; aggregate bias and coverage.

    ``B = 0`` skips the bootstrap (points only, coverage reported as NaN).
    """
    if reps < 50:
        raise ValueError("at least 50 repetitions are required")
    cfg = config or PipelineConfig(regime=spec.pipeline_regime)
    tasks = [(spec, r, seed, B, level, cfg) for r in range(reps)]
    results = est.map_chunks(_one_rep, tasks, jobs)
    failed = sum(r is None for r in results)
    if failed > MAX_FAILED_REPS * reps:
        raise NumericalError(f"{failed} of {reps} repetitions failed (limit 5%)")
    good = [r for r in results if r is not None]
    truth = true_effects(spec)
    strata = est.target_strata(cfg.regime)
    pts = np.full((len(good), len(strata), 2), np.nan)
    cov = np.full(pts.shape, np.nan)
    ses = np.full(pts.shape, np.nan)
    for i, r in enumerate(good):
        for j, u in enumerate(strata):
            for k, var in enumerate(est.VARIANTS):
                p, se, lo, hi = r[(u, var)]
                pts[i, j, k] = p
                ses[i, j, k] = se
                cov[i, j, k] = (lo <= truth[u] <= hi) if B > 0 else np.nan
    rows = []
    for j, u in enumerate(strata):
        for k, var in enumerate(est.VARIANTS):
            rows.append(StudyRow(
                spec.regime, spec.outcome, spec.theta, spec.analysis, str(u), var, truth[u],
                float(np.mean(pts[:, j, k]) - truth[u]),
                float(np.mean(cov[:, j, k])) if B > 0 else float("nan"),
                float(np.mean(ses[:, j, k])) if B > 0 else float("nan"),
                float(np.std(pts[:, j, k], ddof=1)), len(good), failed,
            ))
    meta = {**cfg.to_dict(), "reps": reps, "B": B, "level": level, "seed": seed, **asdict(spec)}
    return StudyResult(spec, rows, pts, cov, meta)


# ------------------------------------------------------- discrete populations

@dataclass
class DiscretePopulation:
    """Finite covariate support with exact stratum scores and outcome means.

    ``x``: ``(J, p)`` support rows (intercept first); ``q``: ``(J,)``
    probabilities; ``scores``: ``(J, 4)`` in ``STRATA`` order; ``means``:
    ``(J, 4, 2)`` with ``means[j, u, z] = E{Y(z) | U = u, X = x_j}``.
    """

    x: np.ndarray
    q: np.ndarray
    scores: np.ndarray
    means: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, float))
        self.q = np.asarray(self.q, float)
        self.scores = np.asarray(self.scores, float)
        self.means = np.asarray(self.means, float)
        J = self.x.shape[0]
        if self.q.shape != (J,) or self.scores.shape != (J, 4) or self.means.shape != (J, 4, 2):
            raise ValueError("inconsistent population dimensions")
        if (self.q < 0).any() or abs(self.q.sum() - 1) > 1e-12:
            raise ValueError("support probabilities must be nonnegative and sum to 1")
        if (self.scores < 0).any() or np.abs(self.scores.sum(axis=1) - 1).max() > 1e-12:
            raise ValueError("scores must be nonnegative and sum to 1 at every support point")

    @property
    def proportions(self) -> np.ndarray:
        return self.q @ self.scores

    def effects(self) -> dict:
        """Exact stratum effects E{Y(1) - Y(0) | U = u} for strata with mass."""
        pi = self.proportions
        out = {}
        for u in STRATA:
            k = IDX[u]
            if pi[k] > 0:
                out[u] = float(self.q @ (self.scores[:, k] * (self.means[:, k, 1] - self.means[:, k, 0])) / pi[k])
        return out

    def check_regime(self, regime: Regime, sens: SensitivityParams = SensitivityParams(), tol=1e-12):
        """Raise if the scores or means violate the regime's assumptions."""
        e, m = self.scores, self.means
        ok = True
        if regime.tag == "strong-mono":
            ok &= np.allclose(e[:, [IDX[Stratum.SS], IDX[Stratum.SBARS]]], 0, atol=tol)
            ok &= np.allclose(m[:, IDX[Stratum.SSBAR], 0], sens.eps * m[:, IDX[Stratum.SBARSBAR], 0], atol=tol)
        else:
            if regime.tag == "mono":
                ok &= np.allclose(e[:, IDX[Stratum.SBARS]], 0, atol=tol)
            else:
                ok &= np.allclose(e[:, IDX[Stratum.SBARS]], regime.xi * e[:, IDX[Stratum.SSBAR]], atol=tol)
                ok &= np.allclose(m[:, IDX[Stratum.SBARS], 1], m[:, IDX[Stratum.SBARSBAR], 1], atol=tol)
                ok &= np.allclose(m[:, IDX[Stratum.SBARS], 0], m[:, IDX[Stratum.SS], 0], atol=tol)
            ok &= np.allclose(m[:, IDX[Stratum.SSBAR], 1], sens.eps1 * m[:, IDX[Stratum.SS], 1], atol=tol)
            ok &= np.allclose(m[:, IDX[Stratum.SSBAR], 0], sens.eps0 * m[:, IDX[Stratum.SBARSBAR], 0], atol=tol)
        if not ok:
            raise ValueError(f"population is inconsistent with {regime} and {sens}")

    def pseudo_dataset(self, h=None) -> tuple[ExperimentData, np.ndarray, np.ndarray]:
        """Rows ``(x_j, z, S, Y)`` with frequencies equal to their population mass.

        Every (support point, stratum with mass, arm) gives one row whose
        outcome is the conditional mean, so frequency-weighted sample means
        over these rows are exact population expectations. ``h`` replaces the
        outcome by a covariate function. Returns the data, the frequency row
        and the true scores of each row.
        """
        rows = []
        for j in range(self.x.shape[0]):
            for k, u in enumerate(STRATA):
                if self.scores[j, k] <= 0:
                    continue
                for z in (1, 0):
                    s = u.s1 if z else u.s0
                    yv = self.means[j, k, z] if h is None else h(self.x[j])
                    rows.append((j, z, s, yv, 0.5 * self.q[j] * self.scores[j, k]))
        j = np.array([r[0] for r in rows])
        data = build([r[1] for r in rows], [r[2] for r in rows], [r[3] for r in rows],
                     self.x[j, 1:], add_intercept=True)
        freq = np.array([r[4] for r in rows])
        return data, freq, self.scores[j]


def random_population(regime: Regime, rng, sens: SensitivityParams = SensitivityParams(),
                      n_support: int | None = None, p: int = 1,
                      lo: float = 0.05, hi: float = 0.95) -> DiscretePopulation:
    """A random population consistent with ``regime`` and ``sens``.

    Stratum scores lie in ``[lo, hi]``; free outcome means are standard
    normal draws shifted away from zero; dependent means follow the
    (generalized) principal ignorability constraints.
    """
    J = int(n_support or rng.integers(2, 5))
    x = np.column_stack([np.ones(J), rng.normal(size=(J, p))])
    q = rng.dirichlet(np.ones(J) * 2.0)
    admitted = [IDX[u] for u in regime.strata]
    e = np.zeros((J, 4))
    for j in range(J):
        for _ in range(100_000):
            if regime.tag == "no-mono":
                v = rng.dirichlet(np.ones(3))
                xi = regime.xi
                row = np.zeros(4)
                row[IDX[Stratum.SSBAR]] = v[0] / (1 + xi)
                row[IDX[Stratum.SBARS]] = v[0] * xi / (1 + xi)
                row[IDX[Stratum.SS]] = v[1]
                row[IDX[Stratum.SBARSBAR]] = v[2]
            else:
                row = np.zeros(4)
                row[admitted] = rng.dirichlet(np.ones(len(admitted)))
            if (row[admitted] >= lo).all() and (row[admitted] <= hi).all():
                e[j] = row
                break
        else:
            raise ValueError(f"cannot draw scores in [{lo}, {hi}] for {regime}")
    m = 1.0 + rng.normal(size=(J, 4, 2))
    m[:, :, :] += np.sign(m) * 0.5
    S, SB, BS, BB = (IDX[u] for u in STRATA)
    if regime.tag == "strong-mono":
        m[:, SB, 0] = sens.eps * m[:, BB, 0]
        m[:, [S, BS], :] = 0.0
    else:
        m[:, SB, 1] = sens.eps1 * m[:, S, 1]
        m[:, SB, 0] = sens.eps0 * m[:, BB, 0]
        if regime.tag == "no-mono":
            m[:, BS, 1] = m[:, BB, 1]
            m[:, BS, 0] = m[:, S, 0]
        else:
            m[:, BS, :] = 0.0
    pop = DiscretePopulation(x, q, e, m)
    pop.check_regime(regime, sens)
    return pop


def _oracle_weight(regime, sens, e, pi, z, u):
    """Weight formulas written out per regime, independent of the estimator code."""
    S, SB, BS, BB = (IDX[v] for v in STRATA)
    if regime.tag == "strong-mono":
        if z == 1:
            return np.ones(e.shape[0])
        eps = sens.eps
        if u is Stratum.SSBAR:
            return eps * e[:, SB] / ((eps * e[:, SB] + e[:, BB]) * pi[SB])
        return e[:, BB] / ((eps * e[:, SB] + e[:, BB]) * pi[BB])
    e1, e0 = sens.eps1, sens.eps0
    if regime.tag == "mono":
        table = {
            (1, Stratum.SSBAR): lambda: e1 * e[:, SB] / (e1 * e[:, SB] + e[:, S]) / (pi[SB] / (pi[SB] + pi[S])),
            (1, Stratum.SS): lambda: e[:, S] / (e1 * e[:, SB] + e[:, S]) / (pi[S] / (pi[SB] + pi[S])),
            (0, Stratum.SSBAR): lambda: e0 * e[:, SB] / (e0 * e[:, SB] + e[:, BB]) / (pi[SB] / (pi[SB] + pi[BB])),
            (0, Stratum.SBARSBAR): lambda: e[:, BB] / (e0 * e[:, SB] + e[:, BB]) / (pi[BB] / (pi[SB] + pi[BB])),
        }
        f = table.get((z, u))
        return f() if f else np.ones(e.shape[0])
    partner = {  # the other stratum sharing each (arm, stratum) cell without monotonicity
        (1, Stratum.SSBAR): Stratum.SS, (1, Stratum.SS): Stratum.SSBAR,
        (1, Stratum.SBARS): Stratum.SBARSBAR, (1, Stratum.SBARSBAR): Stratum.SBARS,
        (0, Stratum.SSBAR): Stratum.SBARSBAR, (0, Stratum.SBARSBAR): Stratum.SSBAR,
        (0, Stratum.SBARS): Stratum.SS, (0, Stratum.SS): Stratum.SBARS,
    }
    v = partner[(z, u)]
    fu = sens.factor(regime, z, u)
    fv = sens.factor(regime, z, v)
    ku, kv = IDX[u], IDX[v]
    return fu * e[:, ku] / (fu * e[:, ku] + fv * e[:, kv]) / (pi[ku] / (pi[ku] + pi[kv]))


def identified_effects(pop: DiscretePopulation, regime: Regime,
                       sens: SensitivityParams = SensitivityParams()) -> dict:
    """Evaluate each identification formula by summation over the support."""
    e, q, m = pop.scores, pop.q, pop.means
    pi = pop.proportions
    out = {}
    for u in est.target_strata(regime):
        sides = []
        for z in (1, 0):
            if regime.tag == "strong-mono" and z == 0:
                cell = [IDX[Stratum.SSBAR], IDX[Stratum.SBARSBAR]]
            else:
                s = u.s1 if z else u.s0
                cell = [IDX[v] for v in regime.strata if (v.s1 if z else v.s0) == s]
            mass = e[:, cell].sum(axis=1)
            ymean = (e[:, cell] * m[:, cell, z]).sum(axis=1) / mass
            w = _oracle_weight(regime, sens, e, pi, z, u)
            sides.append(float(q @ (mass * w * ymean)) / float(q @ mass))
        out[u] = sides[0] - sides[1]
    return out


def exact_check(pop: DiscretePopulation, regime: Regime,
                sens: SensitivityParams = SensitivityParams()) -> float:
    """Largest gap between identified and true stratum effects."""
    pop.check_regime(regime, sens)
    truth = pop.effects()
    ident = identified_effects(pop, regime, sens)
    return max(abs(ident[u] - truth[u]) for u in ident)


def population_estimates(pop: DiscretePopulation, regime: Regime,
                         sens: SensitivityParams = SensitivityParams(), *, normalize=False,
                         zero_beta=False) -> dict:
    """Run the sample estimators on the population's pseudo-dataset with true scores.

    Returns ``{stratum: (weighting, adjusted)}``; both equal the true
    effects when the identification formulas hold.
    """
    data, freq, scores = pop.pseudo_dataset()
    cfg = PipelineConfig(regime=regime, sens=sens, normalize=normalize, zero_beta=zero_beta)
    vals, ok = est.estimate_from_scores(data, cfg, scores[None], pop.proportions[None], freq[None])
    if not ok[0]:
        raise NumericalError("population estimate failed")
    return {u: (float(vals[0, j, 0]), float(vals[0, j, 1]))
            for j, u in enumerate(est.target_strata(regime))}
