"""Covariate balance checks and the GPI/ER compatibility test.

A correct principal-score model balances every covariate function h(X):
the weighted mean of h on the treated side of a stratum equals the
weighted mean on its control side. Each check treats h(X) as the outcome
of the weighting contrast, so no outcome data are read.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import estimators as est
from .dataset import DataError, ExperimentData
from .estimators import SensitivityParams
from .pscore import NumericalError, Regime, ScoreModel, Stratum

T_THRESHOLD = 1.96
ADVICE = ("imbalance detected: enrich the principal score model, for example with "
          "higher-order polynomial or interaction terms of the flagged covariates")


@dataclass(frozen=True)
class BalanceSpec:
    """Covariate functions to check.

    ``columns`` defaults to every covariate. ``squares`` adds ``x_j^2`` and
    ``products`` adds ``x_j * x_k`` (j < k) over the same columns.
    ``functions`` holds extra ``(name, f)`` pairs, where ``f`` maps the
    covariate matrix (intercept first) to one value per row.
    """

    columns: tuple | None = None
    squares: bool = False
    products: bool = False
    functions: tuple = ()

    def evaluate(self, data: ExperimentData) -> tuple[list, np.ndarray]:
        names = list(self.columns) if self.columns is not None else list(data.covariate_names)
        cols = []
        for nm in names:
            if nm not in data.covariate_names:
                raise DataError(f"unknown covariate {nm!r}")
            cols.append(data.x[:, 1 + data.covariate_names.index(nm)])
        out_names = list(names)
        out = list(cols)
        if self.squares:
            out_names += [f"{nm}^2" for nm in names]
            out += [c * c for c in cols]
        if self.products:
            for a in range(len(names)):
                for b in range(a + 1, len(names)):
                    out_names.append(f"{names[a]}*{names[b]}")
                    out.append(cols[a] * cols[b])
        for nm, f in self.functions:
            v = np.asarray(f(data.x), float)
            if v.shape != (data.n,) or not np.isfinite(v).all():
                raise DataError(f"covariate function {nm!r} must give one finite value per row")
            out_names.append(nm)
            out.append(v)
        if not out:
            raise DataError("no covariate functions to check")
        return out_names, np.column_stack(out)


def _weighted_sides(data, regime, scores, props, freq, H, sens=SensitivityParams(), normalize=True):
    """Treated-side and control-side weighted means of each column of ``H``.

    Returns two arrays of shape ``(B, strata, k)``.
    """
    ws = est._weights_batch(data, regime, sens, scores, props, freq, normalize)
    strata = est.target_strata(regime)
    lhs = np.empty((freq.shape[0], len(strata), H.shape[1]))
    rhs = np.empty_like(lhs)
    with np.errstate(invalid="ignore", divide="ignore"):
        for j, u in enumerate(strata):
            (m1, w1, _), (m0, w0, _) = ws[u]
            lhs[:, j] = (freq * w1) @ H / (freq @ m1)[:, None]
            rhs[:, j] = (freq * w0) @ H / (freq @ m0)[:, None]
    return lhs, rhs


@dataclass
class BalanceRow:
    h: str
    equation: str
    treated_side: float
    control_side: float
    difference: float
    se: float
    t: float
    flagged: bool
    degenerate: bool


@dataclass
class BalanceReport:
    rows: list
    regime: Regime
    B: int
    failed_replicates: int
    threshold: float = T_THRESHOLD
    config: dict = field(default_factory=dict)

    @property
    def flagged(self) -> list:
        return [r for r in self.rows if r.flagged]

    @property
    def advice(self) -> str | None:
        return ADVICE if self.flagged else None

    def t_matrix(self) -> np.ndarray:
        return np.array([r.t for r in self.rows])

    def to_dict(self) -> dict:
        return {
            "config": {**self.config, "regime": self.regime.tag, "xi": self.regime.xi, "B": self.B,
                       "threshold": self.threshold},
            "failed_replicates": self.failed_replicates,
            "advice": self.advice,
            "rows": [r.__dict__ for r in self.rows],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        names = list(BalanceRow.__dataclass_fields__)
        w = csv.writer(buf)
        w.writerow(names)
        for r in self.rows:
            w.writerow([getattr(r, k) for k in names])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def balance_check(data: ExperimentData, model: ScoreModel, spec: BalanceSpec = BalanceSpec(),
                  B: int = 200, seed: int = 0, *, jobs: int = 1, threshold: float = T_THRESHOLD,
                  fits: est.ReplicateFits | None = None) -> BalanceReport:
    """Weighted balance of each h(X) for every stratum's treated/control pair.

    Weights are normalized to mean 1 within each cell, which makes ``t``
    invariant to affine changes of h. The standard error is the bootstrap
    standard deviation with the score model refitted per replicate.
    """
    regime = model.regime
    est._require_cells(data, regime)
    if data.x.shape[1] != model.n_features:
        raise DataError("covariates do not match the score model")
    names, H = spec.evaluate(data)
    one = np.ones((1, data.n))
    lhs, rhs = _weighted_sides(data, regime, model.score_matrix(data.x)[None],
                               model.proportion_vector()[None], one, H)
    diff = (lhs - rhs)[0]
    if fits is None:
        init = model.coef_stack()[0] if regime.tag != "strong-mono" else None
        fits = est.bootstrap_fits(data, regime, B, seed, init, jobs=jobs)
    bl, br = _weighted_sides(data, regime, fits.scores, fits.proportions, fits.freq, H)
    bd = bl - br
    failed = ~fits.converged | ~np.isfinite(bd).all(axis=(1, 2))
    if failed.sum() > est.MAX_FAILED_FRACTION * fits.B:
        raise NumericalError(f"{int(failed.sum())} of {fits.B} bootstrap replicates failed (limit 10%)")
    se = bd[~failed].std(axis=0, ddof=1)
    rows = []
    for j, u in enumerate(est.target_strata(regime)):
        for k, nm in enumerate(names):
            s = float(se[j, k])
            d = float(diff[j, k])
            # a constant h has identical sides in every replicate
            degenerate = not s > 1e-12 * max(1.0, abs(float(lhs[0, j, k])))
            t = 0.0 if degenerate else d / s
            rows.append(BalanceRow(nm, str(u), float(lhs[0, j, k]), float(rhs[0, j, k]), d,
                                   s, t, abs(t) > threshold, degenerate))
    cfg = {"columns": names, "seed": seed}
    return BalanceReport(rows, regime, fits.B, int(failed.sum()), threshold, cfg)


def population_balance(pop, regime: Regime, h) -> dict:
    """Exact balance gaps on a discrete population with its true scores.

    ``h`` maps a support row (intercept first) to a vector. Returns
    ``{stratum: (k,) gaps}``; a correct model gives zeros.
    """
    data, freq, scores = pop.pseudo_dataset()
    H = np.array([np.atleast_1d(h(r)) for r in data.x], float)
    lhs, rhs = _weighted_sides(data, regime, scores[None], pop.proportions[None], freq[None], H,
                               normalize=False)
    return {u: (lhs - rhs)[0, j] for j, u in enumerate(est.target_strata(regime))}


@dataclass
class SideTest:
    side: str
    estimate: float
    se: float
    z: float
    p: float


@dataclass
class CompatibilityReport:
    sides: dict
    eps0: float
    eps1: float
    B: int
    failed_replicates: int

    def to_dict(self) -> dict:
        return {"eps0": self.eps0, "eps1": self.eps1, "B": self.B,
                "failed_replicates": self.failed_replicates,
                "tests": [s.__dict__ for s in self.sides.values()]}


def _normal_p(z):
    return math.erfc(abs(z) / math.sqrt(2.0))


def _compatibility_points(data, regime, scores, props, freq, eps0, eps1):
    cfg = est.PipelineConfig(regime=regime, sens=SensitivityParams(eps1=eps1, eps0=eps0))
    vals, ok = est.estimate_from_scores(data, cfg, scores, props, freq)
    strata = est.target_strata(regime)
    return {u: -vals[:, strata.index(u), 0] for u in (Stratum.SBARSBAR, Stratum.SS)}, ok


def population_compatibility(pop, eps0: float = 1.0, eps1: float = 1.0) -> dict:
    """Exact compatibility-test differences on a discrete monotonicity population."""
    regime = Regime.mono()
    data, freq, scores = pop.pseudo_dataset()
    pts, _ = _compatibility_points(data, regime, scores[None], pop.proportions[None], freq[None], eps0, eps1)
    return {u: float(v[0]) for u, v in pts.items()}


def er_gpi_test(data: ExperimentData, model: ScoreModel, eps0: float = 1.0, eps1: float = 1.0,
                B: int = 200, seed: int = 0, *, jobs: int = 1) -> CompatibilityReport:
    """Test the implication "no effect in stratum u and eps = 1" under monotonicity.

    sbarsbar side: ``E{w0_sbarsbar Y | Z=0, S=0} - E(Y | Z=1, S=0)``;
    ss side: ``E(Y | Z=0, S=1) - E{w1_ss Y | Z=1, S=1}``. Each is minus
    the stratum's weighting estimate, zero under the null.
    """
    if model.regime.tag != "mono":
        raise ValueError("the compatibility test requires the monotonicity regime")
    data.require_outcome()
    est._require_cells(data, model.regime)
    point, _ = _compatibility_points(data, model.regime, model.score_matrix(data.x)[None],
                                     model.proportion_vector()[None], np.ones((1, data.n)), eps0, eps1)
    fits = est.bootstrap_fits(data, model.regime, B, seed, model.coef_stack()[0], jobs=jobs)
    reps, ok = _compatibility_points(data, model.regime, fits.scores, fits.proportions, fits.freq, eps0, eps1)
    failed = ~ok | ~fits.converged
    if failed.sum() > est.MAX_FAILED_FRACTION * B:
        raise NumericalError(f"{int(failed.sum())} of {B} bootstrap replicates failed (limit 10%)")
    sides = {}
    for u in (Stratum.SBARSBAR, Stratum.SS):
        e = float(point[u][0])
        se = float(reps[u][~failed].std(ddof=1))
        z = e / se if se > 0 else 0.0
        sides[u] = SideTest(str(u), e, se, z, _normal_p(z) if se > 0 else 1.0)
    return CompatibilityReport(sides, eps0, eps1, B, int(failed.sum()))
