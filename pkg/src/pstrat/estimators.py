"""Principal causal effect estimators and bootstrap inference.

For a target stratum ``u`` with potential values ``(S(1), S(0)) = (a, b)``
the treated side is observed cell ``(1, a)`` and the control side is cell
``(0, b)`` (the whole control arm under strong monotonicity). Inside a
mixed cell a unit is weighted by

    w_{z,u}(X) = [eps_u e_u(X) / sum_v eps_v e_v(X)] / [pi_u / sum_v pi_v],

the sums running over the strata sharing the cell. ``eps_u`` is 1 except
for ssbar, which takes ``eps`` (strong monotonicity, control side),
``eps1`` (treated side) or ``eps0`` (control side). Units in a cell holding
a single stratum get weight 1.

The covariate-adjusted estimator uses the eps-weights on ``Y`` only. The
regressions and covariate moments use the eps = 1 weights: those identify
the covariate distribution of stratum ``u`` whatever the outcome
sensitivity, so the adjustment still cancels in expectation.

Everything below works on a stack of frequency-weight vectors ``(B, n)``
so that a bootstrap is one batched computation; the public single-sample
functions call the batched core with ``B = 1``.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import numkit, pscore
from .dataset import DataError, ExperimentData
from .pscore import IDX, EMConfig, NumericalError, Regime, ScoreModel, Stratum

log = logging.getLogger(__name__)

VARIANTS = ("weighting", "adjusted")
MAX_FAILED_FRACTION = 0.10
CHUNK = 64

# replicate fits start at the full-sample fit and switch to Newton at once
BOOT_EM = EMConfig(handover_rtol=1.0, polish_stop_rtol=1e-10)


@dataclass(frozen=True)
class SensitivityParams:
    """Ratios of stratum-specific outcome means; all 1 means (G)PI holds."""

    eps: float = 1.0
    eps1: float = 1.0
    eps0: float = 1.0

    def __post_init__(self):
        for name in ("eps", "eps1", "eps0"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive, got {v!r}")

    def check_regime(self, regime: Regime) -> None:
        if regime.tag == "strong-mono" and (self.eps1 != 1 or self.eps0 != 1):
            raise ValueError("eps1/eps0 apply only under monotonicity or no-monotonicity")
        if regime.tag != "strong-mono" and self.eps != 1:
            raise ValueError("eps applies only under strong monotonicity")

    def factor(self, regime: Regime, z: int, u: Stratum) -> float:
        if u is not Stratum.SSBAR:
            return 1.0
        if regime.tag == "strong-mono":
            return self.eps if z == 0 else 1.0
        return self.eps1 if z == 1 else self.eps0

    def to_dict(self, regime: Regime | None = None) -> dict:
        d = {"eps": self.eps, "eps1": self.eps1, "eps0": self.eps0}
        d["xi"] = None if regime is None else regime.xi
        return d


def target_strata(regime: Regime) -> tuple[Stratum, ...]:
    """Strata with an estimable effect; sbars is empty when xi = 0."""
    if regime.tag == "no-mono" and regime.xi == 0:
        return tuple(u for u in regime.strata if u is not Stratum.SBARS)
    return regime.strata


def side_mask(regime: Regime, data: ExperimentData, z: int, u: Stratum) -> np.ndarray:
    if regime.tag == "strong-mono" and z == 0:
        return data.z == 0
    return data.cell(z, u.s1 if z == 1 else u.s0)


def _cell_of(regime, z, u):
    if regime.tag == "strong-mono" and z == 0:
        return regime.cell_strata(0, None)
    return regime.cell_strata(z, u.s1 if z == 1 else u.s0)


def _raw_weights(regime, sens, scores, props, z, u):
    """Weight of stratum ``u`` on side ``z`` at every unit, ``(B, n)``."""
    cell = _cell_of(regime, z, u)
    if len(cell) == 1:
        return np.ones(scores.shape[:2])
    eu = sens.factor(regime, z, u) * scores[..., IDX[u]]
    tot = sum(sens.factor(regime, z, v) * scores[..., IDX[v]] for v in cell)
    pi_tot = sum(props[:, IDX[v]] for v in cell)
    share = props[:, IDX[u]] / pi_tot
    return (eu / tot) / share[:, None]


@dataclass
class WeightSet:
    """Per-stratum unit weights on the treated and control sides.

    ``treated[u]`` and ``control[u]`` have shape ``(n,)`` and are zero
    outside the side's cell. ``treated_base``/``control_base`` hold the
    same weights at eps = 1 (used for covariate terms).
    """

    regime: Regime
    sens: SensitivityParams
    treated: dict
    control: dict
    treated_base: dict
    control_base: dict
    normalized: bool = False

    @property
    def strata(self):
        return tuple(self.treated)


def _hajek_factor(w, m, freq):
    """Per-replicate factor that rescales ``w`` to mean one over the cell."""
    with np.errstate(invalid="ignore", divide="ignore"):
        return ((freq @ m) / (freq * w).sum(axis=1))[:, None]


def _weights_batch(data, regime, sens, scores, props, freq, normalize):
    """``{u: [(mask, w, w_base) for z in (1, 0)]}`` with ``(B, n)`` weights."""
    base = SensitivityParams()
    out = {}
    for u in target_strata(regime):
        sides = []
        for z in (1, 0):
            m = side_mask(regime, data, z, u)
            w = _raw_weights(regime, sens, scores, props, z, u) * m
            wb = w if sens == base else _raw_weights(regime, base, scores, props, z, u) * m
            if normalize:
                # the eps = 1 weights set the scale: eps-weights need not average one
                k = _hajek_factor(wb, m, freq)
                w, wb = (w * k, wb * k) if wb is not w else (w * k,) * 2
            sides.append((m, w, wb))
        out[u] = sides
    return out


def stratum_weights(data: ExperimentData, model: ScoreModel,
                    sens: SensitivityParams = SensitivityParams(), *, normalize=False) -> WeightSet:
    """Weights from a fitted score model, evaluated on ``data``."""
    regime = model.regime
    sens.check_regime(regime)
    if data.x.shape[1] != model.n_features:
        raise DataError("covariates do not match the score model")
    _require_cells(data, regime)
    scores = model.score_matrix(data.x)[None]
    props = model.proportion_vector()[None]
    ws = _weights_batch(data, regime, sens, scores, props, np.ones((1, data.n)), normalize)
    parts = ({}, {}, {}, {})
    for u, ((_, w1, b1), (_, w0, b0)) in ws.items():
        for d, w in zip(parts, (w1, w0, b1, b0)):
            assert np.isfinite(w).all() and (w >= 0).all()
            d[u] = w[0]
    return WeightSet(regime, sens, *parts, normalized=normalize)


def _require_cells(data, regime):
    for u in target_strata(regime):
        for z in (1, 0):
            if not side_mask(regime, data, z, u).any():
                raise DataError(f"empty cell {_cell_name(regime, z, u)} needed for stratum {u}")


def _cell_name(regime, z, u):
    if regime.tag == "strong-mono" and z == 0:
        return "(z=0)"
    return f"(z={z}, s={u.s1 if z == 1 else u.s0})"


@dataclass
class AdjustmentFit:
    """Outcome regression coefficients per stratum: ``beta1[u]``, ``beta0[u]``."""

    beta1: dict
    beta0: dict
    ridged: dict = field(default_factory=dict)


def _contrasts(y, x, freq, m1, w1, m0, w0, zero_beta=False, b1w=None, b0w=None):
    """Weighting and adjusted contrasts for one stratum, each ``(B,)``.

    ``b1w``/``b0w`` are the eps = 1 weights for the covariate terms (default:
    the outcome weights). Also returns the regression coefficients, ridge
    flags and whether both sides are non-empty.
    """
    b1w = w1 if b1w is None else b1w
    b0w = w0 if b0w is None else b0w
    a1 = freq * w1
    a0 = freq * w0
    n1 = freq @ m1
    n0 = freq @ m0
    nb = freq.shape[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        weighting = a1 @ y / n1 - a0 @ y / n0
        if zero_beta:
            beta1 = beta0 = np.zeros((nb, x.shape[1]))
            ridged = np.zeros(nb, bool)
            adjusted = weighting.copy()
        else:
            c1 = a1 if b1w is w1 else freq * b1w
            c0 = a0 if b0w is w0 else freq * b0w
            beta1, r1 = numkit.wls_batch(x, y, c1)
            beta0, r0 = numkit.wls_batch(x, y, c0)
            ridged = r1 | r0
            sx1 = c1 @ x
            sx0 = c0 @ x
            adjusted = (
                (a1 @ y - (sx1 * beta1).sum(axis=1)) / n1
                - (a0 @ y - (sx0 * beta0).sum(axis=1)) / n0
                + ((beta1 - beta0) * (sx1 + sx0)).sum(axis=1) / (n1 + n0)
            )
    return weighting, adjusted, (beta1, beta0, ridged), (n1 > 0) & (n0 > 0)


@dataclass(frozen=True)
class PceEstimate:
    stratum: Stratum
    variant: str
    point: float
    se: float = float("nan")
    ci: tuple = (float("nan"), float("nan"))
    B: int = 0
    failed_replicates: int = 0
    regime: Regime | None = None
    sensitivity: SensitivityParams | None = None

    def covers(self, value: float) -> bool:
        return bool(self.ci[0] <= value <= self.ci[1])

    def to_dict(self) -> dict:
        return {
            "stratum": str(self.stratum),
            "variant": self.variant,
            "point": self.point,
            "se": self.se,
            "ci": [self.ci[0], self.ci[1]],
            "B": self.B,
            "failed_replicates": self.failed_replicates,
            "regime": None if self.regime is None else self.regime.tag,
            "sensitivity": None if self.sensitivity is None else self.sensitivity.to_dict(self.regime),
        }


def pce_weighting(data: ExperimentData, weights: WeightSet) -> dict:
    """Weighting estimates ``{stratum: PceEstimate}`` (points only)."""
    y = data.require_outcome()
    f = np.ones((1, data.n))
    out = {}
    for u in weights.strata:
        m1 = side_mask(weights.regime, data, 1, u)
        m0 = side_mask(weights.regime, data, 0, u)
        wt, _, _, ok = _contrasts(y, data.x, f, m1, weights.treated[u][None], m0,
                                  weights.control[u][None], zero_beta=True)
        if not ok[0]:
            raise DataError(f"empty cell for stratum {u}")
        out[u] = PceEstimate(u, "weighting", float(wt[0]), regime=weights.regime, sensitivity=weights.sens)
    return out


def pce_adjusted(data: ExperimentData, weights: WeightSet, *, zero_beta=False,
                 return_fit=False):
    """Covariate-adjusted estimates; ``zero_beta`` forces all coefficients to 0."""
    y = data.require_outcome()
    f = np.ones((1, data.n))
    out = {}
    fit = AdjustmentFit({}, {}, {})
    for u in weights.strata:
        m1 = side_mask(weights.regime, data, 1, u)
        m0 = side_mask(weights.regime, data, 0, u)
        _, adj, (b1, b0, ridged), ok = _contrasts(
            y, data.x, f, m1, weights.treated[u][None], m0, weights.control[u][None], zero_beta,
            weights.treated_base[u][None], weights.control_base[u][None])
        if not ok[0]:
            raise DataError(f"empty cell for stratum {u}")
        if ridged[0]:
            log.warning("singular weighted regression for stratum %s; ridge fallback used", u)
        fit.beta1[u], fit.beta0[u], fit.ridged[u] = b1[0], b0[0], bool(ridged[0])
        out[u] = PceEstimate(u, "adjusted", float(adj[0]), regime=weights.regime, sensitivity=weights.sens)
    return (out, fit) if return_fit else out


@dataclass(frozen=True)
class PipelineConfig:
    """Everything that turns data into estimates."""

    regime: Regime = field(default_factory=Regime.mono)
    sens: SensitivityParams = field(default_factory=SensitivityParams)
    normalize: bool = False
    zero_beta: bool = False
    em: EMConfig = field(default_factory=EMConfig)
    boot_em: EMConfig = BOOT_EM

    def to_dict(self) -> dict:
        return {
            "regime": self.regime.tag,
            "xi": self.regime.xi,
            "sensitivity": self.sens.to_dict(self.regime),
            "normalize_weights": self.normalize,
            "zero_beta": self.zero_beta,
        }


@dataclass
class BatchEstimates:
    """``values[b, j, k]``: replicate b, stratum ``strata[j]``, variant ``VARIANTS[k]``."""

    strata: tuple
    values: np.ndarray
    failed: np.ndarray
    scores: pscore.ScoreBatch


def estimate_from_scores(data, cfg: PipelineConfig, scores, props, freq) -> tuple[np.ndarray, np.ndarray]:
    """Estimates ``(B, strata, 2)`` and a per-replicate validity flag from fitted scores."""
    y = data.require_outcome()
    strata = target_strata(cfg.regime)
    ws = _weights_batch(data, cfg.regime, cfg.sens, scores, props, freq, cfg.normalize)
    vals = np.empty((freq.shape[0], len(strata), 2))
    ok = np.ones(freq.shape[0], bool)
    for j, u in enumerate(strata):
        (m1, w1, b1), (m0, w0, b0) = ws[u]
        wt, adj, _, good = _contrasts(y, data.x, freq, m1, w1, m0, w0, cfg.zero_beta, b1, b0)
        vals[:, j, 0] = wt
        vals[:, j, 1] = adj
        ok &= good
    ok &= np.isfinite(vals).all(axis=(1, 2))
    return vals, ok


def pipeline_batch(data: ExperimentData, cfg: PipelineConfig, freq, init=None, em=None) -> BatchEstimates:
    """Fit scores and estimate every target stratum for each frequency row."""
    freq = np.atleast_2d(np.asarray(freq, float))
    cfg.sens.check_regime(cfg.regime)
    em = em or cfg.em
    if cfg.regime.tag == "strong-mono":
        sb = pscore.fit_strong_batch(data, freq)
    else:
        xi = 0.0 if cfg.regime.tag == "mono" else cfg.regime.xi
        sb = pscore.fit_em_batch(data, freq, xi, em, init=init)
    vals, ok = estimate_from_scores(data, cfg, sb.scores, sb.proportions, freq)
    failed = ~ok | ~sb.converged
    return BatchEstimates(target_strata(cfg.regime), vals, failed, sb)


def replicate_frequencies(n: int, seed, start: int, stop: int) -> np.ndarray:
    """Resampling counts for replicates ``start..stop-1``.

    Replicate ``b`` draws from its own stream seeded by ``(seed, b)``, so a
    replicate does not depend on how the work is split up.
    """
    out = np.empty((stop - start, n))
    for k, b in enumerate(range(start, stop)):
        rng = np.random.default_rng([int(seed), b])
        out[k] = np.bincount(rng.integers(0, n, n), minlength=n)
    return out


@dataclass
class ReplicateFits:
    """Score fits for bootstrap replicates, reusable across estimators."""

    freq: np.ndarray
    scores: np.ndarray
    proportions: np.ndarray
    converged: np.ndarray

    @property
    def B(self) -> int:
        return self.freq.shape[0]


def _fit_chunk(args):
    data, regime, em, seed, start, stop, init = args
    freq = replicate_frequencies(data.n, seed, start, stop)
    if regime.tag == "strong-mono":
        sb = pscore.fit_strong_batch(data, freq)
    else:
        xi = 0.0 if regime.tag == "mono" else regime.xi
        sb = pscore.fit_em_batch(data, freq, xi, em, init=init)
    return freq, sb.scores, sb.proportions, sb.converged


def map_chunks(fn, tasks, jobs):
    """Apply ``fn`` to each task, in a process pool when ``jobs > 1``; order kept."""
    if jobs is None or jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def bootstrap_fits(data: ExperimentData, regime: Regime, B: int, seed, init=None,
                   em: EMConfig = BOOT_EM, jobs=1) -> ReplicateFits:
    """Resample units and refit the score model for each replicate.

    Outcomes are never touched, so this also serves outcome-free diagnostics.
    Work is split into fixed chunks, so results do not depend on ``jobs``.
    """
    tasks = [(data, regime, em, seed, s, min(s + CHUNK, B), init) for s in range(0, B, CHUNK)]
    parts = map_chunks(_fit_chunk, tasks, jobs)
    return ReplicateFits(*(np.concatenate([p[i] for p in parts]) for i in range(4)))


def replicate_values(data, cfg: PipelineConfig, fits: ReplicateFits):
    """Replicate estimates ``(B, strata, 2)`` and failure flags from stored fits."""
    vals, ok = estimate_from_scores(data, cfg, fits.scores, fits.proportions, fits.freq)
    return vals, ~ok | ~fits.converged


@dataclass
class EstimateReport:
    """Full-sample points with bootstrap se and percentile intervals."""

    estimates: list
    config: PipelineConfig
    level: float
    seed: int | None
    model: ScoreModel | None = None
    replicates: np.ndarray | None = None

    def get(self, stratum, variant="adjusted") -> PceEstimate:
        for e in self.estimates:
            if e.stratum == Stratum(stratum) and e.variant == variant:
                return e
        raise KeyError((stratum, variant))

    def to_dict(self, variants=VARIANTS) -> dict:
        return {
            "config": {**self.config.to_dict(), "level": self.level, "seed": self.seed},
            "estimates": [e.to_dict() for e in self.estimates if e.variant in variants],
        }

    def to_json(self, variants=VARIANTS, **kw) -> str:
        return json.dumps(self.to_dict(variants), **kw)


def summarize_replicates(values, level):
    """Standard deviation and percentile interval over finite replicate values."""
    lo, hi = (1 - level) / 2, 1 - (1 - level) / 2
    se = values.std(axis=0, ddof=1)
    q = np.quantile(values, [lo, hi], axis=0)
    return se, q[0], q[1]


def full_sample(data: ExperimentData, cfg: PipelineConfig) -> BatchEstimates:
    data.require_outcome()
    _require_cells(data, cfg.regime)
    if cfg.regime.tag == "no-mono":
        pscore.check_xi(data, cfg.regime.xi)
    be = pipeline_batch(data, cfg, np.ones((1, data.n)))
    if not be.scores.converged[0]:
        log.warning("score model fit did not converge on the full sample")
    if not np.isfinite(be.values).all():
        raise NumericalError("non-finite estimate on the full sample")
    return be


def full_from_model(data: ExperimentData, cfg: PipelineConfig, model: ScoreModel) -> BatchEstimates:
    """Full-sample estimates from an already fitted score model."""
    if model.regime != cfg.regime:
        raise ValueError(f"score model regime {model.regime} differs from the requested {cfg.regime}")
    if data.x.shape[1] != model.n_features:
        raise DataError("covariates do not match the score model")
    data.require_outcome()
    _require_cells(data, cfg.regime)
    coef = model.coef_stack()
    scores = pscore.scores_from_coef(model.regime, coef, data.x)
    props = model.proportion_vector()[None]
    one = np.array([model.converged])
    sb = pscore.ScoreBatch(model.regime, coef, scores, props, one, np.array([model.fit.iterations]),
                           np.array([model.separation]))
    vals, ok = estimate_from_scores(data, cfg, scores, props, np.ones((1, data.n)))
    if not ok[0]:
        raise NumericalError("non-finite estimate on the full sample")
    return BatchEstimates(target_strata(cfg.regime), vals, ~ok, sb)


def bootstrap(data: ExperimentData, cfg: PipelineConfig, B: int = 300, level: float = 0.95,
              seed: int = 0, *, jobs: int = 1, keep_replicates=False, fits: ReplicateFits | None = None,
              full: BatchEstimates | None = None) -> EstimateReport:
    """Percentile bootstrap around the full pipeline (scores, weights, estimates).

    Replicates whose score fit fails to converge or that lose a required
    cell are dropped and counted; more than 10% failures is an error.
    ``fits``/``full`` let callers reuse score fits across sensitivity values.
    """
    if B < 50:
        raise ValueError("at least 50 bootstrap replicates are required")
    if not 0 < level < 1:
        raise ValueError("level must lie strictly between 0 and 1")
    be = full if full is not None else full_sample(data, cfg)
    if full is not None:
        vals, ok = estimate_from_scores(data, cfg, be.scores.scores, be.scores.proportions,
                                        np.ones((1, data.n)))
        be = BatchEstimates(be.strata, vals, ~ok, be.scores)
    if fits is None:
        init = be.scores.coef[0] if cfg.regime.tag != "strong-mono" else None
        fits = bootstrap_fits(data, cfg.regime, B, seed, init, cfg.boot_em, jobs)
    vals, failed = replicate_values(data, cfg, fits)
    n_failed = int(failed.sum())
    if n_failed > MAX_FAILED_FRACTION * B:
        raise NumericalError(f"{n_failed} of {B} bootstrap replicates failed (limit 10%)")
    good = vals[~failed]
    se, lo, hi = summarize_replicates(good, level)
    model = pscore.model_from_batch(be.scores, 0, data.covariate_names)
    ests = []
    for j, u in enumerate(be.strata):
        for k, var in enumerate(VARIANTS):
            ests.append(PceEstimate(u, var, float(be.values[0, j, k]), float(se[j, k]),
                                    (float(lo[j, k]), float(hi[j, k])), B, n_failed, cfg.regime, cfg.sens))
    return EstimateReport(ests, cfg, level, seed, model, good if keep_replicates else None)


def point_estimates(data: ExperimentData, cfg: PipelineConfig) -> EstimateReport:
    """Full-sample points without inference."""
    be = full_sample(data, cfg)
    ests = [PceEstimate(u, var, float(be.values[0, j, k]), regime=cfg.regime, sensitivity=cfg.sens)
            for j, u in enumerate(be.strata) for k, var in enumerate(VARIANTS)]
    model = pscore.model_from_batch(be.scores, 0, data.covariate_names)
    return EstimateReport(ests, cfg, float("nan"), None, model)


def with_sensitivity(cfg: PipelineConfig, **kw) -> PipelineConfig:
    return replace(cfg, sens=replace(cfg.sens, **kw))
