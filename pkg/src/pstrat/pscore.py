"""Principal-score models: Pr(U = u | X) and stratum proportions.

Three regimes are supported:

* strong monotonicity, S(0) = 0: a logistic fit of S on X in the treated arm;
* monotonicity, S(1) >= S(0): a three-class multinomial logit over
  {ssbar (reference), ss, sbarsbar} fitted by EM with U as missing data;
* no monotonicity with a fixed ratio ``xi = Pr(sbars | X) / Pr(ssbar | X)``:
  the same EM, where the reference class is the union of ssbar and sbars
  split in proportions 1/(1+xi) and xi/(1+xi).

Monotonicity is the ``xi = 0`` case of the third model, and both go
through the same engine.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .dataset import CellSummary, DataError, ExperimentData, summarize
from .numkit import DELTA, GlmFit

log = logging.getLogger(__name__)


class Stratum(str, enum.Enum):
    """Principal stratum labelled by (S(1), S(0))."""

    SS = "ss"
    SSBAR = "ssbar"
    SBARS = "sbars"
    SBARSBAR = "sbarsbar"

    @property
    def s1(self) -> int:
        return 1 if self in (Stratum.SS, Stratum.SSBAR) else 0

    @property
    def s0(self) -> int:
        return 1 if self in (Stratum.SS, Stratum.SBARS) else 0

    def __str__(self):
        return self.value


# column order of every (..., 4) score array
STRATA = (Stratum.SS, Stratum.SSBAR, Stratum.SBARS, Stratum.SBARSBAR)
IDX = {u: j for j, u in enumerate(STRATA)}


class NumericalError(RuntimeError):
    """A fit or estimate could not be computed."""


@dataclass(frozen=True)
class Regime:
    tag: str
    xi: float | None = None

    def __post_init__(self):
        if self.tag not in ("strong-mono", "mono", "no-mono"):
            raise ValueError(f"unknown regime {self.tag!r}")
        if (self.tag == "no-mono") != (self.xi is not None):
            raise ValueError("xi is given exactly when the regime is no-mono")
        if self.xi is not None and not (np.isfinite(self.xi) and self.xi >= 0):
            raise ValueError("xi must be finite and nonnegative")

    @classmethod
    def strong(cls):
        return cls("strong-mono")

    @classmethod
    def mono(cls):
        return cls("mono")

    @classmethod
    def no_mono(cls, xi: float):
        return cls("no-mono", float(xi))

    @property
    def strata(self) -> tuple[Stratum, ...]:
        if self.tag == "strong-mono":
            return (Stratum.SSBAR, Stratum.SBARSBAR)
        if self.tag == "mono":
            return (Stratum.SS, Stratum.SSBAR, Stratum.SBARSBAR)
        return STRATA

    def cell_strata(self, z: int, s: int | None) -> tuple[Stratum, ...]:
        """Strata that can appear in observed cell (z, s).

        Under strong monotonicity the control side is the whole control arm,
        requested with ``s=None``.
        """
        if self.tag == "strong-mono" and z == 0:
            return (Stratum.SSBAR, Stratum.SBARSBAR)
        return tuple(u for u in self.strata if (u.s1 if z == 1 else u.s0) == s)

    def __str__(self):
        return self.tag if self.xi is None else f"{self.tag}(xi={self.xi:g})"


@dataclass(frozen=True)
class EMConfig:
    max_iter: int = 500
    rtol: float = 1e-8
    polish: bool = True
    handover_rtol: float = 1e-6
    polish_max_iter: int = 100
    polish_tol: float = 1e-13
    polish_stop_rtol: float = 1e-14


# EM latent classes: 0 = ssbar (or ssbar+sbars), 1 = ss, 2 = sbarsbar
def _cell_design(z, s, xi):
    """Per-unit coefficients a_ik: observed-cell likelihood is sum_k a_ik e_k."""
    split0 = 1.0 / (1.0 + xi)
    split1 = xi / (1.0 + xi)
    a = np.zeros((z.shape[0], 3))
    c11 = (z == 1) & (s == 1)
    c10 = (z == 1) & (s == 0)
    c01 = (z == 0) & (s == 1)
    c00 = (z == 0) & (s == 0)
    a[c11] = (split0, 1.0, 0.0)
    a[c10] = (split1, 0.0, 1.0)
    a[c01] = (split1, 1.0, 0.0)
    a[c00] = (split0, 0.0, 1.0)
    return a


def _class_probs(x, coef):
    """Unclamped class probabilities ``(B, n, 3)`` from coef ``(B, 2, p)``."""
    return np.exp(numkit._log_softmax_full(numkit.linpred(x, coef)))


def _strata_from_classes(ev, regime: Regime):
    """Map EM class probabilities (or a logistic p) to the (..., 4) stratum array."""
    out = np.zeros(ev.shape[:-1] + (4,))
    if regime.tag == "strong-mono":
        p = ev[..., 1]
        out[..., IDX[Stratum.SSBAR]] = p
        out[..., IDX[Stratum.SBARSBAR]] = 1.0 - p
    else:
        xi = regime.xi or 0.0
        out[..., IDX[Stratum.SS]] = ev[..., 1]
        out[..., IDX[Stratum.SBARSBAR]] = ev[..., 2]
        out[..., IDX[Stratum.SSBAR]] = ev[..., 0] / (1.0 + xi)
        if xi > 0:
            out[..., IDX[Stratum.SBARS]] = ev[..., 0] * xi / (1.0 + xi)
    cols = [IDX[u] for u in regime.strata]
    sub = numkit.clamp(out[..., cols])
    out[..., cols] = sub / sub.sum(axis=-1, keepdims=True)
    return out


def scores_from_coef(regime: Regime, coef, x):
    """Stratum scores ``(B, n, 4)`` for coefficients ``(B, K-1, p)``."""
    coef = np.asarray(coef, float)
    if regime.tag == "strong-mono":
        ev = np.exp(numkit._log_softmax_full(numkit.linpred(x, coef)))
    else:
        ev = _class_probs(x, coef)
    return _strata_from_classes(ev, regime)


def _loglik_from_probs(ev, a, freq):
    mix = (ev * a).sum(axis=2)
    return (freq * np.log(np.maximum(mix, DELTA))).sum(axis=1)


def observed_loglik(x, a, freq, coef):
    """Observed-data log-likelihood sum_i f_i log(sum_k a_ik e_k(X_i)), per replicate."""
    return _loglik_from_probs(_class_probs(x, coef), a, freq)


@dataclass
class ScoreBatch:
    """Score fits for a stack of frequency-weight vectors."""

    regime: Regime
    coef: np.ndarray
    scores: np.ndarray
    proportions: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    separation: np.ndarray
    traces: list = field(default_factory=list)


def _weighted_props(scores, freq):
    return np.matmul(freq[:, None, :], scores)[:, 0] / freq.sum(axis=1)[:, None]


def fit_strong_batch(data: ExperimentData, freq) -> ScoreBatch:
    regime = Regime.strong()
    w = freq * (data.z == 1)
    if (w.sum(axis=1) <= 0).any():
        raise DataError("treated arm is empty")
    fit = numkit.logistic_batch(data.x, data.s, w)
    scores = scores_from_coef(regime, fit.coef, data.x)
    return ScoreBatch(
        regime, fit.coef, scores, _weighted_props(scores, freq), fit.converged,
        fit.iterations, fit.separation, [np.array([l]) for l in fit.loglik],
    )


def _polish(x, a, freq, coef, cfg: EMConfig):
    """Newton ascent on the observed-data likelihood, started at the EM fit.

    Gradient and Hessian follow from the mixture structure: with posterior
    r_ik and prior e_ik the gradient in eta_k is sum f_i (r_ik - e_ik) and
    the Hessian is sum f_i [(diag r - r r') - (diag e - e e')]. Steps are
    kept only if they increase the likelihood.
    """
    B, K1, p = coef.shape
    q = K1 * p
    n = x.shape[0]
    xx = np.einsum("ni,nj->nij", x, x).reshape(n, p * p)
    tot = freq.sum(axis=1)
    probs = _class_probs(x, coef)
    ll = _loglik_from_probs(probs, a, freq)
    converged = np.zeros(B, bool)
    last_change = np.full(B, np.inf)
    trace = [[] for _ in range(B)]
    active = np.arange(B)
    for _ in range(cfg.polish_max_iter + 1):
        if active.size == 0:
            break
        f = freq[active]
        ev = probs[active]
        num = ev * a
        r = num / np.maximum(num.sum(axis=2, keepdims=True), 1e-300)
        g = np.matmul((f[..., None] * (r - ev)[..., 1:]).transpose(0, 2, 1), x).reshape(active.size, q)
        gn = np.linalg.norm(g, axis=1) / tot[active]
        done = gn < cfg.polish_tol
        converged[active[done]] = True
        active, f, ev, r, g = (v[~done] for v in (active, f, ev, r, g))
        if active.size == 0:
            break
        H = np.empty((active.size, K1, K1, p, p))
        for k in range(K1):
            for l in range(k, K1):
                rk, rl = r[..., k + 1], r[..., l + 1]
                ek, el = ev[..., k + 1], ev[..., l + 1]
                v = f * ((k == l) * (rk - ek) - rk * rl + ek * el)
                blk = (v @ xx).reshape(active.size, p, p)
                H[:, k, l] = blk
                H[:, l, k] = blk
        negH = -H.transpose(0, 1, 3, 2, 4).reshape(active.size, q, q)
        negH = 0.5 * (negH + negH.transpose(0, 2, 1))
        lam_min = np.linalg.eigvalsh(negH)[:, 0]
        size = np.maximum(np.abs(negH).max(axis=(1, 2)), 1e-300)
        shift = np.where(lam_min < 1e-10 * size, 1e-10 * size - lam_min, 0.0)
        negH = negH + shift[:, None, None] * np.eye(q)
        step = np.linalg.solve(negH, g[..., None])[..., 0].reshape(active.size, K1, p)
        old = ll[active]
        t = np.ones(active.size)
        cand = coef[active] + step
        cev = _class_probs(x, cand)
        cll = _loglik_from_probs(cev, a, f)
        bad = ~(cll > old)
        for _ in range(40):
            if not bad.any():
                break
            bi = np.nonzero(bad)[0]
            t[bi] *= 0.5
            cand[bi] = coef[active[bi]] + t[bi, None, None] * step[bi]
            cev[bi] = _class_probs(x, cand[bi])
            cll[bi] = _loglik_from_probs(cev[bi], a, f[bi])
            bad[bi] = ~(cll[bi] > old[bi])
        good = ~bad
        gain = (cll - old) / np.maximum(np.abs(old), 1e-300)
        tiny = good & (gain <= cfg.polish_stop_rtol)
        ga = active[good]
        coef[ga] = cand[good]
        probs[ga] = cev[good]
        ll[ga] = cll[good]
        last_change[ga] = gain[good]
        for j in np.nonzero(good)[0]:
            trace[active[j]].append(cll[j])
        # no ascent left, or only round-off-sized gains: stationary
        converged[active[bad | tiny]] = True
        active = active[good & ~tiny]
    # a final step below the EM tolerance counts as converged, as it would for EM
    converged |= last_change < cfg.rtol
    return coef, converged, trace


def fit_em_batch(data: ExperimentData, freq, xi: float = 0.0,
                 cfg: EMConfig = EMConfig(), init=None) -> ScoreBatch:
    """EM for the (partitioned) three-class principal-score model.

    All multinomial coefficients start at zero. Each iteration computes the
    posterior class weights of every unit (E-step) and refits the weighted
    multinomial logit warm-started at the current coefficients (M-step).
    ``init`` (shape ``(2, p)``) replaces the zero start; bootstrap replicates
    use the full-sample fit.
    """
    regime = Regime.mono() if xi == 0 else Regime.no_mono(xi)
    x = data.x
    freq = np.atleast_2d(np.asarray(freq, float))
    B, n = freq.shape
    p = x.shape[1]
    a = _cell_design(data.z, data.s, xi)
    coef = np.zeros((B, 2, p))
    if init is not None:
        coef[:] = np.asarray(init, float)
    probs = _class_probs(x, coef)
    ll = _loglik_from_probs(probs, a, freq)
    traces = [[v] for v in ll]
    iterations = np.zeros(B, int)
    converged = np.zeros(B, bool)
    separation = np.zeros(B, bool)
    active = np.arange(B)
    for _ in range(cfg.max_iter):
        if active.size == 0:
            break
        c = coef[active]
        f = freq[active]
        num = probs[active] * a
        post = num / np.maximum(num.sum(axis=2, keepdims=True), 1e-300)
        fit = numkit.multinomial_batch(x, f[..., None] * post, c)
        new_ll = _loglik_from_probs(fit.prob, a, f)
        coef[active] = fit.coef
        probs[active] = fit.prob
        separation[active] |= fit.separation
        iterations[active] += 1
        for j, b in enumerate(active):
            traces[b].append(new_ll[j])
        change = np.abs(new_ll - ll[active]) / np.maximum(np.abs(ll[active]), 1e-300)
        ll[active] = new_ll
        converged[active[change < cfg.rtol]] = True
        done = change < (max(cfg.rtol, cfg.handover_rtol) if cfg.polish else cfg.rtol)
        active = active[~done]
    if cfg.polish:
        coef, pol_conv, pol_trace = _polish(x, a, freq, coef, cfg)
        converged |= pol_conv
        for b in range(B):
            traces[b].extend(pol_trace[b])
    scores = scores_from_coef(regime, coef, x)
    return ScoreBatch(
        regime, coef, scores, _weighted_props(scores, freq), converged, iterations,
        separation, [np.asarray(t) for t in traces],
    )


def fit_batch(data: ExperimentData, regime: Regime, freq, cfg: EMConfig = EMConfig()) -> ScoreBatch:
    freq = np.atleast_2d(np.asarray(freq, float))
    if regime.tag == "strong-mono":
        return fit_strong_batch(data, freq)
    xi = 0.0 if regime.tag == "mono" else regime.xi
    return fit_em_batch(data, freq, xi, cfg)


@dataclass(frozen=True)
class ScoreModel:
    """A fitted principal-score model.

    ``fit.coefficients`` holds one row per fitting class: for strong
    monotonicity a logistic vector for ssbar; otherwise rows for
    (ssbar or ssbar+sbars, ss, sbarsbar) with the first row zero.
    """

    regime: Regime
    fit: GlmFit
    proportions: dict
    covariate_names: tuple = ()
    loglik_trace: tuple = ()

    @property
    def xi(self):
        return self.regime.xi

    @property
    def converged(self) -> bool:
        return self.fit.converged

    @property
    def separation(self) -> bool:
        return self.fit.separation

    @property
    def n_features(self) -> int:
        return self.fit.coefficients.shape[-1]

    def coef_stack(self):
        """Coefficients in the ``(1, K-1, p)`` layout used by batched code."""
        c = self.fit.coefficients
        if self.fit.kind == "logistic":
            return c[None, None, :]
        return c[None, 1:, :]

    def score_matrix(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        if x.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} covariates (with intercept), got {x.shape[1]}")
        return scores_from_coef(self.regime, self.coef_stack(), x)[0]

    def proportion_vector(self) -> np.ndarray:
        return np.array([self.proportions.get(u, 0.0) for u in STRATA])

    def to_dict(self) -> dict:
        c = self.fit.coefficients
        if self.fit.kind == "logistic":
            coefs = {"ssbar": c.tolist()}
        else:
            names = ("ssbar+sbars" if self.regime.tag == "no-mono" else "ssbar", "ss", "sbarsbar")
            coefs = {nm: row.tolist() for nm, row in zip(names, c)}
        return {
            "regime": self.regime.tag,
            "xi": self.regime.xi,
            "covariates": ["(intercept)"] + list(self.covariate_names),
            "coefficients": coefs,
            "reference": "sbarsbar" if self.fit.kind == "logistic" else "ssbar",
            "proportions": {str(u): float(v) for u, v in self.proportions.items()},
            "converged": self.fit.converged,
            "iterations": self.fit.iterations,
            "final_gradient_norm": self.fit.final_gradient_norm,
            "separation": self.fit.separation,
            "loglik": self.fit.loglik,
            "loglik_trace": [float(v) for v in self.loglik_trace],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d) -> "ScoreModel":
        regime = Regime(d["regime"], d.get("xi"))
        coefs = d["coefficients"]
        if regime.tag == "strong-mono":
            c = np.asarray(coefs["ssbar"], float)
            kind = "logistic"
        else:
            c = np.asarray(list(coefs.values()), float)
            kind = "multinomial"
        fit = GlmFit(c, bool(d["converged"]), int(d["iterations"]), float(d["final_gradient_norm"]),
                     bool(d.get("separation", False)), kind, 0, float(d.get("loglik", np.nan)))
        props = {Stratum(k): float(v) for k, v in d["proportions"].items()}
        names = tuple(d.get("covariates", ["(intercept)"])[1:])
        return cls(regime, fit, props, names, tuple(d.get("loglik_trace", ())))

    @classmethod
    def from_json(cls, text) -> "ScoreModel":
        return cls.from_dict(json.loads(text))


def model_from_batch(batch: ScoreBatch, b: int = 0, names=()) -> ScoreModel:
    regime = batch.regime
    coef = batch.coef[b]
    if regime.tag == "strong-mono":
        c = coef[0].copy()
        kind = "logistic"
    else:
        c = np.vstack([np.zeros(coef.shape[1]), coef])
        kind = "multinomial"
    trace = batch.traces[b] if batch.traces else np.array([np.nan])
    fit = GlmFit(c, bool(batch.converged[b]), int(batch.iterations[b]), float("nan"),
                 bool(batch.separation[b]), kind, 0, float(trace[-1]))
    props = {u: float(batch.proportions[b, IDX[u]]) for u in regime.strata}
    return ScoreModel(regime, fit, props, tuple(names), tuple(float(v) for v in trace))


def _finish(data, batch, what):
    model = model_from_batch(batch, 0, data.covariate_names)
    if not model.converged:
        log.warning("%s did not converge after %d iterations", what, model.fit.iterations)
    if model.separation:
        log.warning("%s: separation detected; ridge fallback engaged", what)
    return model


def fit_strong_mono(data: ExperimentData, config: EMConfig | None = None) -> ScoreModel:
    """Logistic fit of S on X among treated units; e_ssbar is the fitted probability."""
    batch = fit_strong_batch(data, np.ones((1, data.n)))
    model = _finish(data, batch, "strong-monotonicity score fit")
    # report the gradient norm of the underlying logistic fit
    g = numkit.fit_weighted_logistic(data.x, data.s, (data.z == 1).astype(float))
    return ScoreModel(model.regime, g, model.proportions, model.covariate_names, model.loglik_trace)


def fit_mono_em(data: ExperimentData, config: EMConfig | None = None) -> ScoreModel:
    batch = fit_em_batch(data, np.ones((1, data.n)), 0.0, config or EMConfig())
    return _finish(data, batch, "monotonicity EM")


def check_xi(data: ExperimentData, xi: float) -> None:
    """Raise ``ValueError`` unless ``0 <= xi <= xi_upper_bound`` for ``data``."""
    bound = xi_upper_bound(summarize(data))
    if not np.isfinite(xi) or xi < 0 or xi > bound + 1e-12:
        raise ValueError(f"xi={xi:g} is outside the admissible range [0, {bound:.6g}]")


def fit_nomono_em(data: ExperimentData, xi: float, config: EMConfig | None = None) -> ScoreModel:
    check_xi(data, xi)
    batch = fit_em_batch(data, np.ones((1, data.n)), float(xi), config or EMConfig())
    model = _finish(data, batch, f"no-monotonicity EM (xi={xi:g})")
    if xi == 0:
        # same fit, but labelled as the no-monotonicity regime with xi = 0
        model = ScoreModel(Regime.no_mono(0.0), model.fit, {**model.proportions, Stratum.SBARS: 0.0},
                           model.covariate_names, model.loglik_trace)
    return model


def fit_scores(data: ExperimentData, regime: Regime, config: EMConfig | None = None) -> ScoreModel:
    if regime.tag == "strong-mono":
        return fit_strong_mono(data, config)
    if regime.tag == "mono":
        return fit_mono_em(data, config)
    return fit_nomono_em(data, regime.xi, config)


def scores_at(model: ScoreModel, x_row) -> dict:
    """Stratum probabilities at one covariate row (intercept included)."""
    e = model.score_matrix(np.asarray(x_row, float).reshape(1, -1))[0]
    return {u: float(e[IDX[u]]) for u in model.regime.strata}


def membership_at(model: ScoreModel, z: int, s: int, x_row) -> dict:
    """Pr(U = u | Z = z, S = s, X = x) over the strata present in cell (z, s)."""
    cell = model.regime.cell_strata(z, s)
    if model.regime.tag == "strong-mono" and z == 0 and s == 1:
        raise ValueError("cell (z=0, s=1) is empty under strong monotonicity")
    e = scores_at(model, x_row)
    tot = sum(e[u] for u in cell)
    return {u: e[u] / tot for u in cell}


def xi_upper_bound(summary: CellSummary) -> float:
    """Largest ratio Pr(sbars)/Pr(ssbar) compatible with the observed S margins."""
    p1, p0 = summary.p1_hat, summary.p0_hat
    if p1 < p0:
        raise ValueError(
            f"p1_hat={p1:.4g} < p0_hat={p0:.4g}: swap the treatment labels so that the "
            "average effect on S is nonnegative"
        )
    if p1 == p0:
        return 1.0
    return max(0.0, 1.0 - (p1 - p0) / min(p1, 1.0 - p0))


def nomono_proportions(p1: float, p0: float, xi: float) -> dict:
    """Stratum proportions implied by the S margins and a fixed ``xi < 1``."""
    d = (p1 - p0) / (1.0 - xi)
    return {
        Stratum.SSBAR: d,
        Stratum.SBARSBAR: 1.0 - p0 - d,
        Stratum.SS: p1 - d,
        Stratum.SBARS: xi * d,
    }
