"""Weighted GLM and least-squares fitting primitives.

Every fitter has a batched form working on a stack of weight vectors with
shape ``(B, n)`` over a shared design matrix. Bootstrap replicates are
frequency weights, so a whole bootstrap runs as one batched fit. The
single-problem functions are thin wrappers returning :class:`GlmFit`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DELTA = 1e-12
MAX_ITER = 200
LOGLIK_RTOL = 1e-10
GRAD_TOL = 1e-8
RIDGE = 1e-8
_MAX_HALVINGS = 40


@dataclass(frozen=True)
class GlmFit:
    """Result of a weighted logistic or multinomial fit.

    ``coefficients`` is ``(p,)`` for a logistic fit and ``(K, p)`` for a
    multinomial fit, where row ``reference`` is identically zero.
    ``final_gradient_norm`` is the gradient norm of the weighted
    log-likelihood divided by the total weight.
    """

    coefficients: np.ndarray
    converged: bool
    iterations: int
    final_gradient_norm: float
    separation: bool = False
    kind: str = "logistic"
    reference: int = 0
    loglik: float = float("nan")

    @property
    def n_classes(self) -> int:
        return 2 if self.kind == "logistic" else self.coefficients.shape[0]


@dataclass
class BatchFit:
    """Batched fit output; ``coef`` has shape ``(B, K-1, p)``."""

    coef: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    grad_norm: np.ndarray
    loglik: np.ndarray
    separation: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    prob: np.ndarray | None = None


def _column_scale(x):
    scale = np.abs(x).max(axis=0)
    scale[scale == 0] = 1.0
    const = np.all(x == x[:1], axis=0)
    return scale, const


def _log_softmax_full(eta):
    """Log-probabilities for linear predictors of non-reference classes.

    ``eta`` has shape ``(..., K-1)``; the reference class (index 0 in the
    returned array) has linear predictor 0.
    """
    m = np.maximum(eta.max(axis=-1, keepdims=True), 0.0)
    lse = m + np.log(np.exp(-m) + np.exp(eta - m).sum(axis=-1, keepdims=True))
    out = np.empty(eta.shape[:-1] + (eta.shape[-1] + 1,))
    out[..., :1] = -lse
    out[..., 1:] = eta - lse
    return out


def linpred(x, beta):
    """Linear predictors ``(B, n, K-1)`` for design ``(n, p)`` and beta ``(B, K-1, p)``."""
    return np.matmul(x, beta.transpose(0, 2, 1))


def softmax_probs(eta):
    """Class probabilities, reference first, clamped to ``[DELTA, 1-DELTA]``."""
    p = np.exp(_log_softmax_full(eta))
    return clamp(p)


def clamp(p):
    return np.clip(p, DELTA, 1.0 - DELTA)


def _multinomial_newton(xs, resp, beta0, penalty, max_iter, tol):
    """Newton ascent with step halving on the soft-label multinomial likelihood.

    ``xs``: ``(n, p)`` scaled design. ``resp``: ``(B, n, K)`` nonnegative
    class weights, reference class in column 0. ``beta0``: ``(B, K-1, p)``.
    ``penalty``: ``(p,)`` ridge multipliers on the normalized objective.
    Returns coefficients, flags, and the class probabilities at the result.
    """
    B, n, K = resp.shape
    p = xs.shape[1]
    q = (K - 1) * p
    total = resp.sum(axis=(1, 2))
    total = np.where(total > 0, total, 1.0)
    rowtot = resp.sum(axis=2)
    xx = np.einsum("ni,nj->nij", xs, xs).reshape(n, p * p)
    pen_diag = np.diag(np.tile(penalty, K - 1)) + 1e-12 * np.eye(q)

    def evaluate(beta, idx):
        logp = _log_softmax_full(linpred(xs, beta))
        ll = (resp[idx] * logp).sum(axis=(1, 2)) / total[idx]
        return ll - 0.5 * (beta**2 * penalty).sum(axis=(1, 2)), logp

    beta = beta0.copy()
    obj, logp = evaluate(beta, np.arange(B))
    prob = np.exp(logp)
    converged = np.zeros(B, bool)
    iterations = np.zeros(B, int)
    gnorm = np.full(B, np.inf)
    last_change = np.full(B, np.inf)
    active = np.arange(B)
    for it in range(max_iter + 1):
        b = beta[active]
        pr = prob[active][..., 1:]
        r = resp[active][..., 1:]
        rt = rowtot[active][..., None]
        grad = np.matmul((r - rt * pr).transpose(0, 2, 1), xs) / total[active][:, None, None]
        grad -= b * penalty
        g = grad.reshape(active.size, q)
        gn = np.linalg.norm(g, axis=1)
        gnorm[active] = gn
        ok = (gn < tol) & ((last_change[active] < LOGLIK_RTOL) | (gn < 1e-14))
        converged[active[ok]] = True
        keep = ~ok
        if it == max_iter or not keep.any():
            break
        act, pr, g = active[keep], pr[keep], g[keep]
        wgt = rowtot[act] / total[act][:, None]
        # Hessian blocks: sum_i w_i p_k (delta_kl - p_l) x_i x_i^T
        H = np.empty((act.size, K - 1, K - 1, p, p))
        for k in range(K - 1):
            for l in range(k, K - 1):
                v = wgt * pr[..., k] * ((k == l) - pr[..., l])
                blk = (v @ xx).reshape(act.size, p, p)
                H[:, k, l] = blk
                H[:, l, k] = blk
        H = H.transpose(0, 1, 3, 2, 4).reshape(act.size, q, q) + pen_diag
        step = np.linalg.solve(H, g[..., None])[..., 0].reshape(act.size, K - 1, p)
        old = obj[act]
        t = np.ones(act.size)
        cand = beta[act] + step
        cobj, clogp = evaluate(cand, act)
        bad = ~(cobj >= old)
        for _ in range(_MAX_HALVINGS):
            if not bad.any():
                break
            bi = np.nonzero(bad)[0]
            t[bi] *= 0.5
            cand[bi] = beta[act[bi]] + t[bi, None, None] * step[bi]
            cobj[bi], clogp[bi] = evaluate(cand[bi], act[bi])
            bad[bi] = ~(cobj[bi] >= old[bi])
        good = ~bad
        # no ascent step found: the point is optimal to machine precision
        ga = act[good]
        beta[ga] = cand[good]
        obj[ga] = cobj[good]
        prob[ga] = np.exp(clogp[good])
        iterations[act] += 1
        last_change[ga] = np.abs(cobj[good] - old[good]) / np.maximum(np.abs(old[good]), 1e-300)
        if bad.any():
            converged[act[bad]] = gnorm[act[bad]] < tol
        active = ga
        if active.size == 0:
            break
    ll = (obj + 0.5 * (beta**2 * penalty).sum(axis=(1, 2))) * total
    return beta, converged, iterations, gnorm, ll, prob


def _separated(prob, resp, beta):
    """Flag fits predicting some weighted row with (numerical) certainty."""
    used = resp.sum(axis=2) > 0
    certain = (prob.max(axis=2) > 1.0 - 1e-8) & used
    return certain.any(axis=1) | ~np.isfinite(beta).all(axis=(1, 2))


def multinomial_batch(x, resp, beta0=None, *, max_iter=MAX_ITER, tol=GRAD_TOL,
                      ridge=RIDGE) -> BatchFit:
    """Fit a stack of soft-label multinomial logits sharing one design.

    Parameters
    ----------
    x : (n, p) array
        Design matrix in user units.
    resp : (B, n, K) array
        Nonnegative weight of each row on each class; column 0 is the
        reference class.
    beta0 : (B, K-1, p) array, optional
        Warm start in user units; zeros by default.

    Returns
    -------
    BatchFit with coefficients in user units.
    """
    x = np.asarray(x, float)
    resp = np.asarray(resp, float)
    if resp.ndim == 2:
        resp = resp[None]
    B, n, K = resp.shape
    if x.shape[0] != n:
        raise ValueError(f"design has {x.shape[0]} rows but weights have {n}")
    if not np.isfinite(resp).all() or (resp < 0).any():
        raise ValueError("weights must be finite and nonnegative")
    if (resp.sum(axis=(1, 2)) <= 0).any():
        raise ValueError("total weight must be positive")
    scale, const = _column_scale(x)
    xs = x / scale
    if beta0 is None:
        b0 = np.zeros((B, K - 1, x.shape[1]))
    else:
        b0 = np.broadcast_to(np.asarray(beta0, float) * scale, (B, K - 1, x.shape[1])).copy()
    no_pen = np.zeros(x.shape[1])
    beta, conv, its, gn, ll, prob = _multinomial_newton(xs, resp, b0, no_pen, max_iter, tol)
    sep = _separated(prob, resp, beta) | ~conv
    if sep.any():
        pen = np.where(const, 0.0, ridge)
        idx = np.nonzero(sep)[0]
        rb, rc, ri, rg, rl, rp = _multinomial_newton(xs, resp[idx], beta[idx], pen, max_iter, tol)
        beta[idx], conv[idx], gn[idx], ll[idx], prob[idx] = rb, rc, rg, rl, rp
        its[idx] += ri
    return BatchFit(beta / scale, conv, its, gn, ll, sep, prob)


def logistic_batch(x, labels, weights, beta0=None, **kw) -> BatchFit:
    """Batched weighted logistic regression; ``weights`` is ``(B, n)``."""
    labels = np.asarray(labels, float)
    w = np.atleast_2d(np.asarray(weights, float))
    resp = np.stack([w * (1.0 - labels), w * labels], axis=-1)
    if beta0 is not None:
        beta0 = np.asarray(beta0, float).reshape(-1, 1, np.shape(x)[1])
    return multinomial_batch(x, resp, beta0, **kw)


def _check_labels_binary(labels):
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return labels


def fit_weighted_logistic(x, labels, weights=None, **kw) -> GlmFit:
    """Weighted logistic regression of ``labels`` on ``x`` by Newton/IRLS.

    A fit that does not converge is still returned with ``converged=False``.
    Perfect or quasi-complete separation is flagged and handled by a tiny
    ridge on the non-constant columns.
    """
    x = np.asarray(x, float)
    labels = _check_labels_binary(labels)
    if weights is None:
        weights = np.ones(x.shape[0])
    weights = np.asarray(weights, float)
    if weights.shape != (x.shape[0],) or labels.shape != (x.shape[0],):
        raise ValueError("x, labels and weights must have aligned rows")
    f = logistic_batch(x, labels, weights[None], **kw)
    return GlmFit(
        coefficients=f.coef[0, 0],
        converged=bool(f.converged[0]),
        iterations=int(f.iterations[0]),
        final_gradient_norm=float(f.grad_norm[0]),
        separation=bool(f.separation[0]),
        kind="logistic",
        loglik=float(f.loglik[0]),
    )


def fit_weighted_multinomial(x, class_labels, weights=None, n_classes=None,
                             reference=0, **kw) -> GlmFit:
    """Weighted multinomial logit with ``reference`` as the baseline class.

    Rows are (expanded) observations with integer class labels in
    ``range(n_classes)``; fractional weights are allowed, which is how the
    EM M-step uses it.
    """
    x = np.asarray(x, float)
    class_labels = np.asarray(class_labels, int)
    if weights is None:
        weights = np.ones(x.shape[0])
    weights = np.asarray(weights, float)
    K = int(n_classes if n_classes is not None else class_labels.max() + 1)
    if K < 2:
        raise ValueError("need at least two classes")
    if not 0 <= reference < K:
        raise ValueError("reference class out of range")
    if class_labels.min() < 0 or class_labels.max() >= K:
        raise ValueError("class label out of range")
    if weights.shape != (x.shape[0],) or class_labels.shape != (x.shape[0],):
        raise ValueError("x, labels and weights must have aligned rows")
    # reorder so the reference class is column 0
    order = [reference] + [k for k in range(K) if k != reference]
    pos = np.empty(K, int)
    pos[order] = np.arange(K)
    resp = np.zeros((1, x.shape[0], K))
    resp[0, np.arange(x.shape[0]), pos[class_labels]] = weights
    f = multinomial_batch(x, resp, **kw)
    coef = np.zeros((K, x.shape[1]))
    coef[order[1:]] = f.coef[0]
    return GlmFit(
        coefficients=coef,
        converged=bool(f.converged[0]),
        iterations=int(f.iterations[0]),
        final_gradient_norm=float(f.grad_norm[0]),
        separation=bool(f.separation[0]),
        kind="multinomial",
        reference=reference,
        loglik=float(f.loglik[0]),
    )


def predict_probabilities(fit: GlmFit, x_row) -> np.ndarray:
    """Class probabilities at one covariate row (or a matrix of rows).

    Logistic fits return ``Pr(label = 1)``; multinomial fits return a vector
    over classes that sums to one.
    """
    x_row = np.asarray(x_row, float)
    p = fit.coefficients.shape[-1]
    if x_row.shape[-1] != p:
        raise ValueError(f"expected {p} covariates, got {x_row.shape[-1]}")
    if fit.kind == "logistic":
        eta = x_row @ fit.coefficients
        return clamp(0.5 * (1.0 + np.tanh(0.5 * eta)))
    eta = x_row @ fit.coefficients.T
    eta = eta - eta[..., fit.reference : fit.reference + 1]
    m = eta.max(axis=-1, keepdims=True)
    e = np.exp(eta - m)
    prob = clamp(e / e.sum(axis=-1, keepdims=True))
    return prob / prob.sum(axis=-1, keepdims=True)


def wls_batch(x, y, weights, *, ridge=RIDGE):
    """Batched weighted least squares; returns ``(coef (B, p), ridged (B,))``.

    A system whose weighted Gram matrix is numerically singular is solved
    with a small ridge on the non-constant columns and flagged.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    w = np.atleast_2d(np.asarray(weights, float))
    n, p = x.shape
    scale, const = _column_scale(x)
    xs = x / scale
    xx = np.einsum("ni,nj->nij", xs, xs).reshape(n, p * p)
    G = (w @ xx).reshape(-1, p, p)
    rhs = (w * y) @ xs
    tot = w.sum(axis=1)
    tot = np.where(tot > 0, tot, 1.0)
    G = G / tot[:, None, None]
    rhs = rhs / tot[:, None]
    ev = np.linalg.eigvalsh(G)
    singular = ev[:, 0] <= 1e-10 * np.maximum(ev[:, -1], 1e-300)
    if singular.any():
        G[singular] += np.diag(np.where(const, 0.0, ridge))
        # an all-zero constant column still needs something on the diagonal
        G[singular] += 1e-300 * np.eye(p)
    coef = np.linalg.solve(G, rhs[..., None])[..., 0]
    return coef / scale, singular


def weighted_least_squares(x, y, weights=None, *, fallback=True, return_info=False):
    """Solve the weighted normal equations ``X'WX b = X'Wy``.

    With ``fallback=False`` a singular system raises ``LinAlgError``.
    """
    x = np.asarray(x, float)
    if weights is None:
        weights = np.ones(x.shape[0])
    weights = np.asarray(weights, float)
    if (weights < 0).any() or not np.isfinite(weights).all():
        raise ValueError("weights must be finite and nonnegative")
    coef, ridged = wls_batch(x, y, weights[None])
    if ridged[0] and not fallback:
        raise np.linalg.LinAlgError("weighted Gram matrix is singular")
    if return_info:
        return coef[0], bool(ridged[0])
    return coef[0]
