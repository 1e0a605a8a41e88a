"""Confound-controlled statistics over graded, metric-scored traces.

Two engines answer the same question from different angles. The conditional
correlation subtracts question-level means from both a metric and the
correctness outcome (question fixed effects) and reports the Pearson
correlation of the pooled residuals, with a t-based p-value whose degrees of
freedom account for the absorbed means. The mixed model fits a logistic
regression of correctness on the metric with one Gaussian random intercept
per question, maximizing a Laplace approximation of the marginal likelihood:
inner Newton iterations find each question's posterior mode, an outer
quasi-Newton pass optimizes (intercept, slope, log sigma), and Wald p-values
come from the observed information at the optimum.

Undefined metric values are pairwise-deleted: each metric's test uses only
the rows where that metric exists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize
from scipy import stats as sps


class StatsError(ValueError):
    """Raised when an analysis precondition does not hold."""


@dataclass
class Observation:
    question_id: str
    trace_id: str
    model_id: str
    correct: int  # 0/1
    difficulty: Optional[str] = None
    metrics: dict = field(default_factory=dict)


@dataclass
class ObservationSet:
    rows: list[Observation]


def significance_stars(p: float) -> str:
    if p <= 0.001:
        return "***"
    if p <= 0.01:
        return "**"
    if p <= 0.05:
        return "*"
    return "ns"


@dataclass
class CorrelationResult:
    metric_name: str
    r: Optional[float]
    p: Optional[float]
    n_used: int
    q_used: int
    stars: Optional[str]
    computable: bool
    reason: Optional[str] = None
    stratum: Optional[str] = None


def _usable_arrays(obs: ObservationSet, metric: str):
    """Rows with the metric defined, keyed to integer question indices."""
    rows = [r for r in obs.rows if r.metrics.get(metric) is not None]
    if not rows:
        return np.empty(0, dtype=int), np.empty(0), np.empty(0), []
    q_ids = sorted({r.question_id for r in rows})
    q_pos = {qid: i for i, qid in enumerate(q_ids)}
    qidx = np.array([q_pos[r.question_id] for r in rows], dtype=int)
    x = np.array([float(r.metrics[metric]) for r in rows], dtype=float)
    y = np.array([float(r.correct) for r in rows], dtype=float)
    return qidx, x, y, q_ids


def _drop_degenerate(qidx: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Remove questions whose outcomes are all correct or all incorrect."""
    if qidx.size == 0:
        return qidx, x, y
    n_q = int(qidx.max()) + 1
    counts = np.bincount(qidx, minlength=n_q)
    correct = np.bincount(qidx, weights=y, minlength=n_q)
    keep_q = (correct > 0) & (correct < counts)
    keep = keep_q[qidx]
    qidx = qidx[keep]
    # Re-index to a dense range.
    _, qidx = np.unique(qidx, return_inverse=True)
    return qidx, x[keep], y[keep]


def residualize(qidx: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Subtract the per-question mean from each value."""
    n_q = int(qidx.max()) + 1 if qidx.size else 0
    counts = np.bincount(qidx, minlength=n_q)
    sums = np.bincount(qidx, weights=values, minlength=n_q)
    means = sums / counts
    return values - means[qidx]


def correlation_from_arrays(qidx: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Core residualized-Pearson computation on pre-filtered arrays.

    Returns (r, p, n, q) or (None, None, n, q) when not computable. The
    degrees of freedom are n - q - 1, charging one df per absorbed question
    mean.
    """
    qidx, x, y = _drop_degenerate(qidx, x, y)
    n = int(x.size)
    q = int(qidx.max()) + 1 if n else 0
    df = n - q - 1
    if n == 0 or df < 3:
        return None, None, n, q
    xr = residualize(qidx, x)
    yr = residualize(qidx, y)
    sx = float(xr @ xr)
    sy = float(yr @ yr)
    if sx == 0.0 or sy == 0.0:
        return None, None, n, q
    r = float(xr @ yr) / math.sqrt(sx * sy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * math.sqrt(df / (1.0 - r * r))
        p = 2.0 * float(sps.t.sf(abs(t), df))
    return r, p, n, q


def conditional_correlation(
    obs: ObservationSet, metric: str, *, spearman: bool = False
) -> CorrelationResult:
    """Question-fixed-effect correlation between a metric and correctness.

    Rows with an undefined metric are dropped, then questions whose
    outcomes carry no signal (all correct or all incorrect). With
    ``spearman=True`` the metric and outcome are globally rank-transformed
    first (sensitivity variant).
    """
    qidx, x, y, _ = _usable_arrays(obs, metric)
    qidx, x, y = _drop_degenerate(qidx, x, y)
    if spearman and x.size:
        x = sps.rankdata(x)
        y = sps.rankdata(y)
    n = int(x.size)
    q = int(qidx.max()) + 1 if n else 0
    df = n - q - 1

    def not_computable(reason):
        return CorrelationResult(
            metric_name=metric, r=None, p=None, n_used=n, q_used=q,
            stars=None, computable=False, reason=reason,
        )

    if n == 0:
        return not_computable("no usable rows")
    if df < 3:
        return not_computable("fewer than 3 residual degrees of freedom")
    xr = residualize(qidx, x)
    yr = residualize(qidx, y)
    sx = float(xr @ xr)
    sy = float(yr @ yr)
    if sx == 0.0 or sy == 0.0:
        return not_computable("zero residual variance")
    r = max(-1.0, min(1.0, float(xr @ yr) / math.sqrt(sx * sy)))
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * math.sqrt(df / (1.0 - r * r))
        p = 2.0 * float(sps.t.sf(abs(t), df))
    return CorrelationResult(
        metric_name=metric, r=r, p=p, n_used=n, q_used=q,
        stars=significance_stars(p), computable=True,
    )


@dataclass
class StratifiedCorrelation:
    results: list[CorrelationResult]
    skipped: list[tuple[str, int]]  # (stratum, usable rows)


def stratified_correlation(
    obs: ObservationSet, metric: str, *, min_rows: int = 100, spearman: bool = False
) -> StratifiedCorrelation:
    """Per-difficulty-stratum conditional correlations.

    Strata whose usable row count (defined metric, non-degenerate question)
    falls below ``min_rows`` are omitted from the results and listed.
    """
    strata = sorted({r.difficulty for r in obs.rows if r.difficulty is not None})
    results = []
    skipped = []
    for stratum in strata:
        sub = ObservationSet([r for r in obs.rows if r.difficulty == stratum])
        qidx, x, y, _ = _usable_arrays(sub, metric)
        qidx2, x2, _y2 = _drop_degenerate(qidx, x, y)
        if x2.size < min_rows:
            skipped.append((stratum, int(x2.size)))
            continue
        res = conditional_correlation(sub, metric, spearman=spearman)
        res.stratum = stratum
        results.append(res)
    return StratifiedCorrelation(results=results, skipped=skipped)


# ---------------------------------------------------------------------------
# Random-intercept logistic model (Laplace approximation)
# ---------------------------------------------------------------------------

SIGMA_FLOOR = 1e-4


@dataclass
class GlmmFit:
    metric_name: str
    beta0: float
    beta1: float
    se1: float
    p_wald: float
    sigma_u: float
    converged: bool
    n: int
    q: int


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.clip(eta, -40.0, 40.0)))


def _laplace_neg_loglik(theta, x, y, qidx, n_q, u_cache, max_newton=60, tol=1e-10):
    """Negative Laplace-approximated marginal log-likelihood.

    For each question the random intercept's posterior mode is found by
    damped Newton ascent (the per-question objective is strictly concave),
    then the Gaussian integral is replaced by its curvature correction.
    """
    beta0, beta1, log_sigma = theta
    sigma2 = math.exp(2.0 * log_sigma)
    eta0 = beta0 + beta1 * x
    u = u_cache.copy()
    for _ in range(max_newton):
        eta = eta0 + u[qidx]
        p = _sigmoid(eta)
        grad = np.bincount(qidx, weights=y - p, minlength=n_q) - u / sigma2
        w = np.bincount(qidx, weights=p * (1.0 - p), minlength=n_q)
        hess = w + 1.0 / sigma2
        step = grad / hess
        step = np.clip(step, -5.0, 5.0)
        u = u + step
        if np.max(np.abs(grad)) < tol:
            break
    u_cache[:] = u

    eta = eta0 + u[qidx]
    # Stable Bernoulli log-likelihood: y*eta - log(1 + exp(eta)).
    ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    p = _sigmoid(eta)
    w = np.bincount(qidx, weights=p * (1.0 - p), minlength=n_q)
    ll -= float(np.sum(u * u) / (2.0 * sigma2))
    ll -= 0.5 * n_q * math.log(sigma2)
    ll -= 0.5 * float(np.sum(np.log(w + 1.0 / sigma2)))
    return -ll


def _numeric_hessian(fun, theta, h=1e-4):
    k = len(theta)
    H = np.zeros((k, k))
    for i in range(k):
        for j in range(i, k):
            hi = h * (1.0 + abs(theta[i]))
            hj = h * (1.0 + abs(theta[j]))
            if i == j:
                f_plus = fun(theta + hi * _unit(k, i))
                f_minus = fun(theta - hi * _unit(k, i))
                f0 = fun(theta)
                H[i, i] = (f_plus - 2.0 * f0 + f_minus) / (hi * hi)
            else:
                pp = fun(theta + hi * _unit(k, i) + hj * _unit(k, j))
                pm = fun(theta + hi * _unit(k, i) - hj * _unit(k, j))
                mp = fun(theta - hi * _unit(k, i) + hj * _unit(k, j))
                mm = fun(theta - hi * _unit(k, i) - hj * _unit(k, j))
                H[i, j] = H[j, i] = (pp - pm - mp + mm) / (4.0 * hi * hj)
    return H


def _unit(k, i):
    e = np.zeros(k)
    e[i] = 1.0
    return e


def fit_glmm(
    obs: ObservationSet, metric: str, *, fixed_sigma_u: Optional[float] = None
) -> GlmmFit:
    """Fit the random-intercept logistic model for one metric.

    The metric is globally z-scored before fitting, so the slope reads as
    the log-odds change per metric standard deviation. Requires at least
    two questions and outcome variance overall. ``fixed_sigma_u`` holds the
    random-intercept scale at a given value instead of estimating it
    (sensitivity runs; at the floor the model degenerates to plain
    logistic regression).
    """
    qidx, x, y, _q_ids = _usable_arrays(obs, metric)
    n = int(x.size)
    n_q = int(qidx.max()) + 1 if n else 0
    if n_q < 2:
        raise StatsError("need at least 2 questions with usable rows")
    mean_y = float(y.mean())
    if mean_y in (0.0, 1.0):
        raise StatsError("no outcome variance: all rows share one outcome")
    sd = float(x.std())
    if sd == 0.0:
        raise StatsError(f"metric {metric!r} is constant")
    xz = (x - float(x.mean())) / sd

    u_cache = np.zeros(n_q)
    beta_init = np.array([math.log(mean_y / (1.0 - mean_y)), 0.0])

    if fixed_sigma_u is not None:
        log_sigma_fixed = math.log(max(fixed_sigma_u, SIGMA_FLOOR))

        def objective(betas):
            theta = np.array([betas[0], betas[1], log_sigma_fixed])
            return _laplace_neg_loglik(theta, xz, y, qidx, n_q, u_cache)

        opt = optimize.minimize(
            objective, beta_init, method="L-BFGS-B",
            options={"maxiter": 200, "ftol": 1e-12, "gtol": 1e-8},
        )
        beta0, beta1 = (float(v) for v in opt.x)
        sigma_u = math.exp(log_sigma_fixed)
        slope_index = 1
        hess_point = opt.x
    else:
        def objective(theta):
            return _laplace_neg_loglik(theta, xz, y, qidx, n_q, u_cache)

        theta0 = np.append(beta_init, math.log(0.5))
        bounds = [(None, None), (None, None), (math.log(SIGMA_FLOOR), math.log(1e3))]
        opt = optimize.minimize(
            objective, theta0, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": 200, "ftol": 1e-12, "gtol": 1e-8},
        )
        beta0, beta1, log_sigma = (float(v) for v in opt.x)
        sigma_u = math.exp(log_sigma)
        slope_index = 1
        hess_point = opt.x

    converged = bool(opt.success)
    se1 = float("nan")
    try:
        H = _numeric_hessian(objective, hess_point)
        cov = np.linalg.inv(H)
        var1 = float(cov[slope_index, slope_index])
        if var1 > 0.0:
            se1 = math.sqrt(var1)
        else:
            converged = False
    except np.linalg.LinAlgError:
        converged = False
    if not math.isfinite(se1) or se1 <= 0.0:
        converged = False
        p_wald = float("nan")
    else:
        p_wald = 2.0 * float(sps.norm.sf(abs(beta1) / se1))

    return GlmmFit(
        metric_name=metric,
        beta0=beta0,
        beta1=beta1,
        se1=se1,
        p_wald=p_wald,
        sigma_u=sigma_u,
        converged=converged,
        n=n,
        q=n_q,
    )


# ---------------------------------------------------------------------------
# Concordance between the two engines
# ---------------------------------------------------------------------------

@dataclass
class ConcordanceRow:
    metric_name: str
    corr_significant: bool
    corr_sign: Optional[int]
    glmm_significant: bool
    glmm_sign: Optional[int]
    concordant: Optional[bool]  # None when the correlation is ns


@dataclass
class ConcordanceReport:
    rows: list[ConcordanceRow]
    rate: Optional[float]  # over metrics with a significant correlation


def concordance_report(
    correlations: Sequence[CorrelationResult], glmm_fits: Sequence[GlmmFit]
) -> ConcordanceReport:
    """One-directional check: a significant conditional correlation should
    come with a same-signed significant mixed-model slope."""
    fits = {f.metric_name: f for f in glmm_fits}
    rows = []
    hits = 0
    total = 0
    for corr in correlations:
        fit = fits.get(corr.metric_name)
        corr_sig = bool(corr.computable and corr.p is not None and corr.p <= 0.05)
        corr_sign = None
        if corr.computable and corr.r is not None:
            corr_sign = 1 if corr.r > 0 else (-1 if corr.r < 0 else 0)
        glmm_sig = bool(
            fit is not None and fit.converged and math.isfinite(fit.p_wald) and fit.p_wald <= 0.05
        )
        glmm_sign = None
        if fit is not None:
            glmm_sign = 1 if fit.beta1 > 0 else (-1 if fit.beta1 < 0 else 0)
        concordant = None
        if corr_sig:
            total += 1
            concordant = bool(glmm_sig and glmm_sign == corr_sign)
            if concordant:
                hits += 1
        rows.append(
            ConcordanceRow(
                metric_name=corr.metric_name,
                corr_significant=corr_sig,
                corr_sign=corr_sign,
                glmm_significant=glmm_sig,
                glmm_sign=glmm_sign,
                concordant=concordant,
            )
        )
    rate = (hits / total) if total else None
    return ConcordanceReport(rows=rows, rate=rate)
