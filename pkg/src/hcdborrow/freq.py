"""Frequentist comparators: pooling, log-link binomial GLMs and many-to-one limits.

All models here are one-way designs (intercept plus one indicator per
treatment arm) fitted to grouped counts, so the intercept is the log control
rate and the arm coefficients are log risk ratios.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize
from scipy.special import gammaln, ndtr, ndtri

from .distributions import RngStream
from .inference import SimultaneousLimits
from .model import ControlGroup, CurrentTrial, HistoricalControlSet

#: linear predictors are kept within [-ETA_CAP, 0)
ETA_CAP = 35.0
GLM_TOL = 1e-8
GLM_MAX_ITER = 100
MVN_DRAWS = 200_000


@dataclass(frozen=True)
class PooledControl:
    events: int
    size: int
    kept_history: Tuple[int, ...]
    w0: float
    w_hist: float

    @property
    def group(self) -> ControlGroup:
        return ControlGroup(self.events, self.size)


def _pool(trial: CurrentTrial, hcd: Optional[HistoricalControlSet], keep) -> PooledControl:
    y0, n0 = trial.control.events, trial.control.size
    if hcd is None:
        return PooledControl(y0, n0, (), 1.0, 0.0)
    keep = tuple(int(i) for i in keep)
    yh = int(sum(hcd.groups[i].events for i in keep))
    nh = int(sum(hcd.groups[i].size for i in keep))
    n_pool = n0 + nh
    return PooledControl(y0 + yh, n_pool, keep, n0 / n_pool, nh / n_pool)


def pool_naive(trial: CurrentTrial, hcd: Optional[HistoricalControlSet]) -> PooledControl:
    """Complete pooling of every historical group into the current control."""
    return _pool(trial, hcd, range(hcd.H) if hcd is not None else ())


def pooled_variance(pi0_hat: float, n0: int, pi_hat: float, N_hist: int) -> float:
    """Variance of the pooled control rate assuming independent current and historical rates."""
    n_pool = n0 + N_hist
    w0 = n0 / n_pool
    v = w0 ** 2 * pi0_hat * (1 - pi0_hat) / n0
    if N_hist > 0:
        w = N_hist / n_pool
        v += w ** 2 * pi_hat * (1 - pi_hat) / N_hist
    return v


def fisher_exact_two_sided(g1: ControlGroup, g2: ControlGroup) -> float:
    """Two-sided Fisher exact p-value for equal event rates in two groups.

    Sums the hypergeometric probabilities of all tables with the observed
    margins that are no more likely than the observed table.
    """
    n1, n2 = g1.size, g2.size
    k = g1.events + g2.events
    N = n1 + n2
    lo, hi = max(0, k - n2), min(k, n1)
    x = np.arange(lo, hi + 1)
    logp = (gammaln(n1 + 1) - gammaln(x + 1) - gammaln(n1 - x + 1)
            + gammaln(n2 + 1) - gammaln(k - x + 1) - gammaln(n2 - k + x + 1)
            - (gammaln(N + 1) - gammaln(k + 1) - gammaln(N - k + 1)))
    p = np.exp(logp)
    obs = p[g1.events - lo]
    return float(min(1.0, p[p <= obs * (1 + 1e-7)].sum()))


def test_then_pool(trial: CurrentTrial, hcd: HistoricalControlSet, alpha: float = 0.05) -> PooledControl:
    """Pool only the historical groups whose Fisher test against the control is not significant."""
    keep = [h for h, g in enumerate(hcd.groups) if fisher_exact_two_sided(trial.control, g) >= alpha]
    return _pool(trial, hcd, keep)


# --------------------------------------------------------------------------- GLMs

@dataclass
class GlmFit:
    coefficients: np.ndarray  # [log pi0, log RR_1, ..., log RR_M]
    covariance: np.ndarray
    converged: bool
    boundary: bool
    iterations: int = 0
    method: str = "glm"
    info: dict = field(default_factory=dict)

    @property
    def log_rr(self) -> np.ndarray:
        return self.coefficients[1:]

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def _grouped(control, treatments):
    if isinstance(control, PooledControl):
        control = control.group
    arms = list(treatments.treatments if isinstance(treatments, CurrentTrial) else treatments)
    if not arms:
        raise ValueError("at least one treatment arm is required")
    y = np.array([control.events] + [g.events for g in arms], dtype=float)
    n = np.array([control.size] + [g.size for g in arms], dtype=float)
    G = len(y)
    X = np.zeros((G, G))
    X[:, 0] = 1.0
    X[np.arange(1, G), np.arange(1, G)] = 1.0
    return X, y, n


def _irls(X, y, n, prior_scale=None, prior_df=1.0):
    """IRLS for a log-link binomial model; optional Student-t priors fitted by EM.

    With ``prior_scale`` given, each coefficient gets an independent
    t(prior_df, 0, scale) prior written as a normal scale mixture whose
    variance is re-estimated every iteration.
    """
    p0 = np.clip((y + 0.5) / (n + 1.0), 1e-6, 1 - 1e-6)
    beta = np.linalg.solve(X, np.log(p0)) if X.shape[0] == X.shape[1] else np.linalg.lstsq(X, np.log(p0), rcond=None)[0]
    penalized = prior_scale is not None
    square = X.shape[0] == X.shape[1]
    if penalized:
        prior_scale = np.asarray(prior_scale, dtype=float)
        prior_var = prior_scale ** 2
    eta_max = np.log1p(-1e-10)
    converged = False
    cov = None
    it = 0
    for it in range(1, GLM_MAX_ITER + 1):
        eta = X @ beta
        mu = np.exp(eta)
        w = n * mu / (1.0 - mu)
        z = eta + (y / n - mu) / mu
        XtW = X.T * w
        A = XtW @ X
        if penalized:
            A = A + np.diag(1.0 / prior_var)
        if square and not penalized:
            # saturated design: the weighted LS step is z itself, free of the
            # rounding an ill-conditioned normal-equation solve adds at the cap
            beta_new = np.linalg.solve(X, z)
        else:
            beta_new = np.linalg.solve(A, XtW @ z)
        # step-halve towards the previous fit while any fitted probability exceeds one
        for _ in range(50):
            eta_new = X @ beta_new
            if np.all(eta_new <= eta_max):
                break
            beta_new = 0.5 * (beta_new + beta)
        eta_new = np.clip(X @ beta_new, -ETA_CAP, eta_max)
        if square:
            beta_new = np.linalg.solve(X, eta_new)
        if penalized:
            cov_b = np.linalg.inv(A)
            prior_var = (beta_new ** 2 + np.diag(cov_b) + prior_df * prior_scale ** 2) / (1.0 + prior_df)
        step = np.max(np.abs(beta_new - beta))
        beta = beta_new
        if step < GLM_TOL:
            converged = True
            break
    eta = X @ beta
    mu = np.exp(eta)
    w = n * mu / (1.0 - mu)
    A = (X.T * w) @ X
    if penalized:
        A = A + np.diag(1.0 / prior_var)
    try:
        if square and not penalized:
            Xi = np.linalg.inv(X)
            cov = (Xi / w) @ Xi.T
        else:
            cov = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        cov = np.full(A.shape, np.inf)
        converged = False
    converged = converged and bool(np.all(mu <= 1 - 1e-8)) and bool(np.all(np.isfinite(cov)))
    return beta, cov, converged, it


def fit_log_binomial_glm(control, treatments) -> GlmFit:
    """Maximum-likelihood log-link binomial fit of control plus treatment arms.

    Zero-count groups drive a coefficient to the linear-predictor cap; the fit
    still reports convergence but sets ``boundary`` and carries the inflated
    standard error.
    """
    X, y, n = _grouped(control, treatments)
    beta, cov, conv, it = _irls(X, y, n)
    return GlmFit(beta, cov, conv, bool(np.any(y == 0)), it, method="glm")


REG_SCALE_ARM = 2.5
REG_SCALE_INTERCEPT = 10.0
REG_DF = 1.0


def fit_regularized_glm(control, treatments, scale_arm: float = REG_SCALE_ARM,
                        scale_intercept: float = REG_SCALE_INTERCEPT, df: float = REG_DF) -> GlmFit:
    """Log-link binomial fit with weakly-informative Cauchy-type priors on the coefficients."""
    X, y, n = _grouped(control, treatments)
    scales = np.r_[scale_intercept, np.full(X.shape[1] - 1, scale_arm)]
    beta, cov, conv, it = _irls(X, y, n, prior_scale=scales, prior_df=df)
    return GlmFit(beta, cov, conv, bool(np.any(y == 0)), it, method="bglm")


# --------------------------------------------------------------------------- MVN quantiles

def _one_factor_loadings(corr: np.ndarray, tol: float = 1e-10):
    """Loadings lam with corr[i, j] == lam[i] * lam[j] off the diagonal, or None."""
    M = corr.shape[0]
    if M == 1:
        return np.zeros(1)
    if M == 2:
        r = corr[0, 1]
        s = np.sqrt(abs(r))
        return np.array([s, np.sign(r) * s if r != 0 else 0.0])
    lam2 = np.empty(M)
    for i in range(M):
        j, k = [m for m in range(M) if m != i][:2]
        if abs(corr[j, k]) < 1e-300:
            return None
        lam2[i] = corr[i, j] * corr[i, k] / corr[j, k]
    if np.any(lam2 < -tol) or np.any(lam2 > 1 + tol):
        return None
    lam = np.sqrt(np.clip(lam2, 0.0, 1.0))
    ref = int(np.argmax(lam))
    sign = np.where(corr[ref] < 0, -1.0, 1.0)
    sign[ref] = 1.0
    lam = lam * sign
    off = np.outer(lam, lam)
    mask = ~np.eye(M, dtype=bool)
    if np.max(np.abs(off[mask] - corr[mask])) > 1e-8:
        return None
    return lam


def _factor_max_cdf(c, lam):
    """P(max Z_m <= c) for Z_m = lam_m X + sqrt(1 - lam_m^2) E_m."""
    lam = np.asarray(lam)
    sd = np.sqrt(np.clip(1 - lam ** 2, 0.0, 1.0))
    hard = sd < 1e-7
    soft = ~hard
    lo, hi = -12.0, 12.0
    for l in lam[hard]:
        if l > 0:
            hi = min(hi, c / l)
        else:
            lo = max(lo, -c / abs(l))
    if lo >= hi:
        return 0.0
    if not soft.any():
        return float(ndtr(hi) - ndtr(lo))
    ls, ss = lam[soft], sd[soft]
    # composite Gauss-Legendre, split where a factor switches from 0 to 1
    kinks = [c / l for l in ls if abs(l) > 1e-12 and lo < c / l < hi]
    edges = np.unique(np.r_[lo, hi, kinks])
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    z = (mid[:, None] + half[:, None] * _GL_NODES).ravel()
    wz = (half[:, None] * _GL_WEIGHTS).ravel()
    f = np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi) * np.prod(ndtr((c - np.outer(z, ls)) / ss), axis=1)
    return float(wz @ f)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(96)


def mvn_max_quantile(corr, level: float, stream: Optional[RngStream] = None, method: str = "auto",
                     n_draws: int = MVN_DRAWS) -> float:
    """Equicoordinate quantile c with P(max_m Z_m <= c) = level, Z ~ N(0, corr).

    ``method="mc"`` estimates c from Cholesky-sampled draws; ``"factor"``
    integrates exactly when the correlation has one-factor structure, which
    holds for every one-way design fitted in this module.  ``"auto"`` uses the
    factor route when it applies and Monte Carlo otherwise.
    """
    corr = np.atleast_2d(np.asarray(corr, dtype=float))
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if method not in ("auto", "mc", "factor"):
        raise ValueError(f"unknown method {method!r}")
    lam = _one_factor_loadings(corr) if method != "mc" else None
    if lam is not None:
        target = lambda c: _factor_max_cdf(c, lam) - level
        lo = ndtri(level) - 1e-9
        hi = ndtri(1 - (1 - level) / corr.shape[0]) + 1e-9
        return float(optimize.brentq(target, lo, hi, xtol=1e-10))
    if method == "factor":
        raise ValueError("correlation matrix has no one-factor representation")
    if stream is None:
        raise ValueError("Monte Carlo quantile needs a random stream")
    if n_draws < MVN_DRAWS:
        raise ValueError(f"use at least {MVN_DRAWS} draws")
    try:
        L = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky(corr + 1e-10 * np.eye(corr.shape[0]))
    Z = stream.generator.standard_normal((n_draws, corr.shape[0])) @ L.T
    return float(np.quantile(Z.max(axis=1), level))


def simultaneous_lower_rr_limits(fit: GlmFit, level: float = 0.95, stream: Optional[RngStream] = None,
                                 method: str = "auto") -> SimultaneousLimits:
    """Many-to-one lower limits exp(beta_m - c * se_m) for the arm risk ratios."""
    beta = fit.log_rr
    M = beta.size
    alpha = 1 - level
    if not fit.converged:
        return SimultaneousLimits(np.full(M, np.nan), alpha, valid=False, estimate=np.exp(beta),
                                  info={"reason": "fit did not converge"})
    cov = fit.covariance[1:, 1:]
    se = np.sqrt(np.diag(cov))
    corr = cov / np.outer(se, se)
    np.fill_diagonal(corr, 1.0)
    c = mvn_max_quantile(corr, level, stream, method=method)
    with np.errstate(over="ignore"):
        lower = np.exp(beta - c * se)
    return SimultaneousLimits(lower, alpha, estimate=np.exp(beta), info={"critical_value": c, "se": se})
