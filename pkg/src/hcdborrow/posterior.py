"""Conjugate mixture updates and summaries of beta-mixture priors and posteriors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import integrate
from scipy.special import betainc, betaincinv, betaln, logsumexp
from scipy.stats import beta as beta_dist

from .distributions import BETA_EPS, RngStream, log_beta_binomial_pmf
from .model import ControlGroup, HistoricalControlSet
from .priors import BetaMixture, mom_beta_prior, robustify

ELIR_EPS = 1e-9


class NumericalError(RuntimeError):
    pass


def update(prior: BetaMixture, data: ControlGroup) -> BetaMixture:
    """Posterior mixture after observing ``data.events`` out of ``data.size``.

    Components are updated conjugately; weights are re-weighted by each
    component's beta-binomial marginal likelihood.
    """
    y, n = data.events, data.size
    with np.errstate(divide="ignore"):
        lw = np.log(prior.weights) + log_beta_binomial_pmf(y, n, prior.a, prior.b)
    w = np.exp(lw - logsumexp(lw))
    meta = {k: v for k, v in prior.meta.items() if k in ("method", "robust_index", "robust_weight")}
    meta["data"] = [int(y), int(n)]
    return BetaMixture(w, prior.a + y, prior.b + n - y, meta=meta)


def mixture_cdf(mix: BetaMixture, x):
    x = np.asarray(x, dtype=float)
    return np.sum(mix.weights * betainc(mix.a, mix.b, x[..., None]), axis=-1)


def mixture_quantile(mix: BetaMixture, q, tol: float = 1e-10):
    """Inverse mixture CDF by bisection to relative tolerance ``tol``.

    The mixture quantile lies between the smallest and largest component
    quantiles, which gives the starting bracket.
    """
    q = np.asarray(q, dtype=float)
    if np.any(q <= 0) or np.any(q >= 1):
        raise ValueError("quantile level must lie in (0, 1)")
    if mix.K == 1:
        out = betaincinv(mix.a[0], mix.b[0], q)
        return out if out.ndim else float(out)
    comp = betaincinv(mix.a, mix.b, q[..., None])
    lo, hi = comp.min(axis=-1), comp.max(axis=-1)
    for _ in range(1100):
        if np.all(hi - lo <= tol * np.maximum(lo, 1e-300)):
            break
        mid = 0.5 * (lo + hi)
        below = mixture_cdf(mix, mid) < q
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    out = 0.5 * (lo + hi)
    return out if out.ndim else float(out)


def _elir_integrand(mix: BetaMixture):
    """Integrand of the ELIR in terms of (log p, log(1 - p)) plus an optional log-Jacobian."""
    a, b = mix.a, mix.b
    with np.errstate(divide="ignore"):
        lw = np.log(mix.weights)
    keep = np.isfinite(lw)
    a, b, lw = a[keep], b[keep], lw[keep] - betaln(a[keep], b[keep])

    def f(log_p, log_q, log_jac=0.0):
        # scaled by s = p * q so nothing overflows in the tails
        p, q = np.exp(log_p), np.exp(log_q)
        lf = lw + (a - 1) * log_p + (b - 1) * log_q
        lp = logsumexp(lf)
        r = np.exp(lf - lp)
        h = (a - 1) * q - (b - 1) * p
        s2dg = -(a - 1) * q * q - (b - 1) * p * p
        d2 = np.dot(r, h * h + s2dg) - np.dot(r, h) ** 2
        return -d2 * np.exp(lp - log_p - log_q + log_jac)

    return f


def _breakpoints(mix: BetaMixture):
    pts = {ELIR_EPS, 1 - ELIR_EPS}
    for a, b in zip(mix.a, mix.b):
        for q in (1e-8, 1e-4, 0.01, 0.5, 0.99, 1 - 1e-4, 1 - 1e-8):
            pts.add(float(np.clip(betaincinv(a, b, q), ELIR_EPS, 1 - ELIR_EPS)))
    return sorted(pts)


def ess_elir(mix: BetaMixture, rtol: float = 1e-6) -> float:
    """Effective sample size by the expected local-information-ratio.

    Integrates the observed information of the log mixture density, scaled by
    the inverse unit binomial information, against the mixture itself.  For a
    single Beta(a, b) with a, b > 1 this equals a + b.  The bulk is integrated
    piecewise on (eps, 1 - eps); the two tails are added on a log scale, which
    matters when a shape is close to 1 and the integrand is nearly singular.
    A tail is only added when every component's shape at that end is >= 1.
    """
    f = _elir_integrand(mix)
    pts = _breakpoints(mix)
    pieces = []
    for lo, hi in zip(pts[:-1], pts[1:]):
        if hi - lo <= 0:
            continue
        pieces.append(integrate.quad(lambda p: f(np.log(p), np.log1p(-p)), lo, hi, epsabs=0.0, epsrel=rtol * 1e-2,
                                     limit=200))
    log_eps = np.log(ELIR_EPS)
    lower_tail = lambda u: f(u, np.log(-np.expm1(u)), u)
    upper_tail = lambda u: f(np.log(-np.expm1(u)), u, u)
    live = mix.weights > 0
    for tail, shapes in ((lower_tail, mix.a[live]), (upper_tail, mix.b[live])):
        # a shape below 1 makes the information non-integrable at that end; keep the truncation there
        if np.min(shapes) < 1.0:
            continue
        pieces.append(integrate.quad(tail, -np.inf, log_eps, epsabs=0.0, epsrel=rtol * 1e-2, limit=200))
    total = float(sum(v for v, _ in pieces))
    err = float(sum(e for _, e in pieces))
    if not np.isfinite(total) or err > rtol * max(abs(total), 1.0) * 10:
        raise NumericalError(f"ELIR quadrature did not converge (value {total}, error {err})")
    return total


def sample_mixture(mix: BetaMixture, stream: RngStream, size=None):
    g = stream.generator
    if mix.K == 1:
        x = g.beta(mix.a[0], mix.b[0], size=size)
    else:
        k = g.choice(mix.K, size=size, p=mix.weights)
        x = g.beta(mix.a[k], mix.b[k])
    return np.clip(x, BETA_EPS, 1 - BETA_EPS)


@dataclass
class PredictiveTable:
    y: np.ndarray
    pmf: np.ndarray
    central: np.ndarray  # bool mask of the central set
    level: float

    @property
    def central_range(self) -> Tuple[int, int]:
        idx = np.nonzero(self.central)[0]
        return int(self.y[idx[0]]), int(self.y[idx[-1]])


def prior_predictive_pmf(mix: BetaMixture, n: int, level: float = 0.95) -> PredictiveTable:
    """Beta-binomial mixture predictive for ``n`` new trials plus its central set.

    The central set is the equal-tailed range [lo, hi] with lo the first count
    whose CDF exceeds (1-level)/2 and hi the first whose CDF reaches (1+level)/2.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    y = np.arange(n + 1)
    lp = np.log(mix.weights)[:, None] + log_beta_binomial_pmf(y[None, :], n, mix.a[:, None], mix.b[:, None])
    pmf = np.exp(logsumexp(lp, axis=0))
    cdf = np.cumsum(pmf)
    tail = (1 - level) / 2
    lo = int(np.argmax(cdf > tail))
    hi = int(np.argmax(cdf >= 1 - tail - 1e-12))
    return PredictiveTable(y, pmf, (y >= lo) & (y <= hi), level)


def robust_weight_curve(informative: BetaMixture, n0: int, w_rob: float, y_grid: Sequence[int]) -> np.ndarray:
    """Posterior weight of the vague component for each possible count in ``y_grid``."""
    if "robust_index" in informative.meta:
        raise ValueError("prior already carries a robust component")
    if w_rob == 0:
        return np.zeros(len(y_grid))
    prior = robustify(informative, w_rob)
    ri = prior.meta["robust_index"]
    return np.array([update(prior, ControlGroup(int(y), n0)).weights[ri] for y in y_grid])


def prediction_interval_beta_binomial(hcd: HistoricalControlSet, n0: int, level: float, stream: RngStream,
                                      n_draws: int = 100_000):
    """Predictive-quantile interval for a new control proportion out of ``n0``.

    Fits the clamped moment beta prior and simulates beta-binomial draws.
    Returns ``(lower, upper, prior)``.
    """
    if n_draws < 100_000:
        raise ValueError("use at least 1e5 predictive draws")
    prior = mom_beta_prior(hcd)
    g = stream.generator
    p = np.clip(g.beta(prior.a[0], prior.b[0], size=n_draws), 0.0, 1.0)
    ystar = g.binomial(n0, p) / n0
    tail = (1 - level) / 2
    lo, hi = np.quantile(ystar, [tail, 1 - tail], method="inverted_cdf")
    return float(lo), float(hi), prior


def summarize(mix: BetaMixture) -> dict:
    q = mixture_quantile(mix, np.array([0.025, 0.5, 0.975]))
    return {"mean": mix.mean(), "q025": float(q[0]), "median": float(q[1]), "q975": float(q[2]),
            "ess": ess_elir(mix)}
