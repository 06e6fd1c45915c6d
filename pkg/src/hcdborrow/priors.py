"""Informative priors for the current-control probability.

Three routes are provided:

* :func:`mom_beta_prior` -- a single beta prior from moment estimates of the
  historical mean and intra-class correlation (empirical Bayes).
* :func:`map_prior` -- a meta-analytic predictive prior: a logit-normal
  hierarchical model is sampled by MCMC and its predictive draws are
  approximated by a beta mixture chosen by AIC.
* :func:`robustify` -- mixes any prior with a vague Beta(1, 1) component.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import betaln, digamma, logsumexp, zeta

from .distributions import RngStream
from .model import HistoricalControlSet

log = logging.getLogger(__name__)

#: ICC floor applied to moment estimates
RHO_FLOOR = 1e-5
#: shape substituted when a clamp drives a or b to zero
DEGENERATE_SHAPE = 0.5


class DegeneratePriorWarning(UserWarning):
    pass


class DegenerateComponentWarning(UserWarning):
    pass


@dataclass
class BetaMixture:
    """Weighted beta components; the common prior/posterior representation."""

    weights: np.ndarray
    a: np.ndarray
    b: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        self.a = np.atleast_1d(np.asarray(self.a, dtype=float))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if not (self.weights.shape == self.a.shape == self.b.shape) or self.weights.ndim != 1:
            raise ValueError("weights, a and b must be 1-d arrays of equal length")
        if self.weights.size < 1:
            raise ValueError("a mixture needs at least one component")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-6:
            raise ValueError(f"weights must be non-negative and sum to 1, got {self.weights}")
        if np.any(self.a <= 0) or np.any(self.b <= 0):
            raise ValueError("beta shapes must be positive")
        self.weights = self.weights / self.weights.sum()

    @classmethod
    def single(cls, a: float, b: float, **meta) -> "BetaMixture":
        return cls([1.0], [a], [b], meta=dict(meta))

    @property
    def K(self) -> int:
        return self.weights.size

    @property
    def component_means(self) -> np.ndarray:
        return self.a / (self.a + self.b)

    def mean(self) -> float:
        return float(np.dot(self.weights, self.component_means))

    def var(self) -> float:
        m = self.component_means
        v = self.a * self.b / ((self.a + self.b) ** 2 * (self.a + self.b + 1))
        return float(np.dot(self.weights, v + m ** 2) - self.mean() ** 2)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            lw = np.log(self.weights)
            lf = ((self.a - 1) * np.log(x)[..., None] + (self.b - 1) * np.log1p(-x)[..., None]
                  - betaln(self.a, self.b))
        return logsumexp(lw + lf, axis=-1)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def pruned(self, tol: float = 0.0) -> "BetaMixture":
        keep = self.weights > tol
        return BetaMixture(self.weights[keep] / self.weights[keep].sum(), self.a[keep], self.b[keep],
                           meta=dict(self.meta))

    def components(self):
        return list(zip(self.weights.tolist(), self.a.tolist(), self.b.tolist()))

    def to_dict(self) -> dict:
        return {
            "components": [{"weight": w, "a": a, "b": b} for w, a, b in self.components()],
            "meta": _jsonable(self.meta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BetaMixture":
        comps = d["components"]
        return cls([c["weight"] for c in comps], [c["a"] for c in comps], [c["b"] for c in comps],
                   meta=dict(d.get("meta", {})))

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text: str) -> "BetaMixture":
        return cls.from_dict(json.loads(text))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# --------------------------------------------------------------------------- moments

@dataclass(frozen=True)
class MomEstimate:
    pi_hat: float
    rho_hat: float
    clamped: bool


def estimate_mom(hcd: HistoricalControlSet) -> MomEstimate:
    """Moment estimates of the pooled rate and the ANOVA intra-class correlation.

    ``rho_hat`` may be negative (empirical underdispersion); ``clamped`` reports
    whether the downstream floor will apply.
    """
    if hcd.H < 2:
        raise ValueError("at least two historical groups are needed to estimate the ICC")
    y = hcd.events.astype(float)
    n = hcd.sizes.astype(float)
    N = n.sum()
    if N <= 0:
        raise ValueError("total historical size is zero")
    H = hcd.H
    p = y / n
    pi_hat = y.sum() / N
    bms = np.sum(n * (p - pi_hat) ** 2) / (H - 1)
    denom_w = np.sum(n - 1)
    wms = np.sum(n * p * (1 - p)) / denom_w if denom_w > 0 else 0.0
    n_star = (N - np.sum(n ** 2) / N) / (H - 1)
    denom = bms + (n_star - 1) * wms
    rho_hat = (bms - wms) / denom if denom > 0 else 0.0
    return MomEstimate(float(pi_hat), float(rho_hat), bool(rho_hat < RHO_FLOOR))


def mom_beta_prior(hcd: HistoricalControlSet) -> BetaMixture:
    est = estimate_mom(hcd)
    sum_y = int(hcd.events.sum())
    sum_f = int((hcd.sizes - hcd.events).sum())
    if sum_y == 0 and sum_f == 0:
        raise ValueError("historical data carry no information")
    rho = max(RHO_FLOOR, est.rho_hat)
    total = (1.0 - rho) / rho
    a_raw = est.pi_hat * total
    b_raw = total - a_raw
    a = min(a_raw, sum_y)
    b = min(b_raw, sum_f)
    degenerate = []
    if a <= 0:
        a = DEGENERATE_SHAPE
        degenerate.append("a")
    if b <= 0:
        b = DEGENERATE_SHAPE
        degenerate.append("b")
    if degenerate:
        warnings.warn(f"moment prior clamped {'/'.join(degenerate)} to zero; substituted "
                      f"{DEGENERATE_SHAPE}", DegeneratePriorWarning, stacklevel=2)
    return BetaMixture.single(
        a, b, method="mom", pi_hat=est.pi_hat, rho_hat=est.rho_hat, rho_used=rho,
        rho_clamped=est.clamped, a_raw=a_raw, b_raw=b_raw,
        shape_clamped=bool(a < a_raw or b < b_raw), degenerate=degenerate,
    )


def robustify(prior: BetaMixture, w_rob: float) -> BetaMixture:
    """Scale the informative weights by ``1 - w_rob`` and append Beta(1, 1) at ``w_rob``."""
    if not 0 <= w_rob <= 1:
        raise ValueError("w_rob must lie in [0, 1]")
    w = np.append(prior.weights * (1.0 - w_rob), w_rob)
    a = np.append(prior.a, 1.0)
    b = np.append(prior.b, 1.0)
    meta = dict(prior.meta, robust_weight=w_rob, robust_index=prior.K)
    keep = w > 0
    if not keep[-1]:
        meta.pop("robust_index")
    elif not keep.all():
        meta["robust_index"] = int(keep.sum()) - 1
    return BetaMixture(w[keep], a[keep], b[keep], meta=meta)


def tau_prior_scale(hcd: HistoricalControlSet) -> float:
    """Half-normal scale for the between-study sd on the logit scale."""
    pbar = float(np.mean(hcd.events / hcd.sizes))
    if 0.2 <= pbar <= 0.8:
        return 1.0
    if pbar <= 0 or pbar >= 1:
        raise ValueError(f"mean historical rate is {pbar}; the sampling sd is undefined. "
                         "Add a continuity correction to the counts.")
    return 0.5 / np.sqrt(pbar * (1 - pbar))


# --------------------------------------------------------------------------- NNHM MCMC

@dataclass
class NnhmConfig:
    mu_prior_sd: float = 2.0
    tau_prior_scale: Optional[float] = None  # None: derive from the data via tau_prior_scale()
    chains: int = 4
    iterations: int = 1500
    warmup: int = 500

    def __post_init__(self):
        if not self.iterations > self.warmup >= 1:
            raise ValueError("need iterations > warmup >= 1")
        if self.chains < 2:
            raise ValueError("split R-hat needs at least two chains")


@dataclass
class McmcResult:
    predictive_draws: np.ndarray
    rhat_max: float
    converged: bool
    posterior_means: dict = field(default_factory=dict)
    posterior_sds: dict = field(default_factory=dict)


RHAT_LIMIT = 1.05
_CHUNK = 50
_ADAPT_WINDOW = 25
_TARGET_ACCEPT = 0.33


def _softplus(x):
    return np.logaddexp(0.0, x)


def _split_rhat(s1, s2, ref, count):
    """Split R-hat from shifted per-half sums; arrays have shape (..., chains, 2, P)."""
    N = count
    dm = s1 / N
    variances = np.maximum((s2 - N * dm ** 2) / (N - 1), 0.0)
    means = dm + ref
    shp = means.shape
    means = means.reshape(shp[:-3] + (shp[-3] * 2, shp[-1]))
    variances = variances.reshape(means.shape)
    W = variances.mean(axis=-2)
    B = N * means.var(axis=-2, ddof=1)
    var_plus = (N - 1) / N * W + B / N
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_plus / W)
    # a parameter that never moved in any chain carries no mixing information
    rhat = np.where(W > 0, rhat, np.where(B > 0, np.inf, 1.0))
    return rhat


def _nnhm_batch(y, n, tau_scale, cfg: NnhmConfig, streams: Sequence[RngStream]):
    """Run the hierarchical sampler for R datasets of equal H in lockstep.

    Every dataset consumes only its own stream, so results do not depend on how
    datasets are grouped into batches.
    """
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    R, H = y.shape
    C = cfg.chains
    T, W = cfg.iterations, cfg.warmup
    tau_scale = np.asarray(tau_scale, dtype=float).reshape(R, 1)
    s_mu2 = cfg.mu_prior_sd ** 2
    gens = [s.generator for s in streams]

    yb = y[:, None, :]
    nb = n[:, None, :]

    def loglik(theta):
        return yb * theta - nb * _softplus(theta)

    # dispersed starting points around the empirical logits
    z0 = np.stack([g.standard_normal((C, H + 2)) for g in gens])
    emp = np.log((y + 0.5) / (n - y + 0.5))
    theta = emp[:, None, :] + 0.5 * z0[..., :H]
    mu = theta.mean(axis=-1) + 0.5 * z0[..., H]
    tau = tau_scale * (0.1 + 0.5 * np.abs(z0[..., H + 1]))

    p_emp = (y + 0.5) / (n + 1.0)
    log_step_theta = np.broadcast_to(
        np.log(2.0 / np.sqrt(n * p_emp * (1 - p_emp) + 1.0))[:, None, :], (R, C, H)).copy()
    log_step_tau = np.full((R, C), np.log(0.5))
    log_step_shift = np.full((R, C), np.log(0.2))
    log_step_scale = np.full((R, C), np.log(0.3))
    acc_theta = np.zeros((R, C, H))
    acc_tau = np.zeros((R, C))
    acc_shift = np.zeros((R, C))
    acc_scale = np.zeros((R, C))
    window = 0

    n_keep = T - W
    half = n_keep // 2
    pred = np.empty((R, C, n_keep))
    # running sums for split R-hat over (mu, tau, theta_1..H), shifted for stability
    P = H + 2
    shift_ref = np.zeros((R, C, 2, P))
    s1 = np.zeros((R, C, 2, P))
    s2 = np.zeros((R, C, 2, P))
    sum_all = np.zeros((R, P))
    sumsq_all = np.zeros((R, P))

    ll = loglik(theta)
    t = 0
    while t < T:
        m = min(_CHUNK, T - t)
        Z = np.stack([g.standard_normal((m, C, H + 5)) for g in gens], axis=0)
        U = np.log(np.stack([g.random((m, C, H + 3)) for g in gens], axis=0))
        for j in range(m):
            z = Z[:, j]
            u = U[:, j]
            inv_t2 = 1.0 / tau ** 2

            # 1. componentwise random walk on theta (conditionally independent)
            prop = theta + np.exp(log_step_theta) * z[..., :H]
            ll_prop = loglik(prop)
            dev_old = theta - mu[..., None]
            dev_new = prop - mu[..., None]
            logr = ll_prop - ll - 0.5 * (dev_new ** 2 - dev_old ** 2) * inv_t2[..., None]
            ok = u[..., :H] < logr
            theta = np.where(ok, prop, theta)
            ll = np.where(ok, ll_prop, ll)
            acc_theta += ok

            # 2. exact Gibbs draw of mu
            prec = H * inv_t2 + 1.0 / s_mu2
            mu = (theta.sum(axis=-1) * inv_t2) / prec + z[..., H] / np.sqrt(prec)

            # 3. random walk on log tau
            ss = np.sum((theta - mu[..., None]) ** 2, axis=-1)
            eps = np.exp(log_step_tau) * z[..., H + 1]
            tau_new = tau * np.exp(eps)
            logr = (-H * eps - 0.5 * ss * (1.0 / tau_new ** 2 - inv_t2)
                    - 0.5 * (tau_new ** 2 - tau ** 2) / tau_scale ** 2 + eps)
            ok = u[..., H] < logr
            tau = np.where(ok, tau_new, tau)
            acc_tau += ok

            # 4. joint shift of mu and all theta
            eps = np.exp(log_step_shift) * z[..., H + 2]
            prop = theta + eps[..., None]
            ll_prop = loglik(prop)
            mu_new = mu + eps
            logr = (ll_prop - ll).sum(axis=-1) - 0.5 * (mu_new ** 2 - mu ** 2) / s_mu2
            ok = u[..., H + 1] < logr
            theta = np.where(ok[..., None], prop, theta)
            ll = np.where(ok[..., None], ll_prop, ll)
            mu = np.where(ok, mu_new, mu)
            acc_shift += ok

            # 5. joint rescaling of tau and the theta deviations
            eps = np.exp(log_step_scale) * z[..., H + 3]
            prop = mu[..., None] + (theta - mu[..., None]) * np.exp(eps)[..., None]
            tau_new = tau * np.exp(eps)
            ll_prop = loglik(prop)
            logr = ((ll_prop - ll).sum(axis=-1) + eps
                    - 0.5 * (tau_new ** 2 - tau ** 2) / tau_scale ** 2)
            ok = u[..., H + 2] < logr
            theta = np.where(ok[..., None], prop, theta)
            ll = np.where(ok[..., None], ll_prop, ll)
            tau = np.where(ok, tau_new, tau)
            acc_scale += ok

            it = t + j
            if it < W:
                if (it + 1) % _ADAPT_WINDOW == 0:
                    window += 1
                    gain = 1.0 / np.sqrt(window)
                    log_step_theta += gain * (acc_theta / _ADAPT_WINDOW - _TARGET_ACCEPT) * 2.0
                    log_step_tau += gain * (acc_tau / _ADAPT_WINDOW - _TARGET_ACCEPT) * 2.0
                    log_step_shift += gain * (acc_shift / _ADAPT_WINDOW - _TARGET_ACCEPT) * 2.0
                    log_step_scale += gain * (acc_scale / _ADAPT_WINDOW - _TARGET_ACCEPT) * 2.0
                    acc_theta[:] = 0
                    acc_tau[:] = 0
                    acc_shift[:] = 0
                    acc_scale[:] = 0
            else:
                k = it - W
                pred[:, :, k] = mu + tau * z[..., H + 4]
                if k < 2 * half:
                    hi = 0 if k < half else 1
                    vals = np.concatenate([mu[..., None], tau[..., None], theta], axis=-1)
                    if k == 0 or k == half:
                        shift_ref[:, :, hi] = vals
                    d = vals - shift_ref[:, :, hi]
                    s1[:, :, hi] += d
                    s2[:, :, hi] += d ** 2
                    sum_all += vals.sum(axis=1)
                    sumsq_all += (vals ** 2).sum(axis=1)
        t += m

    rhat = _split_rhat(s1, s2, shift_ref, half)
    rhat_max = np.max(rhat, axis=(-1,))
    cnt = C * 2 * half
    means = sum_all / cnt
    sds = np.sqrt(np.maximum(sumsq_all / cnt - means ** 2, 0.0))
    draws = 1.0 / (1.0 + np.exp(-pred.reshape(R, C * n_keep)))
    draws = np.clip(draws, 1e-12, 1 - 1e-12)
    return draws, rhat_max, means, sds


def _resolve_tau_scale(hcd, cfg):
    return cfg.tau_prior_scale if cfg.tau_prior_scale is not None else tau_prior_scale(hcd)


def fit_nnhm_mcmc(hcd: HistoricalControlSet, cfg: NnhmConfig, stream: RngStream) -> McmcResult:
    """Sample the logit-normal hierarchical model with an exact binomial likelihood.

    Returns back-transformed predictive draws for a new study's control
    probability together with the split-R-hat convergence check.
    """
    if hcd.H < 2:
        raise ValueError("the hierarchical model needs at least two historical groups")
    scale = _resolve_tau_scale(hcd, cfg)
    draws, rhat, means, sds = _nnhm_batch(hcd.events[None], hcd.sizes[None], [scale], cfg, [stream])
    return _mcmc_result(draws[0], rhat[0], means[0], sds[0], hcd.H)


def _mcmc_result(draws, rhat, means, sds, H):
    names = ["mu", "tau"] + [f"theta[{h}]" for h in range(H)]
    rmax = float(np.max(rhat))
    return McmcResult(
        predictive_draws=draws,
        rhat_max=rmax,
        converged=bool(rmax < RHAT_LIMIT),
        posterior_means=dict(zip(names, means.tolist())),
        posterior_sds=dict(zip(names, sds.tolist())),
    )


# --------------------------------------------------------------------------- beta-mixture EM

EM_TOL = 1e-8
EM_MAX_ITER = 500
EM_STARTS = 5
MIN_WEIGHT = 1e-6
_SHAPE_MAX = 1e7
_LOG_SHAPE_MAX = np.log(_SHAPE_MAX)
_START_POWERS = (1.0, 0.6, 1.6, 0.8, 1.25)


def _moment_shapes(m, v):
    m = np.clip(m, 1e-10, 1 - 1e-10)
    v = np.maximum(v, 1e-12)
    common = np.clip(m * (1 - m) / v - 1.0, 0.1, _SHAPE_MAX)
    return m * common, (1 - m) * common


def _initial_params(x_sorted, K, n_starts):
    """Quantile-sliced moment starts; start s warps the slice boundaries by a power."""
    R, D = x_sorted.shape
    S = 1 if K == 1 else n_starts
    a = np.empty((R, S, K))
    b = np.empty((R, S, K))
    for s in range(S):
        cuts = np.round(D * (np.arange(K + 1) / K) ** _START_POWERS[s % len(_START_POWERS)]).astype(int)
        cuts[0], cuts[-1] = 0, D
        for k in range(K):
            lo, hi = cuts[k], max(cuts[k + 1], cuts[k] + 2)
            sl = x_sorted[:, lo:min(hi, D)]
            a[:, s, k], b[:, s, k] = _moment_shapes(sl.mean(axis=1), sl.var(axis=1))
    w = np.full((R, S, K), 1.0 / K)
    return w, a, b


def _trigamma(x):
    return zeta(2.0, x)


def _beta_mle(s1, s2, a, b, iters=60, rtol=1e-11):
    """Weighted beta MLE from mean log-statistics (elementwise).

    Newton iterations on the score equations in (log a, log b) with steps
    capped at one log unit.  The result is only accepted where it does not
    lower the objective, which keeps EM monotone.
    """
    def obj(a, b):
        return (a - 1) * s1 + (b - 1) * s2 - betaln(a, b)

    a0, b0 = a, b
    u, v = np.log(a).ravel(), np.log(b).ravel()
    s1f, s2f = np.broadcast_to(s1, a.shape).ravel(), np.broadcast_to(s2, a.shape).ravel()
    idx = np.arange(u.size)
    for _ in range(iters):
        if idx.size == 0:
            break
        ua, va = u[idx], v[idx]
        aa, ba = np.exp(ua), np.exp(va)
        dab = digamma(aa + ba)
        ga = s1f[idx] - digamma(aa) + dab
        gb = s2f[idx] - digamma(ba) + dab
        tab = _trigamma(aa + ba)
        jaa = (tab - _trigamma(aa)) * aa
        jab = tab * ba
        jba = tab * aa
        jbb = (tab - _trigamma(ba)) * ba
        det = jaa * jbb - jab * jba
        du = -(jbb * ga - jab * gb) / det
        dv = -(jaa * gb - jba * ga) / det
        big = np.maximum(np.abs(du), np.abs(dv))
        scale = np.where(big > 1.0, 1.0 / np.maximum(big, 1e-300), 1.0)
        du = np.nan_to_num(du * scale)
        dv = np.nan_to_num(dv * scale)
        un = np.minimum(ua + du, _LOG_SHAPE_MAX)
        vn = np.minimum(va + dv, _LOG_SHAPE_MAX)
        u[idx], v[idx] = un, vn
        capped = (un >= _LOG_SHAPE_MAX) | (vn >= _LOG_SHAPE_MAX)
        idx = idx[(np.maximum(np.abs(du), np.abs(dv)) > rtol) & ~capped]
    a, b = np.exp(u).reshape(a0.shape), np.exp(v).reshape(b0.shape)
    worse = ~(obj(a, b) >= obj(a0, b0))
    return np.where(worse, a0, a), np.where(worse, b0, b)


def _em_batch(x, K, n_starts=EM_STARTS, tol=EM_TOL, max_iter=EM_MAX_ITER, keep_trace=False):
    """EM for K-component beta mixtures on R independent draw sets (R, D).

    Returns best-start (w, a, b, loglik, iterations[, trace]) per draw set.
    """
    x = np.clip(np.asarray(x, dtype=float), 1e-12, 1 - 1e-12)
    R, D = x.shape
    L = np.stack([np.log(x), np.log1p(-x), np.ones_like(x)], axis=1)
    w, a, b = _initial_params(np.sort(x, axis=1), K, n_starts)
    S = w.shape[1]
    ll = np.full((R, S), -np.inf)
    iters = np.zeros((R, S), dtype=int)
    active = np.ones((R, S), dtype=bool)
    trace = [[[] for _ in range(S)] for _ in range(R)] if keep_trace else None

    for it in range(max_iter + 1):
        idx = np.nonzero(active)
        if idx[0].size == 0:
            break
        wa, aa, ba = w[idx], a[idx], b[idx]
        La = L[idx[0]]
        with np.errstate(divide="ignore"):
            coef = np.stack([aa - 1, ba - 1, np.log(wa) - betaln(aa, ba)], axis=-1)
        logf = np.matmul(coef, La)
        mx = logf.max(axis=1, keepdims=True)
        e = np.exp(logf - mx)
        tot = e.sum(axis=1)
        logp = np.log(tot) + mx[:, 0]
        ll_new = logp.sum(axis=-1)
        if keep_trace:
            for r, s, v in zip(idx[0], idx[1], ll_new):
                trace[r][s].append(float(v))
        gain = ll_new - ll[idx]
        ll[idx] = ll_new
        done = (gain < tol) | (it == max_iter)
        e /= tot[:, None, :]
        stats = np.matmul(e, np.swapaxes(La, 1, 2))
        nk = stats[..., 2]
        wn = nk / D
        safe = np.maximum(nk, 1e-300)
        s1 = stats[..., 0] / safe
        s2 = stats[..., 1] / safe
        live = wn > 0
        s1 = np.where(live, s1, digamma(aa) - digamma(aa + ba))
        s2 = np.where(live, s2, digamma(ba) - digamma(aa + ba))
        an, bn = _beta_mle(s1, s2, aa, ba)
        upd = ~done
        rows = (idx[0][upd], idx[1][upd])
        w[rows], a[rows], b[rows] = wn[upd], an[upd], bn[upd]
        iters[idx] = it
        active[idx[0][done], idx[1][done]] = False

    best = np.argmax(ll, axis=1)
    r = np.arange(R)
    out = (w[r, best], a[r, best], b[r, best], ll[r, best], iters[r, best])
    if keep_trace:
        out = out + ([trace[i][best[i]] for i in range(R)],)
    return out


def fit_beta_mixture_em(draws, K: int, n_starts: int = EM_STARTS, tol: float = EM_TOL,
                        max_iter: int = EM_MAX_ITER):
    """Fit a K-component beta mixture to draws in (0, 1) by EM.

    Returns ``(mixture, max_loglik)``.  Components whose weight falls below
    1e-6 are dropped and the fit is repeated with one component fewer.  The
    per-iteration log-likelihood of the winning start is kept in
    ``mixture.meta["loglik_trace"]``.
    """
    x = np.asarray(draws, dtype=float).ravel()
    if x.size < 100:
        raise ValueError("need at least 100 draws for the mixture fit")
    if K < 1:
        raise ValueError("K must be >= 1")
    w, a, b, ll, it, tr = _em_batch(x[None], K, n_starts, tol, max_iter, keep_trace=True)
    w, a, b = w[0], a[0], b[0]
    if K > 1 and w.min() < MIN_WEIGHT:
        warnings.warn(f"EM component weight {w.min():.2e} below {MIN_WEIGHT}; refitting with K={K - 1}",
                      DegenerateComponentWarning, stacklevel=2)
        return fit_beta_mixture_em(x, K - 1, n_starts, tol, max_iter)
    mix = BetaMixture(w, a, b, meta={"method": "em", "K": K, "iterations": int(it[0]),
                                     "loglik_trace": tr[0]})
    return mix, float(ll[0])


def aic(loglik, K):
    return 2.0 * (3 * K - 1) - 2.0 * np.asarray(loglik)


def select_mixture_batch(draws, K_max=3, n_starts=EM_STARTS, tol=EM_TOL, max_iter=EM_MAX_ITER):
    """AIC-selected beta mixtures for R draw sets at once; returns a list of BetaMixture."""
    draws = np.asarray(draws, dtype=float)
    R = draws.shape[0]
    fits = []
    scores = np.empty((R, K_max))
    for K in range(1, K_max + 1):
        w, a, b, ll, _ = _em_batch(draws, K, n_starts, tol, max_iter)
        sc = aic(ll, K)
        sc = np.where((w.min(axis=1) < MIN_WEIGHT) & (K > 1), np.inf, sc)
        scores[:, K - 1] = sc
        fits.append((w, a, b, ll))
    chosen = np.argmin(scores, axis=1)
    out = []
    for r in range(R):
        k = chosen[r]
        w, a, b, ll = (f[r] for f in fits[k])
        out.append(BetaMixture(w, a, b, meta={"K": int(k + 1), "aic": scores[r].tolist(),
                                              "loglik": float(ll)}))
    return out


def _thin(draws, max_draws):
    if max_draws is None or draws.shape[-1] <= max_draws:
        return draws
    stride = int(np.ceil(draws.shape[-1] / max_draws))
    return draws[..., ::stride]


def map_prior(hcd: HistoricalControlSet, cfg: NnhmConfig, stream: RngStream, K_max: int = 3,
              n_starts: int = EM_STARTS, em_max_draws: Optional[int] = None) -> BetaMixture:
    """Meta-analytic predictive prior approximated by an AIC-selected beta mixture.

    MCMC non-convergence does not raise; it is reported in ``meta["converged"]``.
    """
    res = fit_nnhm_mcmc(hcd, cfg, stream)
    if not res.converged:
        log.warning("MAP prior MCMC did not converge (max R-hat %.3f)", res.rhat_max)
    draws = _thin(res.predictive_draws[None], em_max_draws)
    mix = select_mixture_batch(draws, K_max, n_starts)[0]
    mix.meta.update(method="map", rhat_max=res.rhat_max, converged=res.converged,
                    seed=stream.seed, path=list(stream.path),
                    tau_prior_scale=_resolve_tau_scale(hcd, cfg),
                    predictive_mean=float(res.predictive_draws.mean()),
                    predictive_sd=float(res.predictive_draws.std(ddof=1)),
                    n_draws=int(res.predictive_draws.size))
    return mix


def map_prior_batch(hcds: List[HistoricalControlSet], cfg: NnhmConfig, streams: Sequence[RngStream],
                    K_max: int = 3, n_starts: int = EM_STARTS, em_max_draws: Optional[int] = None,
                    em_tol: float = EM_TOL, em_max_iter: int = EM_MAX_ITER):
    """MAP priors for many equally-sized historical sets in one vectorised pass.

    Entries are ``None`` where the tau-prior scale is undefined; non-converged
    fits are returned with ``meta["converged"] = False``.
    """
    out: List[Optional[BetaMixture]] = [None] * len(hcds)
    ok, scales = [], []
    for i, h in enumerate(hcds):
        try:
            scales.append(_resolve_tau_scale(h, cfg))
            ok.append(i)
        except ValueError:
            continue
    if not ok:
        return out
    y = np.stack([hcds[i].events for i in ok])
    n = np.stack([hcds[i].sizes for i in ok])
    draws, rhat, _, _ = _nnhm_batch(y, n, scales, cfg, [streams[i] for i in ok])
    mixes = select_mixture_batch(_thin(draws, em_max_draws), K_max, n_starts, em_tol, em_max_iter)
    for j, i in enumerate(ok):
        rmax = float(rhat[j].max())
        mixes[j].meta.update(method="map", rhat_max=rmax, converged=bool(rmax < RHAT_LIMIT))
        out[i] = mixes[j]
    return out
