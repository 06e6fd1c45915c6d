"""Seeded random streams and the probability kernels shared by the rest of the package.

Streams are addressed by a master seed plus a path of non-negative integers, e.g.
``(cell, replicate, purpose)``.  Each path maps to its own Philox counter stream, so
draws never depend on the order in which other streams were consumed.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import gammaln

#: smallest value a beta draw may take; keeps logs and ratios finite
BETA_EPS = np.finfo(float).eps


class RngStream:
    """Deterministic substream identified by ``(seed, path)``.

    A stream is single-owner: do not share one instance between threads.
    """

    def __init__(self, seed: int, path: Sequence[int] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        if self.seed < 0 or any(p < 0 for p in self.path):
            raise ValueError("seed and path entries must be non-negative")
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int) -> "RngStream":
        """Stream for ``path + keys``; independent of how much of ``self`` was consumed."""
        return RngStream(self.seed, self.path + tuple(keys))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"


def _check_count(y, n):
    y = np.asarray(y)
    n = np.asarray(n)
    if np.any(n < 0) or np.any(y < 0) or np.any(y > n):
        raise ValueError("need 0 <= y <= n")
    return y, n


def log_beta_binomial_pmf(y, n, a, b):
    """log P(Y = y) for Y ~ BetaBin(n, a, b); broadcasts over all arguments."""
    y, n = _check_count(y, n)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("beta parameters must be positive")
    out = (gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)
           + _lgamma_diff(a, y) + _lgamma_diff(b, n - y) - _lgamma_diff(a + b, n))
    return out if out.ndim else float(out)


def _stirling_tail(x):
    x2 = x * x
    return (1.0 / 12.0 - (1.0 / 360.0 - 1.0 / (1260.0 * x2)) / x2) / x


def _lgamma_diff(x, k):
    """log Gamma(x + k) - log Gamma(x) without the cancellation of subtracting two large log-gammas."""
    x, k = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(k, dtype=float))
    big = x >= 100.0
    out = np.empty(x.shape)
    xs, ks = x[~big], k[~big]
    out[~big] = gammaln(xs + ks) - gammaln(xs)
    xb, kb = x[big], k[big]
    out[big] = ((xb - 0.5) * np.log1p(kb / xb) + kb * np.log(xb + kb) - kb
                + _stirling_tail(xb + kb) - _stirling_tail(xb))
    return out


def log_binomial_pmf(y, n, p):
    y, n = _check_count(y, n)
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)
               + np.where(y > 0, y * np.log(p), 0.0)
               + np.where(n - y > 0, (n - y) * np.log1p(-p), 0.0))
    return out if out.ndim else float(out)


def sample_beta(stream: RngStream, a, b, size=None):
    """Beta draws clamped into the open unit interval."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("beta parameters must be positive")
    x = stream.generator.beta(a, b, size=size)
    return np.clip(x, BETA_EPS, 1.0 - BETA_EPS)


def sample_binomial(stream: RngStream, n, p, size=None):
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or np.any(p > 1) or np.any(np.isnan(p)):
        raise ValueError("binomial probability outside [0, 1]")
    return stream.generator.binomial(n, p, size=size)


def sample_gaussian(stream: RngStream, mean=0.0, sd=1.0, size=None):
    sd = np.asarray(sd, dtype=float)
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    return stream.generator.normal(mean, sd, size=size)


def sample_half_normal(stream: RngStream, scale=1.0, size=None):
    return np.abs(sample_gaussian(stream, 0.0, scale, size=size))
