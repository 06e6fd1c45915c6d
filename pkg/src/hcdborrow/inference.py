"""Simultaneous lower credible limits for risk ratios from joint posterior draws.

The limits use the rank construction of Besag et al. (1995), restricted to
one-sided lower bounds: every column of the ratio matrix is ranked, each
draw is summarised by its most extreme (smallest) rank, and a single cut on
that summary gives limits with joint coverage 1 - alpha.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .distributions import RngStream
from .model import CurrentTrial
from .posterior import sample_mixture, update
from .priors import BetaMixture

#: control draws are floored here before forming ratios
CONTROL_FLOOR = 1e-12
DEFAULT_B = 10_000


@dataclass
class SimultaneousLimits:
    lower: np.ndarray
    alpha: float
    B: Optional[int] = None
    valid: bool = True
    estimate: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.lower)


def sample_joint_posterior(trial: CurrentTrial, control_prior: BetaMixture, B: int,
                           stream: RngStream) -> np.ndarray:
    """B x (M+1) independent posterior draws; column 0 is the control.

    Treatment arms get a uniform prior, so column m is Beta(1 + y_m, 1 + n_m - y_m).
    """
    if B < 1000:
        raise ValueError("use at least 1000 posterior draws")
    out = np.empty((B, trial.M + 1))
    post0 = update(control_prior, trial.control)
    out[:, 0] = sample_mixture(post0, stream.child(0), size=B)
    for m, arm in enumerate(trial.treatments, start=1):
        g = stream.child(m).generator
        out[:, m] = g.beta(1 + arm.events, 1 + arm.size - arm.events, size=B)
    np.clip(out, CONTROL_FLOOR, 1.0, out=out)
    return out


def ratio_matrix(draws: np.ndarray) -> np.ndarray:
    draws = np.asarray(draws, dtype=float)
    return draws[:, 1:] / np.maximum(draws[:, [0]], CONTROL_FLOOR)


def _round_half_up(x: float) -> int:
    # guard against representation error such as 0.95 * 4000 = 3800.0000000000005
    return int(math.floor(round(x, 9) + 0.5))


def besag_lower_limits(ratios: np.ndarray, alpha: float) -> SimultaneousLimits:
    """Simultaneous one-sided (1 - alpha) lower limits from a B x M draw matrix.

    Ties within a column are broken by row order, so ranks are a permutation
    of 1..B in every column.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    x = np.asarray(ratios, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    B, M = x.shape
    order = np.argsort(x, axis=0, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(1, B + 1)[:, None], axis=0)
    R = B + 1 - ranks.min(axis=1)
    q = _round_half_up(B * (1 - alpha))
    if not 1 <= q <= B:
        raise ValueError(f"B(1 - alpha) rounds to {q}, outside 1..{B}")
    Rq = np.partition(R, q - 1)[q - 1]
    k = B + 1 - Rq
    if k < 1:
        raise ValueError("alpha too small for the number of draws")
    sorted_x = np.take_along_axis(x, order, axis=0)
    return SimultaneousLimits(lower=sorted_x[k - 1].copy(), alpha=alpha, B=B,
                              info={"q": q, "R_q": int(Rq), "order_stat": int(k)})


def bayesian_limits(trial: CurrentTrial, control_prior: BetaMixture, alpha: float, B: int,
                    stream: RngStream) -> SimultaneousLimits:
    draws = sample_joint_posterior(trial, control_prior, B, stream)
    lim = besag_lower_limits(ratio_matrix(draws), alpha)
    lim.estimate = np.median(ratio_matrix(draws), axis=0)
    return lim


def decide(limits: SimultaneousLimits):
    """Per-arm rejections (lower limit strictly above 1) and the any-rejection flag."""
    rejected = np.asarray(limits.lower) > 1.0
    return rejected, bool(rejected.any())
