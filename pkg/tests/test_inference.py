import time

import numpy as np
import pytest

from hcdborrow.distributions import RngStream
from hcdborrow.inference import (SimultaneousLimits, besag_lower_limits, decide, ratio_matrix,
                                 sample_joint_posterior)
from hcdborrow.model import CurrentTrial
from hcdborrow.priors import BetaMixture


def test_hand_example():
    d1 = [0.5, 1.0, 1.5, 2.0, 2.5]
    d2 = [2.5, 2.0, 1.5, 1.0, 0.5]
    lim = besag_lower_limits(np.c_[d1, d2], 0.2)
    # min ranks [1,2,3,2,1] -> R = [5,4,3,4,5]; q = 4; R^(4) = 5; order statistic B + 1 - 5 = 1
    assert lim.info["q"] == 4 and lim.info["R_q"] == 5 and lim.info["order_stat"] == 1
    np.testing.assert_array_equal(lim.lower, [0.5, 0.5])


def test_single_column_order_statistic():
    x = np.random.default_rng(1).lognormal(size=10_000)
    lim = besag_lower_limits(x, 0.05)
    assert lim.lower[0] == np.sort(x)[10_000 - 9500]
    assert np.mean(x >= lim.lower[0]) == 0.95


def test_joint_coverage_on_draws():
    rng = np.random.default_rng(2)
    B = 10_000
    x = rng.lognormal(size=(B, 4)) * rng.lognormal(size=(B, 1))
    for alpha in (0.05, 0.1, 0.2):
        lim = besag_lower_limits(x, alpha)
        cover = np.mean(np.all(x >= lim.lower, axis=1))
        assert abs(cover - (1 - alpha)) <= 2e-3


def test_runtime():
    x = np.random.default_rng(3).random((10_000, 4))
    t = time.perf_counter()
    besag_lower_limits(x, 0.05)
    assert time.perf_counter() - t < 0.1


def test_errors():
    with pytest.raises(ValueError):
        besag_lower_limits(np.ones((10, 2)), 0.0)


def test_joint_posterior():
    trial = CurrentTrial.from_counts(3, 50, [5, 10], [50, 50])
    d = sample_joint_posterior(trial, BetaMixture.single(1, 1), 100_000, RngStream(4))
    assert d.shape == (100_000, 3)
    for m, y in ((1, 5), (2, 10)):
        mean = (1 + y) / 52
        sd = np.sqrt(mean * (1 - mean) / 53 / d.shape[0])
        assert abs(d[:, m].mean() - mean) < 3 * sd
    again = sample_joint_posterior(trial, BetaMixture.single(1, 1), 100_000, RngStream(4))
    assert np.array_equal(d, again)
    with pytest.raises(ValueError):
        sample_joint_posterior(trial, BetaMixture.single(1, 1), 999, RngStream(4))


def test_ratio_matrix_floor():
    r = ratio_matrix(np.array([[0.0, 0.5]]))
    assert np.isfinite(r).all()


def test_decide():
    rej, anyr = decide(SimultaneousLimits(np.array([0.5, 1.0]), 0.05))
    assert not anyr and not rej.any()
    rej, anyr = decide(SimultaneousLimits(np.array([0.9, 1.2]), 0.05))
    assert anyr and list(rej) == [False, True]
