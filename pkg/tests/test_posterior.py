import numpy as np
import pytest
from scipy import stats

from hcdborrow.distributions import RngStream
from hcdborrow.model import ControlGroup, HistoricalControlSet
from hcdborrow.posterior import (ess_elir, mixture_cdf, mixture_quantile, prediction_interval_beta_binomial,
                                 prior_predictive_pmf, robust_weight_curve, sample_mixture, update)
from hcdborrow.priors import BetaMixture, robustify


def test_conjugate_single():
    post = update(BetaMixture.single(1, 1), ControlGroup(3, 10))
    assert (post.a[0], post.b[0]) == (4, 8)


def test_identical_components_keep_weights():
    prior = BetaMixture([0.3, 0.7], [2, 2], [5, 5])
    np.testing.assert_allclose(update(prior, ControlGroup(4, 20)).weights, [0.3, 0.7], atol=1e-14)


def test_posterior_shapes_follow_update_rule(robust_map_prior):
    post = update(robust_map_prior, ControlGroup(1, 10))
    np.testing.assert_array_equal(post.a, robust_map_prior.a + 1)
    np.testing.assert_array_equal(post.b, robust_map_prior.b + 9)
    assert post.meta["robust_index"] == 2


def test_published_posterior_weights_reproduced_with_eleven_animals(robust_map_prior):
    # the printed posterior weights (0.7688, 0.1720, 0.0591) correspond to 1 event in 11 animals
    post = update(robust_map_prior, ControlGroup(1, 11))
    np.testing.assert_allclose(post.weights, [0.7688, 0.1720, 0.0591], atol=0.002)


def test_quantiles():
    assert mixture_quantile(BetaMixture.single(1, 1), 0.5) == pytest.approx(0.5)
    mix = BetaMixture([0.5, 0.5], [2, 20], [20, 2])
    q = mixture_quantile(mix, np.array([0.25, 0.5, 0.75]))
    assert q[0] < q[1] < q[2]
    np.testing.assert_allclose(mixture_cdf(mix, q), [0.25, 0.5, 0.75], atol=1e-9)


@pytest.mark.parametrize("a,b", [(1.5, 1.5), (2, 30), (23.1972, 411.6442), (400, 600), (3, 1e4), (1.2, 80)])
def test_ess_single_beta(a, b):
    assert ess_elir(BetaMixture.single(a, b)) == pytest.approx(a + b, rel=0.005)


def test_ess_flat_beta_has_no_curvature():
    # the log density of Beta(1, 1) is flat, so the local information is zero everywhere
    assert ess_elir(BetaMixture.single(1, 1)) == pytest.approx(0.0, abs=1e-12)


def test_ess_published_prior_and_posterior(robust_map_prior):
    assert ess_elir(robust_map_prior) == pytest.approx(227, abs=5)
    post = update(robust_map_prior, ControlGroup(1, 10))
    assert ess_elir(post) == pytest.approx(285, abs=8)
    assert mixture_quantile(post, 0.5) == pytest.approx(0.055, abs=0.005)


def test_ess_conflict_lowers_posterior_gain(robust_map_prior):
    prior_ess = ess_elir(robust_map_prior)
    agree = ess_elir(update(robust_map_prior, ControlGroup(3, 50)))
    conflict = ess_elir(update(robust_map_prior, ControlGroup(25, 50)))
    assert agree > prior_ess
    assert conflict < prior_ess + 50


def test_sample_mixture():
    mix = BetaMixture([0.4, 0.6], [2, 30], [20, 10])
    x = sample_mixture(mix, RngStream(1), size=100_000)
    sd = np.sqrt(mix.var() / x.size)
    assert abs(x.mean() - mix.mean()) < 3 * sd
    assert stats.kstest(x, lambda t: mixture_cdf(mix, t)).statistic < 0.01
    single = sample_mixture(BetaMixture.single(2, 3), RngStream(2), size=10)
    direct = np.clip(RngStream(2).generator.beta(2, 3, size=10), 0, 1)
    np.testing.assert_allclose(single, direct)


def test_prior_predictive(map_prior_example):
    t = prior_predictive_pmf(BetaMixture.single(1, 1), 10)
    np.testing.assert_allclose(t.pmf, 1 / 11, atol=1e-12)
    p = prior_predictive_pmf(map_prior_example, 50)
    assert p.pmf.sum() == pytest.approx(1, abs=1e-10)
    assert 1 <= int(np.argmax(p.pmf)) <= 4
    lo, hi = p.central_range
    assert p.pmf[(p.y >= lo) & (p.y <= hi)].sum() >= 0.95


def test_weight_curve(map_prior_example):
    y = np.arange(51)
    w2 = robust_weight_curve(map_prior_example, 50, 0.2, y)
    w5 = robust_weight_curve(map_prior_example, 50, 0.5, y)
    unsaturated = w2 < 1 - 1e-12
    assert unsaturated[:20].all()
    assert np.all(w5[unsaturated] > w2[unsaturated]) and np.all(w5 >= w2)
    # down-weighting starts at 7 findings
    assert w2[6] <= 0.2 < w2[7]
    np.testing.assert_array_equal(robust_weight_curve(map_prior_example, 50, 0.0, y), 0)
    with pytest.raises(ValueError):
        robust_weight_curve(robustify(map_prior_example, 0.2), 50, 0.2, y)


def test_prediction_interval_efsa_like(efsa_like_hcd):
    lo, hi, prior = prediction_interval_beta_binomial(efsa_like_hcd, 47, 0.95, RngStream(1))
    assert prior.meta["rho_clamped"]
    assert lo == 0.0
    assert abs(hi - 0.125) <= 1 / 47 + 1e-12


def test_prediction_interval_collapses_to_binomial():
    hcd = HistoricalControlSet.from_counts([100] * 200, [1000] * 200)
    lo, hi, _ = prediction_interval_beta_binomial(hcd, 50, 0.95, RngStream(2))
    assert lo * 50 == stats.binom.ppf(0.025, 50, 0.1)
    assert hi * 50 == stats.binom.ppf(0.975, 50, 0.1)


def test_prediction_interval_coverage():
    rng = np.random.default_rng(7)
    hits = 0
    R = 400
    for r in range(R):
        p = rng.beta(2, 18, size=11)
        y = rng.binomial(50, p)
        hcd = HistoricalControlSet.from_counts(y[:10], [50] * 10)
        lo, hi, _ = prediction_interval_beta_binomial(hcd, 50, 0.95, RngStream(3, (r,)))
        hits += lo <= y[10] / 50 <= hi
    assert hits / R >= 0.9
