"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line that is repeated in the pytest
terminal summary.  Simulation criteria use fixed master seeds.  The any-pair
power check on the full bold grid is expensive; by default a subset of cells
runs, and ``HCDBORROW_FULL_ACCEPTANCE=1`` switches to every bold cell.
"""
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from hcdborrow.inference import besag_lower_limits
from hcdborrow.model import ControlGroup, ScenarioConfig
from hcdborrow.posterior import ess_elir, mixture_quantile, update
from hcdborrow.priors import BetaMixture, robustify
from hcdborrow.simharness import (BOLD, HarnessConfig, MethodId, expand_grid, named_grid, run_app_grid,
                                  run_fwer_grid)


ROOT = Path(__file__).resolve().parents[1]
FULL = os.environ.get("HCDBORROW_FULL_ACCEPTANCE") == "1"
CFG = HarnessConfig(B=4000)
M = MethodId


def fmt(xs):
    return "(" + ", ".join(f"{x:.4f}" for x in xs) + ")"


def test_criterion_1_robustification_identity(map_prior_example, acceptance):
    rob = robustify(map_prior_example, 0.2)
    ok = np.all(np.abs(rob.weights - [0.6494, 0.1506, 0.2]) <= 5e-5)
    ok &= np.array_equal(rob.a[:2], map_prior_example.a) and np.array_equal(rob.b[:2], map_prior_example.b)
    runs = []
    for _ in range(50):
        t = time.perf_counter()
        robustify(map_prior_example, 0.2)
        runs.append(time.perf_counter() - t)
    ok &= min(runs) < 1e-3
    assert acceptance(1, bool(ok), f"weights {fmt(rob.weights)}, shapes unchanged, {min(runs) * 1e6:.0f} us")


def test_criterion_2_posterior_weights(robust_map_prior, acceptance):
    post = update(robust_map_prior, ControlGroup(1, 10))
    target = np.array([0.7688, 0.1720, 0.0591])
    shapes_ok = np.array_equal(post.a, robust_map_prior.a + 1) and np.array_equal(post.b, robust_map_prior.b + 9)
    weights_ok = np.all(np.abs(post.weights - target) <= 0.002)
    detail = (f"weights {fmt(post.weights)} vs {fmt(target)}; shapes a+1/b+9 "
              f"{'exact' if shapes_ok else 'WRONG'}; the published weights match n=11 "
              f"{fmt(update(robust_map_prior, ControlGroup(1, 11)).weights)}")
    assert acceptance(2, bool(weights_ok and shapes_ok), detail)


def test_criterion_3_ess_anchors(robust_map_prior, acceptance):
    grid = [(1.05, 30), (1.2, 80), (1.5, 1.5), (2, 30), (23.1972, 411.6442), (400, 600), (3, 1e4)]
    worst = max(abs(ess_elir(BetaMixture.single(a, b)) / (a + b) - 1) for a, b in grid)
    prior_ess = ess_elir(robust_map_prior)
    post = update(robust_map_prior, ControlGroup(1, 10))
    post_ess = ess_elir(post)
    median = mixture_quantile(post, 0.5)
    ok = worst <= 0.005 and abs(prior_ess - 227) <= 5 and abs(post_ess - 285) <= 8 and abs(median - 0.055) <= 0.005
    assert acceptance(3, ok, f"max rel. error vs a+b {worst:.1e}; prior ESS {prior_ess:.1f}; "
                             f"posterior ESS {post_ess:.1f}; posterior median {median:.4f}")


def test_criterion_4_rank_algorithm(acceptance):
    d1 = [0.5, 1.0, 1.5, 2.0, 2.5]
    hand = besag_lower_limits(np.c_[d1, d1[::-1]], 0.2)
    # hand execution: R = [5, 4, 3, 4, 5], q = 4, R^(4) = 5, so order statistic 5 + 1 - 5 = 1
    hand_ok = (hand.info["q"], hand.info["R_q"], hand.info["order_stat"]) == (4, 5, 1) \
        and np.array_equal(hand.lower, [0.5, 0.5])

    rng = np.random.default_rng(20240601)
    x1 = rng.lognormal(size=10_000)
    one = besag_lower_limits(x1, 0.05)
    m1_ok = one.lower[0] == np.sort(x1)[10_000 + 1 - 9500 - 1]

    x = rng.lognormal(size=(10_000, 4)) * rng.lognormal(size=(10_000, 1))
    cover_err = 0.0
    for alpha in (0.05, 0.1, 0.2):
        lim = besag_lower_limits(x, alpha)
        cover_err = max(cover_err, abs(np.mean(np.all(x >= lim.lower, axis=1)) - (1 - alpha)))
    times = []
    for _ in range(5):
        t = time.perf_counter()
        besag_lower_limits(x, 0.05)
        times.append(time.perf_counter() - t)
    ok = hand_ok and m1_ok and cover_err <= 2e-3 and max(times) < 0.1
    assert acceptance(4, ok, f"hand example limits {fmt(hand.lower)} (q=4, R^(q)=5); M=1 exact: {m1_ok}; "
                             f"max coverage error {cover_err:.1e}; slowest call {max(times) * 1e3:.1f} ms")


# --------------------------------------------------------------------------- FWER

S_FWER = 2000
SEED = 2024


def _fwer(grid, methods):
    res = run_fwer_grid(grid, S_FWER, methods, master_seed=SEED, cfg=CFG)
    return {(r.scenario, r.method): r for r in res}


def _describe(rs):
    return "; ".join(f"{r.method}@pi={r.scenario.pi:g} {r.rate:.4f}+-{r.mc_se:.4f} (S={r.S_converged})"
                     for r in rs)


def test_criterion_5a_no_borrowing_near_nominal(acceptance):
    grid = [ScenarioConfig.make(H=20, pi=0.5, rho=1e-5, n0=50)]
    res = list(_fwer(grid, [M.BETA11, M.GLM]).values())
    ok = all(r.rate is not None and 0.03 <= r.rate <= 0.07 for r in res)
    assert acceptance("5a", ok, _describe(res))


def test_criterion_5b_naive_pooling_inflates(acceptance):
    grid = [ScenarioConfig.make(H=20, pi=0.2, rho=0.04, n0=50)]
    res = list(_fwer(grid, [M.NAIVE_POOL]).values())
    ok = res[0].rate is not None and res[0].rate > 0.10
    assert acceptance("5b", ok, _describe(res))


def test_criterion_5c_robust_priors_control_fwer(acceptance):
    grid = [ScenarioConfig.make(H=20, pi=p, rho=0.01, n0=10) for p in (0.1, 0.2)]
    res = list(_fwer(grid, [M.EMP_BAYES_ROBUST, M.MAP_ROBUST]).values())
    ok = all(r.rate is not None and 0.02 <= r.rate <= 0.09 for r in res)
    assert acceptance("5c", ok, _describe(res))


def test_criterion_5d_drift(acceptance):
    grid = [ScenarioConfig.make(H=20, pi=0.5, rho=0.01, n0=10, delta=1.5)]
    res = _fwer(grid, [M.EMP_BAYES_ROBUST, M.MAP_ROBUST, M.NAIVE_POOL])
    rates = {m: r.rate for (_, m), r in res.items()}
    robust = [rates["EMP_BAYES_ROBUST"], rates["MAP_ROBUST"]]
    ok = all(r is not None and r <= 0.35 for r in robust) and rates["NAIVE_POOL"] > max(robust)
    assert acceptance("5d", ok, _describe(res.values()))


# --------------------------------------------------------------------------- any-pair power

S_APP = 2000 if FULL else 500
# the robust-vs-GLM power ratio sits near its 0.9 threshold at pi = 0.5, so 6c needs more replicates
S_RATIO = 2000
S_RATIO_MAP = 2000 if FULL else 500


def test_criterion_6a_glm_power_rare_events(acceptance):
    grid = expand_grid(dict(H=[20], pi=[0.01], rho=BOLD["rho"], n0=[50], Delta_M=[1.25, 1.5, 1.75]), "app")
    res = run_app_grid(grid, S_APP, [M.GLM], master_seed=SEED, cfg=CFG)
    worst = max(r.rate for r in res)
    assert acceptance("6a", worst <= 0.25, f"GLM APP at pi=0.01 over {len(res)} cells, max {worst:.4f} (S={S_APP})")


def test_criterion_6b_beta11_not_below_glm(acceptance):
    grid = expand_grid(dict(H=[20], pi=[0.01, 0.1], rho=BOLD["rho"], n0=[50], Delta_M=[1.25, 1.5, 1.75]), "app")
    res = run_app_grid(grid, S_APP, [M.GLM, M.BETA11], master_seed=SEED, cfg=CFG)
    by = {}
    for r in res:
        by.setdefault(r.scenario, {})[r.method] = r.rate
    gaps = [v["BETA11"] - v["GLM"] for v in by.values()]
    assert acceptance("6b", min(gaps) >= 0, f"BETA11 minus GLM APP over {len(gaps)} cells: min {min(gaps):+.4f}, "
                                           f"max {max(gaps):+.4f} (S={S_APP}, common seeds)")


def _bold_power_cells():
    if FULL:
        return dict(H=BOLD["H"], pi=BOLD["pi"], rho=[1e-5, 0.01], Delta_M=BOLD["Delta_M"])
    return dict(H=[20], pi=[0.01, 0.1, 0.3, 0.5], rho=[1e-5, 0.01], Delta_M=[1.5])


def test_criterion_6c_robust_priors_keep_power(acceptance):
    cells = _bold_power_cells()
    ref = run_app_grid(expand_grid(dict(cells, n0=[50]), "app"), S_RATIO, [M.GLM], master_seed=SEED, cfg=CFG)
    eb = run_app_grid(expand_grid(dict(cells, n0=[10]), "app"), S_RATIO, [M.EMP_BAYES_ROBUST], master_seed=SEED,
                      cfg=CFG)
    mp = run_app_grid(expand_grid(dict(cells, n0=[10]), "app"), S_RATIO_MAP, [M.MAP_ROBUST], master_seed=SEED,
                      cfg=CFG)
    ratios = []
    failures = []
    for g, e, m in zip(ref, eb, mp):
        for r in (e, m):
            if g.rate == 0:
                ratio = np.inf if (r.rate or 0) > 0 else 1.0
            else:
                ratio = (r.rate or 0.0) / g.rate
            ratios.append(ratio)
            if ratio < 0.9:
                failures.append(f"{r.method}@H={g.scenario.H},pi={g.scenario.pi:g},rho={g.scenario.rho:g},"
                                f"DM={g.scenario.Delta_M:g}: {r.rate:.3f} vs GLM {g.rate:.3f}")
    scope = "all bold cells" if FULL else f"{len(ref)}-cell subset"
    detail = (f"{scope}, min APP ratio to GLM(n0=50) {min(ratios):.3f} (S={S_RATIO}, MAP_ROBUST S={S_RATIO_MAP})"
              + (f"; below 0.9: {'; '.join(failures)}" if failures else ""))
    assert acceptance("6c", not failures, detail)


# --------------------------------------------------------------------------- property suites and scope

PROPERTY_TESTS = [
    "tests/test_properties.py",
    "tests/test_simharness.py::test_results_byte_identical_across_worker_counts",
]


def test_criterion_7_property_suites(acceptance):
    t = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_TESTS],
                          cwd=ROOT, capture_output=True, text=True)
    elapsed = time.perf_counter() - t
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and elapsed < 600
    assert acceptance(7, ok, f"{summary} in {elapsed:.0f} s")


def test_criterion_8_scope_documented(acceptance):
    # the full figure grids are an offline command; here we only check that they materialize
    fwer_cells = len(named_grid("full", "fwer"))
    app_cells = len(named_grid("full", "app"))
    readme = (ROOT / "README.md").read_text()
    ok = fwer_cells > 0 and app_cells > 0 and "Not reproduced" in readme
    assert acceptance(8, ok, f"offline grids: {fwer_cells} FWER and {app_cells} APP cells via "
                             f"'hcdborrow simulate --grid full'; limits listed in README")
