"""A small FWER and any-pair-power run; the full grids go through `hcdborrow simulate --grid full`.

Run: python3 demos/05_small_simulation.py   (about a minute on one core)
"""
from hcdborrow.model import ScenarioConfig
from hcdborrow.simharness import HarnessConfig, MethodId, results_to_csv, run_app_grid, run_fwer_grid

methods = [MethodId.GLM, MethodId.NAIVE_POOL, MethodId.BETA11, MethodId.EMP_BAYES_ROBUST]
cfg = HarnessConfig(B=2000)
null = [ScenarioConfig.make(H=20, pi=0.2, rho=0.04)]
alt = [ScenarioConfig.make(H=20, pi=0.2, rho=0.01, Delta_M=1.75)]
print(results_to_csv(run_fwer_grid(null, 200, methods, master_seed=5, cfg=cfg)))
print(results_to_csv(run_app_grid(alt, 200, methods, master_seed=5, cfg=cfg)))
