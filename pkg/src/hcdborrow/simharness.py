"""Monte-Carlo estimation of familywise error rate and any-pair power.

Every replicate of a cell draws one dataset that all methods share.  Streams
are keyed by (cell index, replicate index, purpose), and replicates are
processed in fixed blocks, so results do not depend on the number of workers.
"""
from __future__ import annotations

import csv
import enum
import io
import itertools
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .distributions import RngStream
from .freq import (fit_log_binomial_glm, fit_regularized_glm, pool_naive, simultaneous_lower_rr_limits,
                   test_then_pool)
from .inference import SimultaneousLimits, bayesian_limits, decide
from .model import CurrentTrial, HistoricalControlSet, InvalidScenarioError, ScenarioConfig, sample_dataset
from .priors import BetaMixture, NnhmConfig, map_prior_batch, mom_beta_prior, robustify


class MethodId(str, enum.Enum):
    GLM = "GLM"
    BGLM = "BGLM"
    NAIVE_POOL = "NAIVE_POOL"
    TAP = "TAP"
    NAIVE_POOL_B = "NAIVE_POOL_B"
    TAP_B = "TAP_B"
    BETA11 = "BETA11"
    EMP_BAYES = "EMP_BAYES"
    EMP_BAYES_ROBUST = "EMP_BAYES_ROBUST"
    MAP = "MAP"
    MAP_ROBUST = "MAP_ROBUST"

    def __str__(self):
        return self.value


ALL_METHODS = tuple(MethodId)
FREQUENTIST = (MethodId.GLM, MethodId.BGLM, MethodId.NAIVE_POOL, MethodId.TAP, MethodId.NAIVE_POOL_B,
               MethodId.TAP_B)
BAYESIAN = (MethodId.BETA11, MethodId.EMP_BAYES, MethodId.EMP_BAYES_ROBUST, MethodId.MAP, MethodId.MAP_ROBUST)

# stream purposes below each replicate's path
_DATA, _POSTERIOR, _MVN, _MCMC = 0, 1, 2, 3

#: per-replicate outcome codes
NOT_CONVERGED = -1

MethodLike = Union[MethodId, str, Callable]


@dataclass(frozen=True)
class HarnessConfig:
    """Tuning of the harness; the EM settings are looser than the library defaults for speed."""

    B: int = 4000
    alpha: float = 0.05
    w_rob: float = 0.2
    tap_alpha: float = 0.05
    nnhm: NnhmConfig = field(default_factory=NnhmConfig)
    K_max: int = 3
    em_starts: int = 2
    em_tol: float = 1e-3
    em_max_iter: int = 300
    em_max_draws: int = 1000
    block_size: int = 250


@dataclass
class CellResult:
    scenario: ScenarioConfig
    method: str
    S: int
    S_converged: int
    rate: Optional[float]
    mc_se: Optional[float]
    kind: str
    diagnostic: str = ""

    def row(self) -> dict:
        d = self.scenario.as_dict()
        d.update(method=self.method, S=self.S, S_converged=self.S_converged,
                 rate="NA" if self.rate is None else repr(float(self.rate)),
                 mc_se="NA" if self.mc_se is None else repr(float(self.mc_se)), kind=self.kind)
        return d


RESULT_COLUMNS = ("H", "pi", "rho", "n_h", "M", "n0", "n_m", "delta", "Delta_M", "method", "S", "S_converged",
                  "rate", "mc_se", "kind")


def estimate_rate(indicators, complement: bool = False) -> Tuple[float, float]:
    """Mean of 0/1 indicators (or one minus it) with its binomial Monte-Carlo error."""
    x = np.asarray(indicators, dtype=float)
    if x.size == 0:
        raise ValueError("no indicators to average")
    r = float(x.mean())
    if complement:
        r = 1.0 - r
    return r, math.sqrt(r * (1 - r) / x.size)


def method_name(m: MethodLike) -> str:
    if isinstance(m, MethodId):
        return m.value
    if isinstance(m, str):
        return MethodId(m).value
    return getattr(m, "method_name", getattr(m, "__name__", repr(m)))


def _as_method(m: MethodLike):
    if isinstance(m, str) and not isinstance(m, MethodId):
        return MethodId(m)
    return m


def _freq_limits(m: MethodId, hcd, trial, cfg: HarnessConfig, stream) -> SimultaneousLimits:
    if m in (MethodId.GLM, MethodId.BGLM):
        control = trial.control
    elif m in (MethodId.NAIVE_POOL, MethodId.NAIVE_POOL_B):
        control = pool_naive(trial, hcd)
    else:
        control = test_then_pool(trial, hcd, cfg.tap_alpha)
    fitter = fit_log_binomial_glm if m in (MethodId.GLM, MethodId.NAIVE_POOL, MethodId.TAP) else fit_regularized_glm
    fit = fitter(control, trial)
    return simultaneous_lower_rr_limits(fit, 1 - cfg.alpha, stream, method="auto")


def _outcome(lim: Optional[SimultaneousLimits]) -> int:
    if lim is None or not lim.valid or not np.all(np.isfinite(lim.lower)):
        return NOT_CONVERGED
    return int(decide(lim)[1])


def _run_block(args) -> np.ndarray:
    """Outcomes (any-rejection flag or NOT_CONVERGED) for one block of one cell."""
    scenario, cell_index, reps, methods, cfg, master_seed = args
    methods = [_as_method(m) for m in methods]
    out = np.full((len(reps), len(methods)), NOT_CONVERGED, dtype=np.int8)
    base = [RngStream(master_seed, (cell_index, r)) for r in reps]
    data = [sample_dataset(scenario, s.child(_DATA)) for s in base]
    need_map = any(m in (MethodId.MAP, MethodId.MAP_ROBUST) for m in methods)
    maps: List[Optional[BetaMixture]] = [None] * len(reps)
    if need_map:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            maps = map_prior_batch([d[0] for d in data], cfg.nnhm, [s.child(_MCMC) for s in base],
                                   K_max=cfg.K_max, n_starts=cfg.em_starts, em_max_draws=cfg.em_max_draws,
                                   em_tol=cfg.em_tol, em_max_iter=cfg.em_max_iter)
    beta11 = BetaMixture.single(1.0, 1.0)
    for i, ((hcd, trial), s) in enumerate(zip(data, base)):
        priors: Dict[MethodId, Optional[BetaMixture]] = {}
        for j, m in enumerate(methods):
            try:
                if callable(m) and not isinstance(m, MethodId):
                    lim = m(hcd, trial, s.child(_POSTERIOR))
                elif m in FREQUENTIST:
                    lim = _freq_limits(m, hcd, trial, cfg, s.child(_MVN))
                else:
                    prior = _bayes_prior(m, hcd, maps[i], cfg, priors, beta11)
                    lim = None if prior is None else bayesian_limits(trial, prior, cfg.alpha, cfg.B,
                                                                    s.child(_POSTERIOR))
                out[i, j] = _outcome(lim)
            except (ArithmeticError, ValueError, np.linalg.LinAlgError):
                out[i, j] = NOT_CONVERGED
    return out


def _bayes_prior(m, hcd, map_fit, cfg, cache, beta11):
    if m in cache:
        return cache[m]
    if m is MethodId.BETA11:
        p = beta11
    elif m in (MethodId.EMP_BAYES, MethodId.EMP_BAYES_ROBUST):
        if MethodId.EMP_BAYES not in cache:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                cache[MethodId.EMP_BAYES] = mom_beta_prior(hcd)
        p = cache[MethodId.EMP_BAYES]
        if m is MethodId.EMP_BAYES_ROBUST:
            p = robustify(p, cfg.w_rob)
    else:
        if map_fit is None or not map_fit.meta.get("converged", False):
            p = None
        else:
            p = map_fit if m is MethodId.MAP else robustify(map_fit, cfg.w_rob)
    cache[m] = p
    return p


def _blocks(S: int, size: int) -> List[range]:
    return [range(i, min(S, i + size)) for i in range(0, S, size)]


def simulate_outcomes(grid: Sequence[ScenarioConfig], S: int, methods: Sequence[MethodLike], master_seed: int,
                      cfg: HarnessConfig = HarnessConfig(), workers: int = 1) -> List[np.ndarray]:
    """Per-cell S x len(methods) outcome matrices (1 reject, 0 no reject, -1 not converged)."""
    if S < 1:
        raise ValueError("S must be >= 1")
    methods = list(methods)
    if not methods:
        raise ValueError("no methods requested")
    tasks = []
    for c, scen in enumerate(grid):
        for blk in _blocks(S, cfg.block_size):
            tasks.append((scen, c, list(blk), methods, cfg, int(master_seed)))
    if workers <= 1:
        results = [_run_block(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_block, tasks))
    per_cell: List[List[np.ndarray]] = [[] for _ in grid]
    for t, r in zip(tasks, results):
        per_cell[t[1]].append(r)
    return [np.concatenate(blocks, axis=0) for blocks in per_cell]


def _summarize(grid, outcomes, methods, S, kind) -> List[CellResult]:
    res = []
    for scen, out in zip(grid, outcomes):
        for j, m in enumerate(methods):
            col = out[:, j]
            used = col[col != NOT_CONVERGED]
            name = method_name(m)
            if used.size == 0:
                res.append(CellResult(scen, name, S, 0, None, None, kind,
                                      diagnostic=f"{name} failed on all {S} replicates"))
                continue
            rate, se = estimate_rate(used)
            res.append(CellResult(scen, name, S, int(used.size), rate, se, kind))
    return res


def run_fwer_grid(grid: Sequence[ScenarioConfig], S: int, methods: Sequence[MethodLike] = ALL_METHODS,
                  master_seed: int = 1, cfg: HarnessConfig = HarnessConfig(), workers: int = 1) -> List[CellResult]:
    """FWER per (cell, method): share of converged replicates with at least one rejection."""
    for g in grid:
        if g.Delta_M != 1:
            raise InvalidScenarioError("FWER cells need Delta_M = 1")
    out = simulate_outcomes(grid, S, methods, master_seed, cfg, workers)
    return _summarize(grid, out, list(methods), S, "fwer")


def run_app_grid(grid: Sequence[ScenarioConfig], S: int, methods: Sequence[MethodLike] = ALL_METHODS,
                 master_seed: int = 1, cfg: HarnessConfig = HarnessConfig(), workers: int = 1) -> List[CellResult]:
    """Any-pair power per (cell, method): share of converged replicates with at least one rejection."""
    for g in grid:
        if g.delta != 1:
            raise InvalidScenarioError("APP cells need delta = 1")
    out = simulate_outcomes(grid, S, methods, master_seed, cfg, workers)
    return _summarize(grid, out, list(methods), S, "app")


def results_to_csv(results: Iterable[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(r.row())
    return buf.getvalue()


def write_results(results: Iterable[CellResult], path) -> None:
    with open(path, "w", newline="") as f:
        f.write(results_to_csv(results))


# --------------------------------------------------------------------------- grids

FULL_GRID = {
    "H": [5, 10, 20, 100],
    "pi": [0.01, 0.1, 0.2, 0.3, 0.4, 0.5],
    "rho": [1e-5, 0.01, 0.04, 0.08],
    "n_h": [50],
    "M": [4],
    "n0": [10, 50],
    "n_m": [50],
    "delta": [1.0, 1.25, 1.5],
    "Delta_M": [1.25, 1.5, 1.75],
}

BOLD = dict(FULL_GRID, H=[5, 10, 20], rho=[1e-5, 0.01, 0.04], n0=[50])

REDUCED = dict(H=[20], pi=[0.1, 0.5], rho=[0.01], n_h=[50], M=[4], n0=[50], n_m=[50], delta=[1.0],
               Delta_M=[1.5])

_GRID_KEYS = ("H", "pi", "rho", "n_h", "M", "n0", "n_m", "delta", "Delta_M")


def expand_grid(spec: dict, kind: str) -> List[ScenarioConfig]:
    """Cartesian product of a parameter dict; ``kind`` fixes Delta_M (fwer) or delta (app) to 1."""
    if kind not in ("fwer", "app"):
        raise ValueError("kind must be 'fwer' or 'app'")
    unknown = set(spec) - set(_GRID_KEYS)
    if unknown:
        raise InvalidScenarioError(f"unknown grid parameters: {sorted(unknown)}")
    defaults = dict(H=[20], pi=[0.1], rho=[0.01], n_h=[50], M=[4], n0=[50], n_m=[50], delta=[1.0],
                    Delta_M=[1.5])
    vals = {k: list(spec.get(k, defaults[k])) for k in _GRID_KEYS}
    if kind == "fwer":
        vals["Delta_M"] = [1.0]
    else:
        vals["delta"] = [1.0]
    for k, v in vals.items():
        if not v:
            raise InvalidScenarioError(f"grid parameter {k} has no values")
    cells = []
    for combo in itertools.product(*(vals[k] for k in _GRID_KEYS)):
        cells.append(ScenarioConfig.make(**dict(zip(_GRID_KEYS, combo))))
    return cells


def named_grid(name: str, kind: str) -> List[ScenarioConfig]:
    """Grids by name ("full", alias "paper" or "paper-grid"; "bold"; "reduced") or a JSON file of parameter lists."""
    specs = {"full": FULL_GRID, "paper": FULL_GRID, "paper-grid": FULL_GRID, "bold": BOLD, "reduced": REDUCED}
    if name in specs:
        return expand_grid(specs[name], kind)
    try:
        with open(name) as f:
            spec = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidScenarioError(f"cannot read grid spec {name!r}: {e}") from None
    if not isinstance(spec, dict):
        raise InvalidScenarioError("grid spec must be a JSON object of parameter lists")
    spec = {k: (v if isinstance(v, list) else [v]) for k, v in spec.items()}
    return expand_grid(spec, kind)
