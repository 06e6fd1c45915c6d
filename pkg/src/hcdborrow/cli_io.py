"""Study-file parsing, analysis and planning reports, and the command-line entry point.

A study file is comma-separated text with the header ``section,id,events,size``
and sections ``historical``, ``control`` (exactly one row) and ``treatment``.
Blank lines and lines starting with ``#`` are ignored.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .distributions import RngStream
from .freq import fit_log_binomial_glm, fit_regularized_glm, pool_naive, simultaneous_lower_rr_limits, test_then_pool
from .inference import DEFAULT_B, bayesian_limits, decide
from .model import ControlGroup, CurrentTrial, HistoricalControlSet, InvalidScenarioError
from .posterior import (NumericalError, ess_elir, prediction_interval_beta_binomial, prior_predictive_pmf,
                        robust_weight_curve, summarize, update)
from .priors import BetaMixture, NnhmConfig, map_prior, mom_beta_prior, robustify
from .simharness import (ALL_METHODS, HarnessConfig, MethodId, named_grid, run_app_grid, run_fwer_grid,
                         write_results)

HEADER = ("section", "id", "events", "size")
SECTIONS = ("historical", "control", "treatment")

# stream paths below the user seed
STREAM_POSTERIOR = (1,)
STREAM_MCMC = (3,)
STREAM_SCREEN = (4,)


class StudyFileError(ValueError):
    """Malformed study file; the message names the offending line."""


@dataclass
class StudyFile:
    historical: HistoricalControlSet
    trial: Optional[CurrentTrial]
    historical_ids: Tuple[str, ...]
    control_id: Optional[str] = None
    arm_ids: Tuple[str, ...] = ()


def _parse_rows(text: str, source: str):
    rows = []
    lines = text.splitlines()
    header_seen = False
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in next(csv.reader([line]))]
        if not header_seen:
            if tuple(f.lower() for f in fields) != HEADER:
                raise StudyFileError(f"{source}:{lineno}: expected header {','.join(HEADER)}")
            header_seen = True
            continue
        if len(fields) != 4:
            raise StudyFileError(f"{source}:{lineno}: expected 4 fields, got {len(fields)}")
        section, ident, ev, sz = fields
        section = section.lower()
        if section not in SECTIONS:
            raise StudyFileError(f"{source}:{lineno}: unknown section {section!r}")
        try:
            events, size = int(ev), int(sz)
        except ValueError:
            raise StudyFileError(f"{source}:{lineno}: events and size must be integers") from None
        if events < 0 or size < 1:
            raise StudyFileError(f"{source}:{lineno}: counts must be non-negative with size >= 1")
        if events > size:
            raise StudyFileError(f"{source}:{lineno}: row {ident!r} has events {events} > size {size}")
        rows.append((lineno, section, ident, events, size))
    if not header_seen:
        raise StudyFileError(f"{source}: empty study file")
    return rows


def parse_study_text(text: str, source: str = "<text>", require_trial: bool = True) -> StudyFile:
    rows = _parse_rows(text, source)
    seen: Dict[Tuple[str, str], int] = {}
    for lineno, section, ident, _, _ in rows:
        key = ("hist" if section == "historical" else "trial", ident)
        if key in seen:
            raise StudyFileError(f"{source}:{lineno}: duplicate id {ident!r} (first on line {seen[key]})")
        seen[key] = lineno
    hist = [r for r in rows if r[1] == "historical"]
    ctrl = [r for r in rows if r[1] == "control"]
    arms = [r for r in rows if r[1] == "treatment"]
    if not hist:
        raise StudyFileError(f"{source}: no historical rows")
    hcd = HistoricalControlSet.from_counts([r[3] for r in hist], [r[4] for r in hist])
    hist_ids = tuple(r[2] for r in hist)
    if not require_trial and not ctrl and not arms:
        return StudyFile(hcd, None, hist_ids)
    if not ctrl:
        raise StudyFileError(f"{source}: missing control row")
    if len(ctrl) > 1:
        raise StudyFileError(f"{source}:{ctrl[1][0]}: more than one control row")
    if not arms:
        raise StudyFileError(f"{source}: at least one treatment arm is required")
    c = ctrl[0]
    trial = CurrentTrial.from_counts(c[3], c[4], [r[3] for r in arms], [r[4] for r in arms])
    return StudyFile(hcd, trial, hist_ids, c[2], tuple(r[2] for r in arms))


def parse_study_file(path, require_trial: bool = True) -> StudyFile:
    """Read and validate a study file; ``(sf.historical, sf.trial)`` are the model structures."""
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise StudyFileError(f"cannot read {path}: {e}") from None
    return parse_study_text(text, str(path), require_trial)


def emit_study_text(sf: StudyFile) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for ident, g in zip(sf.historical_ids, sf.historical.groups):
        w.writerow(("historical", ident, g.events, g.size))
    if sf.trial is not None:
        w.writerow(("control", sf.control_id, sf.trial.control.events, sf.trial.control.size))
        for ident, g in zip(sf.arm_ids, sf.trial.treatments):
            w.writerow(("treatment", ident, g.events, g.size))
    return buf.getvalue()


def _dataset_dict(sf: StudyFile) -> dict:
    d = {"historical": [{"id": i, "events": g.events, "size": g.size}
                        for i, g in zip(sf.historical_ids, sf.historical.groups)]}
    if sf.trial is not None:
        d["control"] = {"id": sf.control_id, "events": sf.trial.control.events, "size": sf.trial.control.size}
        d["treatments"] = [{"id": i, "events": g.events, "size": g.size}
                           for i, g in zip(sf.arm_ids, sf.trial.treatments)]
    return d


def dataset_from_report(report: dict) -> StudyFile:
    """Rebuild the analysed data from a report's embedded dataset."""
    d = report["dataset"]
    hist = d["historical"]
    hcd = HistoricalControlSet.from_counts([r["events"] for r in hist], [r["size"] for r in hist])
    ids = tuple(r["id"] for r in hist)
    if "control" not in d:
        return StudyFile(hcd, None, ids)
    c, arms = d["control"], d["treatments"]
    trial = CurrentTrial.from_counts(c["events"], c["size"], [a["events"] for a in arms], [a["size"] for a in arms])
    return StudyFile(hcd, trial, ids, c["id"], tuple(a["id"] for a in arms))


#: columns an annex-style table must provide for :func:`convert_annex_rows`
ANNEX_COLUMNS = ("study", "group", "n_animals", "n_affected")


def convert_annex_rows(rows: Sequence[dict]) -> str:
    """Convert annex-style records into study-file text.

    ``group`` is ``"historical"`` for past control groups, ``"control"`` for the
    concurrent control and any other label for a treatment arm (the label is
    used as the arm id).
    """
    out = [",".join(HEADER)]
    for i, r in enumerate(rows, start=1):
        missing = [c for c in ANNEX_COLUMNS if c not in r]
        if missing:
            raise StudyFileError(f"annex record {i}: missing columns {missing}")
        g = str(r["group"]).strip()
        section = g.lower() if g.lower() in ("historical", "control") else "treatment"
        ident = r["study"] if section != "treatment" else g
        out.append(f"{section},{ident},{int(r['n_affected'])},{int(r['n_animals'])}")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------- reports

def _mixture_table(mix: BetaMixture) -> List[dict]:
    return [{"weight": float(w), "a": float(a), "b": float(b)} for w, a, b in mix.components()]


def _prior_block(mix: BetaMixture, data: ControlGroup) -> dict:
    post = update(mix, data)
    block = {"prior": _mixture_table(mix), "posterior": _mixture_table(post)}
    for key, m in (("prior", mix), ("posterior", post)):
        try:
            block[f"{key}_summary"] = summarize(m)
        except NumericalError as e:
            block[f"{key}_summary"] = {"error": str(e)}
    block["meta"] = {k: v for k, v in mix.meta.items() if k != "loglik_trace"}
    return block


def _arm_rows(lim, arm_ids):
    rejected, _ = decide(lim)
    est = lim.estimate if lim.estimate is not None else np.full(len(arm_ids), np.nan)
    return [{"arm": a, "estimate": float(e), "lower": float(l), "rejected": bool(r)}
            for a, e, l, r in zip(arm_ids, est, lim.lower, rejected)]


def analyze(sf: StudyFile, methods: Sequence[MethodId] = ALL_METHODS, alpha: float = 0.05, w_rob: float = 0.2,
            seed: int = 1, B: int = DEFAULT_B, nnhm: NnhmConfig = NnhmConfig(), level: float = 0.95) -> dict:
    """Drift screen, prior fits and simultaneous lower limits for every requested method.

    Bayesian methods all draw posterior samples from the stream
    ``RngStream(seed, STREAM_POSTERIOR)``; a failing method is reported with
    its error and does not affect the others.
    """
    if sf.trial is None:
        raise StudyFileError("analysis needs a control row and treatment arms")
    hcd, trial = sf.historical, sf.trial
    report = {"software": {"name": "hcdborrow", "version": __version__}, "seed": int(seed), "alpha": alpha,
              "w_rob": w_rob, "B": B, "dataset": _dataset_dict(sf), "notes": []}

    # drift screen
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            lo, hi, pi_prior = prediction_interval_beta_binomial(hcd, trial.control.size, level,
                                                                 RngStream(seed, STREAM_SCREEN))
        rate = trial.control.rate
        report["screen"] = {"level": level, "lower": lo, "upper": hi, "control_rate": rate,
                            "inside": bool(lo <= rate <= hi), "stream": list(STREAM_SCREEN)}
    except (ValueError, ArithmeticError) as e:
        report["screen"] = {"error": str(e)}

    priors: Dict[str, dict] = {}
    methods_out: Dict[str, dict] = {}
    table = []
    cache: Dict[str, Optional[BetaMixture]] = {}

    def get_prior(m: MethodId) -> BetaMixture:
        if m is MethodId.BETA11:
            return BetaMixture.single(1.0, 1.0, method="beta11")
        if m in (MethodId.EMP_BAYES, MethodId.EMP_BAYES_ROBUST):
            if "mom" not in cache:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always")
                    cache["mom"] = mom_beta_prior(hcd)
                for w in caught:
                    report["notes"].append(str(w.message))
                if cache["mom"].meta.get("rho_clamped"):
                    report["notes"].append(f"ICC estimate {cache['mom'].meta['rho_hat']:.6g} clamped to "
                                           f"{cache['mom'].meta['rho_used']:g}")
            base = cache["mom"]
        else:
            if "map" not in cache:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always")
                    cache["map"] = map_prior(hcd, nnhm, RngStream(seed, STREAM_MCMC))
                for w in caught:
                    report["notes"].append(str(w.message))
                if not cache["map"].meta.get("converged", True):
                    report["notes"].append(f"MAP sampler did not reach R-hat < 1.05 "
                                           f"(max {cache['map'].meta['rhat_max']:.3f})")
            base = cache["map"]
        if m in (MethodId.EMP_BAYES_ROBUST, MethodId.MAP_ROBUST):
            return robustify(base, w_rob)
        return base

    for m in methods:
        m = MethodId(m)
        entry = {"method": m.value, "seed": int(seed)}
        try:
            if m in (MethodId.GLM, MethodId.BGLM, MethodId.NAIVE_POOL, MethodId.TAP, MethodId.NAIVE_POOL_B,
                     MethodId.TAP_B):
                control = trial.control
                if m in (MethodId.NAIVE_POOL, MethodId.NAIVE_POOL_B):
                    control = pool_naive(trial, hcd)
                elif m in (MethodId.TAP, MethodId.TAP_B):
                    control = test_then_pool(trial, hcd, alpha)
                    entry["kept_history"] = [sf.historical_ids[i] for i in control.kept_history]
                fitter = fit_log_binomial_glm if m in (MethodId.GLM, MethodId.NAIVE_POOL, MethodId.TAP) \
                    else fit_regularized_glm
                fit = fitter(control, trial)
                lim = simultaneous_lower_rr_limits(fit, 1 - alpha)
                entry.update(converged=fit.converged, boundary=fit.boundary,
                             critical_value=lim.info.get("critical_value"))
                if not lim.valid:
                    raise NumericalError(lim.info.get("reason", "invalid limits"))
            else:
                prior = get_prior(m)
                priors[m.value] = _prior_block(prior, trial.control)
                lim = bayesian_limits(trial, prior, alpha, B, RngStream(seed, STREAM_POSTERIOR))
                entry.update(stream=list(STREAM_POSTERIOR), order_stat=lim.info.get("order_stat"))
            entry["status"] = "ok"
            entry["arms"] = _arm_rows(lim, sf.arm_ids)
            entry["any_rejected"] = any(r["rejected"] for r in entry["arms"])
            for r in entry["arms"]:
                table.append(dict(method=m.value, seed=int(seed), **r))
        except (ValueError, ArithmeticError, NumericalError, np.linalg.LinAlgError) as e:
            entry.update(status="failed", error=f"{type(e).__name__}: {e}")
        methods_out[m.value] = entry
    report["priors"] = priors
    report["methods"] = methods_out
    report["table"] = table
    return report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def report_to_json(report: dict) -> str:
    return json.dumps(_jsonable(report), indent=2, sort_keys=False)


def table_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    return buf.getvalue()


def weight_column(w: float) -> str:
    """Column label for a robust weight: 0.2 -> 'w02', 0.25 -> 'w025'."""
    return "w" + repr(float(w)).replace(".", "")


def plan(hcd: HistoricalControlSet, n0: int, w_robs: Sequence[float] = (0.2, 0.5), seed: int = 1,
         prior: str = "map", nnhm: NnhmConfig = NnhmConfig(), level: float = 0.95) -> dict:
    """Posterior robust-weight curves and prior predictive for a planned control of size ``n0``."""
    if prior == "map":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            informative = map_prior(hcd, nnhm, RngStream(seed, STREAM_MCMC))
    elif prior == "mom":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            informative = mom_beta_prior(hcd)
    else:
        raise ValueError(f"unknown prior {prior!r}")
    pred = prior_predictive_pmf(informative, n0, level)
    rows = [{"y": int(y), "pmf": float(p)} for y, p in zip(pred.y, pred.pmf)]
    columns = ["y", "pmf"]
    for w in w_robs:
        curve = robust_weight_curve(informative, n0, w, pred.y)
        col = weight_column(w)
        columns.append(col)
        for r, v in zip(rows, curve):
            r[col] = float(v)
    central_col = f"in_central{int(round(level * 100))}"
    columns.append(central_col)
    for r, c in zip(rows, pred.central):
        r[central_col] = int(c)
    return {"software": {"name": "hcdborrow", "version": __version__}, "seed": int(seed), "n0": int(n0),
            "prior_method": prior, "prior": _mixture_table(informative), "ess": ess_elir(informative),
            "central_range": list(pred.central_range), "columns": columns, "rows": rows}


# --------------------------------------------------------------------------- command line

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


def _methods_arg(text: Optional[str]) -> List[MethodId]:
    if not text:
        return list(ALL_METHODS)
    out = []
    for t in text.split(","):
        t = t.strip().upper()
        try:
            out.append(MethodId(t))
        except ValueError:
            raise StudyFileError(f"unknown method {t!r}; choose from {', '.join(m.value for m in ALL_METHODS)}") \
                from None
    return out


def _write(text: str, out: Optional[str]):
    if out:
        with open(out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _cmd_analyze(args) -> int:
    sf = parse_study_file(args.file)
    report = analyze(sf, _methods_arg(args.methods), args.alpha, args.w_rob, args.seed, args.B)
    _write(report_to_json(report) + "\n", args.out)
    if args.table:
        with open(args.table, "w") as f:
            f.write(table_to_csv(report["table"], ("method", "arm", "estimate", "lower", "rejected", "seed")))
    failed = [m for m, e in report["methods"].items() if e["status"] != "ok"]
    for m in failed:
        print(f"{m}: {report['methods'][m]['error']}", file=sys.stderr)
    return EXIT_NUMERIC if failed and len(failed) == len(report["methods"]) else EXIT_OK


def _cmd_plan(args) -> int:
    sf = parse_study_file(args.file, require_trial=False)
    res = plan(sf.historical, args.n0, args.w_rob, args.seed, args.prior)
    _write(table_to_csv(res["rows"], res["columns"]), args.out)
    lo, hi = res["central_range"]
    print(f"central predictive set: {lo}..{hi} of {args.n0}; prior ESS {res['ess']:.1f}", file=sys.stderr)
    return EXIT_OK


def _cmd_simulate(args) -> int:
    grid = named_grid(args.grid, args.kind)
    methods = _methods_arg(args.methods)
    cfg = HarnessConfig(B=args.B, alpha=args.alpha, w_rob=args.w_rob)
    runner = run_fwer_grid if args.kind == "fwer" else run_app_grid
    res = runner(grid, args.S, methods, args.seed, cfg, workers=args.workers)
    if args.out:
        write_results(res, args.out)
    else:
        from .simharness import results_to_csv
        sys.stdout.write(results_to_csv(res))
    return EXIT_OK


def _load_prior(args) -> BetaMixture:
    if args.prior:
        with open(args.prior) as f:
            return BetaMixture.from_json(f.read())
    if args.a is None or args.b is None:
        raise StudyFileError("give either --prior FILE or both --a and --b")
    return BetaMixture.single(args.a, args.b)


def _cmd_fit_prior(args) -> int:
    sf = parse_study_file(args.file, require_trial=False)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if args.method == "mom":
            mix = mom_beta_prior(sf.historical)
        else:
            mix = map_prior(sf.historical, NnhmConfig(), RngStream(args.seed, STREAM_MCMC), K_max=args.k_max)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if args.w_rob > 0:
        mix = robustify(mix, args.w_rob)
    mix.meta["ess"] = ess_elir(mix)
    mix.meta["seed"] = int(args.seed)
    mix.meta["version"] = __version__
    _write(mix.to_json(indent=2) + "\n", args.out)
    return EXIT_OK


def _cmd_ess(args) -> int:
    mix = _load_prior(args)
    out = {"ess": ess_elir(mix), "prior": _mixture_table(mix)}
    if args.data:
        post = update(mix, ControlGroup(args.data[0], args.data[1]))
        out["posterior"] = _mixture_table(post)
        out["posterior_ess"] = ess_elir(post)
        out["posterior_median"] = summarize(post)["median"]
    _write(json.dumps(_jsonable(out), indent=2) + "\n", args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hcdborrow", description="Historical control borrowing for multi-arm "
                                                               "binomial studies.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, alpha=True):
        if alpha:
            sp.add_argument("--alpha", type=float, default=0.05)
        sp.add_argument("--seed", type=int, default=1)
        sp.add_argument("--out", default=None, help="output file (default: stdout)")

    a = sub.add_parser("analyze", help="simultaneous lower limits for one study")
    a.add_argument("file")
    a.add_argument("--methods", default=None, help="comma-separated method ids (default: all)")
    a.add_argument("--w-rob", type=float, default=0.2)
    a.add_argument("--B", type=int, default=DEFAULT_B, help="posterior draws")
    a.add_argument("--table", default=None, help="also write the flat limits table here")
    common(a)
    a.set_defaults(func=_cmd_analyze)

    pl = sub.add_parser("plan", help="robust-weight curves and prior predictive for a planned control")
    pl.add_argument("file")
    pl.add_argument("--n0", type=int, required=True)
    pl.add_argument("--w-rob", type=float, nargs="+", default=[0.2, 0.5])
    pl.add_argument("--prior", choices=("map", "mom"), default="map")
    common(pl, alpha=False)
    pl.set_defaults(func=_cmd_plan)

    s = sub.add_parser("simulate", help="Monte-Carlo FWER or any-pair power over a scenario grid")
    s.add_argument("--kind", choices=("fwer", "app"), required=True)
    s.add_argument("--grid", default="reduced", help="full | bold | reduced | path to a JSON grid")
    s.add_argument("--S", type=int, default=2000)
    s.add_argument("--methods", default=None)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--w-rob", type=float, default=0.2)
    s.add_argument("--B", type=int, default=HarnessConfig().B)
    common(s)
    s.set_defaults(func=_cmd_simulate)

    f = sub.add_parser("fit-prior", help="fit an empirical-Bayes or MAP prior to historical controls")
    f.add_argument("file")
    f.add_argument("--method", choices=("mom", "map"), default="map")
    f.add_argument("--w-rob", type=float, default=0.0, help="add a Beta(1,1) component with this weight")
    f.add_argument("--k-max", type=int, default=3)
    common(f, alpha=False)
    f.set_defaults(func=_cmd_fit_prior)

    e = sub.add_parser("ess", help="effective sample size of a beta mixture")
    e.add_argument("--prior", default=None, help="mixture JSON as written by fit-prior")
    e.add_argument("--a", type=float, default=None)
    e.add_argument("--b", type=float, default=None)
    e.add_argument("--data", type=int, nargs=2, metavar=("EVENTS", "SIZE"), default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(func=_cmd_ess)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (StudyFileError, InvalidScenarioError, OSError, json.JSONDecodeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
