"""Simultaneous lower limits for the risk ratios of a four-arm study with 16 historical controls.

Run: python3 demos/02_analyze_study.py
The same analysis is available as `hcdborrow analyze demos/data/study_example.csv`.
"""
from pathlib import Path

from hcdborrow.cli_io import analyze, parse_study_file
from hcdborrow.simharness import MethodId

sf = parse_study_file(Path(__file__).parent / "data" / "study_example.csv")
methods = [MethodId.GLM, MethodId.BGLM, MethodId.NAIVE_POOL, MethodId.TAP, MethodId.BETA11,
           MethodId.EMP_BAYES_ROBUST, MethodId.MAP_ROBUST]
report = analyze(sf, methods, alpha=0.05, w_rob=0.2, seed=11)

scr = report["screen"]
print(f"control rate {scr['control_rate']:.3f}, 95% prediction interval [{scr['lower']:.3f}, {scr['upper']:.3f}]")
for note in report["notes"]:
    print("note:", note)
print(f"{'method':18s}" + "".join(f"{a:>9s}" for a in sf.arm_ids))
for name, entry in report["methods"].items():
    if entry["status"] != "ok":
        print(f"{name:18s} failed: {entry['error']}")
        continue
    cells = "".join(f"{r['lower']:8.3f}{'*' if r['rejected'] else ' '}" for r in entry["arms"])
    print(f"{name:18s}{cells}")
print("* lower limit above 1")
