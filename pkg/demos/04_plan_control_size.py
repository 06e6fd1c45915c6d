"""How much of the robust component survives different control outcomes for n0 = 50.

Run: python3 demos/04_plan_control_size.py
"""
from pathlib import Path

from hcdborrow.cli_io import parse_study_file, plan

sf = parse_study_file(Path(__file__).parent / "data" / "study_example.csv", require_trial=False)
res = plan(sf.historical, 50, (0.2, 0.5), seed=3, prior="map")
lo, hi = res["central_range"]
print(f"prior ESS {res['ess']:.1f}; central 95% of the prior predictive: {lo}..{hi} events out of 50")
print(" y     pmf   w_rob=0.2  w_rob=0.5")
for r in res["rows"][:16]:
    print(f"{r['y']:2d}  {r['pmf']:.4f}   {r['w02']:.4f}     {r['w05']:.4f}")
