"""Robustify a published-style MAP prior, update it with a small control and compare ESS.

Run: python3 demos/01_priors_and_ess.py
"""
import numpy as np

from hcdborrow import BetaMixture, ControlGroup, ess_elir, robustify, update
from hcdborrow.posterior import summarize

# two-component MAP prior fitted to historical controls
informative = BetaMixture(np.array([0.8118, 0.1882]), np.array([23.1972, 3.9494]), np.array([411.6442, 61.46489]))
robust = robustify(informative, 0.2)

print("robust prior (weight, a, b):")
for w, a, b in robust.components():
    print(f"  {w:.4f}  {a:9.4f}  {b:9.4f}")
print(f"prior ESS: {ess_elir(robust):.1f}")

for y in (1, 3, 8):
    post = update(robust, ControlGroup(y, 10))
    s = summarize(post)
    print(f"y={y}/10: weights {np.round(post.weights, 4)}, median {s['median']:.4f}, ESS {ess_elir(post):.1f}")
