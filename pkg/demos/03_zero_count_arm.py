"""A zero-event control inflates the log-binomial standard errors; the penalized fit stays usable.

Run: python3 demos/03_zero_count_arm.py
"""
from hcdborrow import CurrentTrial
from hcdborrow.freq import fit_log_binomial_glm, fit_regularized_glm, simultaneous_lower_rr_limits

trial = CurrentTrial.from_counts(0, 50, [2, 5, 9], [50, 50, 50])
for fitter in (fit_log_binomial_glm, fit_regularized_glm):
    fit = fitter(trial.control, trial)
    lim = simultaneous_lower_rr_limits(fit, 0.95)
    print(f"{fit.method}: converged={fit.converged} boundary={fit.boundary}")
    for m, (b, se, l) in enumerate(zip(fit.log_rr, fit.se, lim.lower), start=1):
        print(f"  arm {m}: log RR {b:8.3f}  se {se:9.3f}  lower limit {l:.4g}")
