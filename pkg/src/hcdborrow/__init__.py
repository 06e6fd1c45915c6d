"""Bayesian and frequentist borrowing of historical control data for multi-arm binomial studies."""

__version__ = "0.1.0"

from .distributions import RngStream, log_beta_binomial_pmf
from .model import ControlGroup, CurrentTrial, HistoricalControlSet, Population, ScenarioConfig
from .priors import BetaMixture, NnhmConfig, map_prior, mom_beta_prior, robustify
from .posterior import ess_elir, mixture_quantile, prior_predictive_pmf, robust_weight_curve, update
from .inference import bayesian_limits, besag_lower_limits, decide
from .freq import fit_log_binomial_glm, fit_regularized_glm, pool_naive, test_then_pool
from .simharness import MethodId, run_app_grid, run_fwer_grid
