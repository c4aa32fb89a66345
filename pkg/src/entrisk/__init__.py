"""Bias-aware entropic risk estimation and Wasserstein-robust risk minimisation."""

__version__ = "0.1.0"

from .distributions import CopulaSpec, GammaSpec, Gmm, copula_sample, gmm_fit_em, gmm_sample  # noqa: E402
from .dro import (AmbiguityBall, NewsvendorSpec, Norm, PiecewiseLinearLoss, SolverConfig,  # noqa: E402
                  dro_solve_linear, dro_solve_newsvendor, dro_solve_piecewise, dro_solve_regression,
                  dro_value_linear, dro_value_newsvendor, dro_value_piecewise, dro_value_regression,
                  worst_case_brute)
from .errors import (DomainError, InfeasibleDualError, InputError, NumericError,  # noqa: E402
                     UnsupportedError)
from .estimators import EstimatorConfig, EstimatorKind, bias_correct, estimate  # noqa: E402
from .fitting import RiskMatchConfig, fit_gmm_evt, fit_gmm_risk_match  # noqa: E402
from .risk import empirical_risk, gamma_risk, gmm_risk  # noqa: E402
from .cv import BiasMethod, CvConfig, CvResult, kfold_cv, tune_radius  # noqa: E402
from .insurance import InsuranceInstance, MarketData, Policy, solve_pricing  # noqa: E402
