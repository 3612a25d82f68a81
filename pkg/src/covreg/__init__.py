"""Covariance regression: ``Sigma_x = Psi + sum_k B_k x x^T B_k^T``.

Maximum likelihood by EM, Wald and likelihood-ratio inference, Gibbs
sampling, Monte Carlo study drivers and prediction regions.
"""

from covreg.em import EmConfig, FitResult, fit_em, fit_homoscedastic
from covreg.errors import (
    CovRegError,
    DimensionError,
    ModelInvariantError,
    RankDeficiencyError,
    StudyError,
)
from covreg.gibbs import PosteriorDraws, Prior, default_prior, run_chain
from covreg.inference import InformationReport, LrTestResult, expected_information, lr_test
from covreg.model import (
    Dataset,
    Params,
    canonicalize,
    gamma_posterior,
    log_likelihood,
    score_residual,
    sigma_at,
)
from covreg.simulation import SimScenario, StudyReport, run_additive_study, run_coverage_study, run_mse_study

__all__ = [
    "CovRegError", "Dataset", "DimensionError", "EmConfig", "FitResult", "InformationReport",
    "LrTestResult", "ModelInvariantError", "Params", "PosteriorDraws", "Prior", "RankDeficiencyError",
    "SimScenario", "StudyError", "StudyReport", "canonicalize", "default_prior", "expected_information",
    "fit_em", "fit_homoscedastic", "gamma_posterior", "log_likelihood", "lr_test", "run_additive_study",
    "run_chain", "run_coverage_study", "run_mse_study", "score_residual", "sigma_at",
]
