"""Bayesian and frequentist geoadditive expectile regression."""

__version__ = "0.1.0"

from .distributions import (AndParams, Asymmetry, UnivariateLaw, and_log_density, and_moments,
                            and_sample, asymmetric_loss, asymmetric_weight, true_expectile)
from .laws import LawsConfig, LawsFit, asymptotic_ci, iwls_backfit, select_lambda_cv
from .mcmc import ChainConfig, ChainOutput, posterior_summary, run_chain
from .results import Band, Curve, FitResult
from .simulation import ScenarioSpec, StudyReport, generate_scenario, run_study
from .terms import (AdjacencyGraph, ModelTerm, SplineSpec, linear_term, mrf_term,
                    pspline_term)

__all__ = [
    "AdjacencyGraph", "AndParams", "Asymmetry", "Band", "ChainConfig", "ChainOutput", "Curve",
    "FitResult", "LawsConfig", "LawsFit", "ModelTerm", "ScenarioSpec", "SplineSpec",
    "StudyReport", "UnivariateLaw", "and_log_density", "and_moments", "and_sample",
    "asymmetric_loss", "asymmetric_weight", "asymptotic_ci", "generate_scenario",
    "iwls_backfit", "linear_term", "mrf_term", "posterior_summary", "pspline_term",
    "run_chain", "run_study", "select_lambda_cv", "true_expectile",
]
