"""Simulation scenarios, true expectile curves and study metrics.

Scenarios M1 and M2 combine a binary linear covariate with a smooth effect
of ``z ~ U(0, 3)``; M3 is a single wiggly effect of ``z ~ U(0, 1)``.  Every
error law is a base law times a covariate-dependent scale, so the true
conditional expectile is ``signal + scale(z) * e_tau(base)``.
"""

from __future__ import annotations

import functools
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import distributions as dist
from .distributions import Asymmetry, make_rng
from .laws import LawsConfig, iwls_backfit, laws_summary, select_lambda_cv
from .mcmc import ChainConfig, posterior_summary, run_chain
from .terms import SplineSpec, linear_term, pspline_term

__all__ = [
    "ScenarioSpec",
    "Dataset",
    "StudyReport",
    "EstimatorSettings",
    "MODELS",
    "ERRORS",
    "signal",
    "error_scale",
    "base_expectile",
    "true_curve",
    "generate_scenario",
    "rmse",
    "coverage",
    "interval_widths",
    "run_study",
    "derive_seed",
]

log = logging.getLogger(__name__)

MODELS = ("M1", "M2", "M3")
ERRORS = {
    "normal-heteroscedastic": ("normal", ("M1", "M2")),
    "exponential-heteroscedastic": ("exponential", ("M1", "M2")),
    "t2": ("t2", ("M1", "M2")),
    "M3-normal": ("normal", ("M3",)),
    "M3-exponential": ("exponential", ("M3",)),
}
DOMAINS = {"M1": (0.0, 3.0), "M2": (0.0, 3.0), "M3": (0.0, 1.0)}


@dataclass(frozen=True)
class ScenarioSpec:
    model: str
    error: str
    n: int
    replications: int = 1
    tau_list: tuple[float, ...] = (0.5,)
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.error not in ERRORS:
            raise ValueError(f"unknown error law {self.error!r}; expected one of {tuple(ERRORS)}")
        if self.model not in ERRORS[self.error][1]:
            raise ValueError(f"error law {self.error!r} is not defined for {self.model}")
        if self.n < 1 or self.replications < 1:
            raise ValueError("n and replications must be positive")
        taus = tuple(Asymmetry(t).tau for t in self.tau_list)
        if not taus or any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValueError("tau_list must be nonempty and strictly increasing")
        object.__setattr__(self, "tau_list", taus)

    @property
    def domain(self) -> tuple[float, float]:
        return DOMAINS[self.model]


@dataclass
class Dataset:
    y: np.ndarray
    z: np.ndarray
    x1: np.ndarray | None
    truth: dict[float, np.ndarray]


def signal(model: str, z, x1=None) -> np.ndarray:
    """Noise-free regression function of a scenario."""
    z = np.asarray(z, dtype=float)
    if model == "M3":
        return np.sin(2.0 * (4.0 * z - 2.0)) + 2.0 * np.exp(-(16.0**2) * (z - 0.5) ** 2)
    x1 = np.zeros_like(z) if x1 is None else np.asarray(x1, dtype=float)
    if model == "M1":
        return 2.0 * x1 + 5.0 * np.exp(-0.5 * z**2)
    if model == "M2":
        return 2.0 * x1 + 5.0 * np.sin(2.0 * z)
    raise ValueError(f"unknown model {model!r}")


def error_scale(error: str, z) -> np.ndarray:
    """Multiplier applied to the base error law at covariate ``z``."""
    z = np.asarray(z, dtype=float)
    if error == "normal-heteroscedastic":
        return np.sqrt(0.5) * z
    if error == "exponential-heteroscedastic":
        return z.copy()
    if error == "t2":
        return np.ones_like(z)
    if error in ("M3-normal", "M3-exponential"):
        return 0.2 + np.abs(z - 0.5)
    raise ValueError(f"unknown error law {error!r}")


_BASE_LAWS = {
    "normal": dist.normal_law,
    "exponential": dist.exponential_law,
    "t2": lambda: dist.student_t_law(2.0),
}


@functools.lru_cache(maxsize=None)
def base_expectile(base: str, tau: float) -> float:
    """Expectile of a standardised base law (normal, Exp(1), t(2))."""
    return dist.true_expectile(_BASE_LAWS[base](), tau)


def true_curve(model: str, error: str, tau: float, z, x1=None) -> np.ndarray:
    """True conditional tau-expectile at the given covariates."""
    shift = base_expectile(ERRORS[error][0], float(tau))
    return signal(model, z, x1) + error_scale(error, z) * shift


def _draw_base(base: str, rng, n):
    if base == "normal":
        return rng.standard_normal(n)
    if base == "exponential":
        return rng.standard_exponential(n)
    return rng.standard_t(2.0, n)


def derive_seed(*parts: int) -> int:
    """Deterministic 63-bit seed from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0] >> 1)


def generate_scenario(spec: ScenarioSpec, replication: int) -> Dataset:
    """Simulate one replication together with the true expectile curves."""
    rng = make_rng(derive_seed(spec.seed, replication, 0))
    lo, hi = spec.domain
    if spec.model == "M3":
        x1 = None
        z = rng.uniform(lo, hi, spec.n)
    else:
        x1 = rng.binomial(1, 0.5, spec.n).astype(float)
        z = rng.uniform(lo, hi, spec.n)
    eps = error_scale(spec.error, z) * _draw_base(ERRORS[spec.error][0], rng, spec.n)
    y = signal(spec.model, z, x1) + eps
    truth = {tau: true_curve(spec.model, spec.error, tau, z, x1) for tau in spec.tau_list}
    return Dataset(y=y, z=z, x1=x1, truth=truth)


def rmse(f_true, f_hat) -> float:
    """``sqrt((f - f_hat)'(f - f_hat))``; no division by the length."""
    f_true = np.asarray(f_true, dtype=float)
    f_hat = np.asarray(f_hat, dtype=float)
    if f_true.shape != f_hat.shape:
        raise ValueError(f"length mismatch: {f_true.shape} vs {f_hat.shape}")
    d = f_true - f_hat
    return float(np.sqrt(d @ d))


def coverage(lower, upper, f_true) -> np.ndarray:
    """Fraction of replications (rows) whose interval contains the truth."""
    lower = np.atleast_2d(np.asarray(lower, dtype=float))
    upper = np.atleast_2d(np.asarray(upper, dtype=float))
    hit = (lower <= f_true) & (np.asarray(f_true) <= upper)
    return hit.mean(axis=0)


def interval_widths(lower, upper) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise minimum and maximum interval width over replications."""
    width = np.atleast_2d(np.asarray(upper, dtype=float)) - np.atleast_2d(np.asarray(lower, dtype=float))
    return width.min(axis=0), width.max(axis=0)


@dataclass
class EstimatorSettings:
    spline: SplineSpec = field(default_factory=SplineSpec)
    chain: ChainConfig = field(default_factory=ChainConfig)
    laws: LawsConfig = field(default_factory=LawsConfig)
    level: float = 0.95
    grid_size: int = 100


@dataclass
class StudyReport:
    spec: ScenarioSpec
    methods: tuple[str, ...]
    kind: str
    rmse_rows: list[dict] = field(default_factory=list)
    grid: np.ndarray | None = None
    coverage: dict[tuple[float, str], np.ndarray] = field(default_factory=dict)
    min_width: dict[tuple[float, str], np.ndarray] = field(default_factory=dict)
    max_width: dict[tuple[float, str], np.ndarray] = field(default_factory=dict)
    mean_width: dict[tuple[float, str], np.ndarray] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)
    runtime: float = 0.0

    def rmse_values(self, tau: float, method: str) -> np.ndarray:
        return np.array([r["rmse"] for r in self.rmse_rows
                         if r["tau"] == tau and r["method"] == method])

    def interval_rows(self) -> list[dict]:
        rows = []
        for (tau, method), cov in self.coverage.items():
            for k, z in enumerate(self.grid):
                rows.append({"tau": tau, "grid_z": float(z), "coverage": float(cov[k]),
                             "min_width": float(self.min_width[tau, method][k]),
                             "max_width": float(self.max_width[tau, method][k]),
                             "method": method,
                             "mean_width": float(self.mean_width[tau, method][k])})
        return rows


def _model_terms(spec: ScenarioSpec, data: Dataset, spline: SplineSpec):
    spline = replace(spline, domain=spec.domain)
    terms = [pspline_term("z", data.z, spline)]
    if data.x1 is not None:
        terms.insert(0, linear_term("x1", data.x1, labels=("x1",)))
    return terms


def _one_replication(args):
    spec, methods, settings, kind, rep = args
    data = generate_scenario(spec, rep)
    terms = _model_terms(spec, data, settings.spline)
    lo, hi = spec.domain
    grid = np.linspace(lo, hi, settings.grid_size) if kind == "interval" else None
    out = {"rep": rep, "rmse": [], "bands": {}, "failures": [], "diag": []}
    for k, tau in enumerate(spec.tau_list):
        for method in methods:
            try:
                if method == "laws":
                    cv = select_lambda_cv(data.y, terms, tau, settings.laws)
                    fit = iwls_backfit(data.y, terms, tau, cv.lambdas, settings.laws)
                    eta = fit.eta
                    diag = {"lambdas": [float(v) for v in fit.lambdas], "converged": fit.converged}
                    if kind == "interval":
                        res = laws_summary(fit, data.y, terms, settings.level, {"z": grid},
                                           include_intercept=True)
                else:
                    cfg = replace(settings.chain, seed=derive_seed(spec.seed, rep, k, 1))
                    chain = run_chain(data.y, terms, tau, cfg)
                    eta = sum(t.design @ chain.draws[t.name].mean(axis=0) for t in terms)
                    eta = eta + chain.draws["(Intercept)"].mean()
                    diag = {"acceptance": {k_: float(v) for k_, v in chain.acceptance.items()},
                            "ridge_events": chain.ridge_events,
                            "factorization_failures": chain.factorization_failures}
                    if kind == "interval":
                        res = posterior_summary(chain, settings.level, terms, {"z": grid},
                                                include_intercept=True)
                out["rmse"].append((tau, method, rmse(data.truth[tau], eta)))
                out["diag"].append({"replication": rep, "tau": tau, "method": method, **diag})
                if kind == "interval":
                    band = res.curves["z"].band
                    out["bands"][tau, method] = (band.lower, band.upper)
            except Exception as exc:  # recorded, the study carries on
                log.warning("replication %d, tau %s, %s failed: %s", rep, tau, method, exc)
                out["failures"].append({"replication": rep, "tau": tau, "method": method,
                                        "error": f"{type(exc).__name__}: {exc}"})
    return out


def run_study(spec: ScenarioSpec, methods: Sequence[str] = ("bayes", "laws"),
              settings: EstimatorSettings | None = None, kind: str = "point",
              jobs: int = 1) -> StudyReport:
    """Fit every replication and tau with each method and aggregate metrics.

    ``kind="point"`` records RMSE of the fitted predictor against the true
    expectile at the observed covariates; ``kind="interval"`` additionally
    evaluates bands for ``intercept + f(z)`` on a regular grid and reports
    coverage and widths.
    """
    settings = settings or EstimatorSettings()
    methods = tuple(methods)
    for m in methods:
        if m not in ("bayes", "laws"):
            raise ValueError(f"unknown method {m!r}")
    if kind not in ("point", "interval"):
        raise ValueError(f"unknown study kind {kind!r}")
    start = time.perf_counter()
    tasks = [(spec, methods, settings, kind, rep) for rep in range(spec.replications)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one_replication, tasks))
    else:
        results = [_one_replication(t) for t in tasks]
    results.sort(key=lambda r: r["rep"])

    report = StudyReport(spec=spec, methods=methods, kind=kind)
    for r in results:
        for tau, method, value in r["rmse"]:
            report.rmse_rows.append({"model": spec.model, "error": spec.error, "n": spec.n,
                                     "tau": tau, "method": method, "replication": r["rep"],
                                     "rmse": value})
        report.failures.extend(r["failures"])
        report.diagnostics.extend(r["diag"])
    if kind == "interval":
        lo, hi = spec.domain
        report.grid = np.linspace(lo, hi, settings.grid_size)
        for tau in spec.tau_list:
            truth = true_curve(spec.model, spec.error, tau, report.grid)
            for method in methods:
                bands = [r["bands"][tau, method] for r in results if (tau, method) in r["bands"]]
                if not bands:
                    continue
                lower = np.array([b[0] for b in bands])
                upper = np.array([b[1] for b in bands])
                report.coverage[tau, method] = coverage(lower, upper, truth)
                report.min_width[tau, method], report.max_width[tau, method] = \
                    interval_widths(lower, upper)
                report.mean_width[tau, method] = (upper - lower).mean(axis=0)
    report.runtime = time.perf_counter() - start
    return report


def default_jobs() -> int:
    return os.cpu_count() or 1
