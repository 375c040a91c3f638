"""Least asymmetrically weighted squares by penalised IWLS backfitting."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, stats

from .distributions import Asymmetry, asymmetric_loss, asymmetric_weight, make_rng
from .results import Band, Curve, FitResult
from .terms import ModelTerm

__all__ = [
    "LawsConfig",
    "LawsFit",
    "CVResult",
    "SingularSystemError",
    "iwls_backfit",
    "select_lambda_cv",
    "asymptotic_covariance",
    "asymptotic_ci",
    "laws_summary",
    "default_lambda_grid",
]

log = logging.getLogger(__name__)


def default_lambda_grid() -> np.ndarray:
    return np.logspace(-4, 4, 10)


class SingularSystemError(np.linalg.LinAlgError):
    """A penalised weighted normal-equation system could not be solved."""

    def __init__(self, term: str, detail: str = ""):
        self.term = term
        super().__init__(f"singular system for term {term!r}{': ' + detail if detail else ''}")


@dataclass
class LawsConfig:
    max_backfit_iterations: int = 200
    convergence_tolerance: float = 1e-8
    lambda_grid: Sequence = field(default_factory=default_lambda_grid)
    cv_folds: int = 5
    cv_seed: int = 0

    def __post_init__(self):
        if not self.convergence_tolerance > 0:
            raise ValueError("convergence_tolerance must be positive")
        if self.max_backfit_iterations < 1:
            raise ValueError("max_backfit_iterations must be >= 1")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")
        if len(self.lambda_grid) == 0:
            raise ValueError("lambda_grid must be nonempty")

    def grids(self, n_penalized: int) -> list[np.ndarray]:
        """One grid per penalised term (a flat grid is shared)."""
        g = self.lambda_grid
        if len(g) and np.ndim(g[0]) > 0:
            if len(g) != n_penalized:
                raise ValueError(f"expected {n_penalized} lambda grids, got {len(g)}")
            grids = [np.asarray(x, dtype=float) for x in g]
        else:
            grids = [np.asarray(g, dtype=float)] * n_penalized
        for grid in grids:
            if grid.size == 0 or np.any(grid < 0):
                raise ValueError("lambda grids must be nonempty and nonnegative")
        return grids


@dataclass
class LawsFit:
    tau: float
    coefficients: list[np.ndarray]
    intercept: float
    lambdas: np.ndarray
    eta: np.ndarray
    weights: np.ndarray
    converged: bool
    iterations: int
    term_names: tuple[str, ...] = ()


@dataclass
class CVResult:
    lambdas: np.ndarray
    scores: list[tuple[tuple[float, ...], float]]
    failures: list[tuple[tuple[float, ...], str]] = field(default_factory=list)


def _expand_lambdas(terms, lambdas) -> np.ndarray:
    """Per-term smoothing parameters (zero for unpenalised terms)."""
    penalized = [t.penalized for t in terms]
    lam = np.atleast_1d(np.asarray(lambdas if lambdas is not None else [], dtype=float))
    if lam.size == len(terms) and lam.size != sum(penalized):
        out = lam.copy()
    elif lam.size == sum(penalized):
        out = np.zeros(len(terms))
        out[np.flatnonzero(penalized)] = lam
    else:
        raise ValueError(f"got {lam.size} lambdas for {sum(penalized)} penalised terms")
    if np.any(out < 0) or not np.all(np.isfinite(out)):
        raise ValueError("lambdas must be finite and nonnegative")
    return out


def _solve_spd(A, b, name):
    try:
        c = linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularSystemError(name, str(exc)) from None
    x = linalg.cho_solve(c, b, check_finite=False)
    if not np.all(np.isfinite(x)):
        raise SingularSystemError(name, "non-finite solution")
    return x


def _block_objective(y, eta, tau, beta, K, lam):
    loss = asymmetric_loss(y, eta, tau)
    if lam > 0:
        loss += lam * float(beta @ K @ beta)
    return loss


def _damped_update(y, eta, tau, B, beta, K, lam, name):
    """One Newton step for a block, halved until the penalised loss does not rise."""
    w = asymmetric_weight(y, eta, tau)
    partial = y - eta + B @ beta
    BW = B.T * w
    A = BW @ B
    if lam > 0:
        A = A + lam * K
    target = _solve_spd(A, BW @ partial, name)
    old = _block_objective(y, eta, tau, beta, K, lam)
    step = target - beta
    for _ in range(30):
        cand = beta + step
        cand_eta = eta + B @ step
        new = _block_objective(y, cand_eta, tau, cand, K, lam)
        if new <= old * (1 + 1e-13) + 1e-300:
            return cand, cand_eta
        step = 0.5 * step
    return beta, eta


def iwls_backfit(y, terms: Sequence[ModelTerm], asym, lambdas=None,
                 config: LawsConfig | None = None, init: LawsFit | None = None) -> LawsFit:
    """Fit expectile regression by penalised IWLS backfitting.

    Penalised terms are updated in declaration order with the asymmetric
    weights refreshed after every block; the intercept together with all
    unpenalised terms forms one parametric block solved at the end of each
    sweep.  Each block step is a Newton step for the penalised asymmetric
    loss and is halved whenever it would increase that loss.
    """
    config = config or LawsConfig()
    tau = Asymmetry(asym).tau if not isinstance(asym, Asymmetry) else asym.tau
    y = np.asarray(y, dtype=float)
    n = y.size
    terms = list(terms)
    lam = _expand_lambdas(terms, lambdas)
    for t in terms:
        if t.n != n:
            raise ValueError(f"term {t.name!r} has {t.n} rows, response has {n}")

    smooth = [j for j, t in enumerate(terms) if t.penalized]
    linear = [j for j, t in enumerate(terms) if not t.penalized]
    P = np.column_stack([np.ones(n)] + [terms[j].design for j in linear])
    # weights are positive, so the parametric system is singular exactly when
    # P is rank deficient; name the first term that makes it so
    for k in range(len(linear)):
        cols = 1 + sum(terms[j].width for j in linear[:k + 1])
        if np.linalg.matrix_rank(P[:, :cols]) < cols:
            raise SingularSystemError(terms[linear[k]].name, "columns are collinear with the "
                                      "intercept or earlier unpenalised terms")
    P_zero = np.zeros((P.shape[1], P.shape[1]))
    P_edges = np.cumsum([1] + [terms[j].width for j in linear])

    if init is not None:
        beta = [np.array(b, dtype=float) for b in init.coefficients]
        intercept = float(init.intercept)
    else:
        beta = [np.zeros(t.width) for t in terms]
        intercept = float(np.mean(y))
    theta = np.concatenate([[intercept]] + [beta[j] for j in linear])
    eta = P @ theta + sum((terms[j].design @ beta[j] for j in smooth), np.zeros(n))

    converged = False
    it = 0
    for it in range(1, config.max_backfit_iterations + 1):
        eta_old = eta
        for j in smooth:
            t = terms[j]
            beta[j], eta = _damped_update(y, eta, tau, t.design, beta[j], t.penalty, lam[j], t.name)
        theta, eta = _damped_update(y, eta, tau, P, theta, P_zero, 0.0,
                                    "intercept" if not linear else "parametric")
        change = np.linalg.norm(eta - eta_old)
        if change <= config.convergence_tolerance * max(np.linalg.norm(eta_old), 1e-12):
            converged = True
            break
    else:
        log.warning("IWLS backfitting stopped after %d sweeps without converging", it)

    intercept = float(theta[0])
    for k, j in enumerate(linear):
        beta[j] = theta[P_edges[k]:P_edges[k + 1]].copy()
    # recompute from coefficients so eta is exactly the assembled predictor
    eta = np.full(n, intercept)
    for t, b in zip(terms, beta):
        eta = eta + t.design @ b
    return LawsFit(tau=tau, coefficients=beta, intercept=intercept, lambdas=lam, eta=eta,
                   weights=asymmetric_weight(y, eta, tau), converged=converged, iterations=it,
                   term_names=tuple(t.name for t in terms))


def _predict(fit: LawsFit, terms, rows):
    eta = np.full(len(rows), fit.intercept)
    for t, b in zip(terms, fit.coefficients):
        eta += t.design[rows] @ b
    return eta


def _cv_score(y, terms, tau, lam, folds, config):
    n = y.size
    total = 0.0
    for test in folds:
        train = np.setdiff1d(np.arange(n), test, assume_unique=True)
        sub = [t.subset(train) for t in terms]
        fit = iwls_backfit(y[train], sub, tau, lam, config)
        total += asymmetric_loss(y[test], _predict(fit, terms, test), tau)
    return total


def select_lambda_cv(y, terms: Sequence[ModelTerm], asym, config: LawsConfig | None = None
                     ) -> CVResult:
    """Choose smoothing parameters by k-fold held-out asymmetric loss.

    Uses the full Cartesian grid for up to two penalised terms and cyclic
    coordinate search otherwise.
    """
    config = config or LawsConfig()
    tau = asym.tau if isinstance(asym, Asymmetry) else Asymmetry(asym).tau
    y = np.asarray(y, dtype=float)
    terms = list(terms)
    n_pen = sum(t.penalized for t in terms)
    grids = config.grids(n_pen)
    if n_pen == 0:
        return CVResult(lambdas=np.zeros(0), scores=[((), float("nan"))])
    perm = make_rng(config.cv_seed).permutation(y.size)
    folds = np.array_split(perm, config.cv_folds)

    cache: dict[tuple, float] = {}
    failures = []

    def score(cand):
        if cand not in cache:
            try:
                cache[cand] = _cv_score(y, terms, tau, np.array(cand), folds, config)
            except (np.linalg.LinAlgError, ValueError) as exc:
                failures.append((cand, str(exc)))
                cache[cand] = np.inf
        return cache[cand]

    if n_pen <= 2:
        for cand in itertools.product(*[tuple(map(float, g)) for g in grids]):
            score(cand)
    else:
        current = [float(g[len(g) // 2]) for g in grids]
        for _ in range(20):
            previous = list(current)
            for k, grid in enumerate(grids):
                options = []
                for value in grid:
                    cand = list(current)
                    cand[k] = float(value)
                    options.append((score(tuple(cand)), float(value)))
                current[k] = min(options, key=lambda o: o[0])[1]
            if current == previous:
                break

    scores = list(cache.items())
    finite = [s for s in scores if np.isfinite(s[1])]
    if not finite:
        raise RuntimeError("all cross-validation fits failed: "
                           + "; ".join(f"{c}: {m}" for c, m in failures))
    best = min(finite, key=lambda s: s[1])
    return CVResult(lambdas=np.array(best[0]), scores=scores, failures=failures)


def _joint_design(terms, n):
    X = np.column_stack([np.ones(n)] + [t.design for t in terms])
    edges = np.cumsum([1] + [t.width for t in terms])
    return X, edges


def asymptotic_covariance(fit: LawsFit, y, terms: Sequence[ModelTerm]) -> np.ndarray:
    """Sandwich covariance of (intercept, beta_1, ..., beta_p).

    ``H^{-1} X'W S W X H^{-1}`` with ``H = X'WX + blockdiag(lambda_j K_j)``
    and ``S`` the diagonal of squared residuals.
    """
    y = np.asarray(y, dtype=float)
    terms = list(terms)
    X, edges = _joint_design(terms, y.size)
    w = fit.weights
    H = (X.T * w) @ X
    for j, t in enumerate(terms):
        if fit.lambdas[j] > 0:
            H[edges[j]:edges[j + 1], edges[j]:edges[j + 1]] += fit.lambdas[j] * t.penalty
    r = y - fit.eta
    WX = X * w[:, None]
    meat = (WX.T * r**2) @ WX
    try:
        c = linalg.cho_factor(H, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularSystemError("joint", str(exc)) from None
    Hinv_meat = linalg.cho_solve(c, meat, check_finite=False)
    cov = linalg.cho_solve(c, Hinv_meat.T, check_finite=False)
    return 0.5 * (cov + cov.T)


def asymptotic_ci(fit: LawsFit, y, terms: Sequence[ModelTerm], asym=None, level: float = 0.95,
                  points: dict | None = None, include_intercept: bool = False,
                  cov: np.ndarray | None = None) -> dict[str, Band]:
    """Pointwise normal-approximation bands for each term.

    ``points`` maps a term name to covariate values to evaluate at; other
    terms are evaluated at the observations.  With ``include_intercept`` the
    band is for ``intercept + f_j``.
    """
    if not fit.converged:
        log.warning("confidence bands requested for a fit that did not converge")
    terms = list(terms)
    if cov is None:
        cov = asymptotic_covariance(fit, y, terms)
    z = stats.norm.ppf(0.5 + level / 2.0)
    edges = np.cumsum([1] + [t.width for t in terms])
    points = points or {}
    bands = {}
    for j, t in enumerate(terms):
        B = t.evaluate(points[t.name]) if t.name in points else t.design
        sl = slice(edges[j], edges[j + 1])
        est = B @ fit.coefficients[j]
        if include_intercept:
            A = np.column_stack([np.ones(B.shape[0]), B])
            idx = np.r_[0, np.arange(edges[j], edges[j + 1])]
            C = cov[np.ix_(idx, idx)]
            est = est + fit.intercept
        else:
            A, C = B, cov[sl, sl]
        se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", A, C, A), 0.0))
        bands[t.name] = Band(est, est - z * se, est + z * se)
    return bands


def laws_summary(fit: LawsFit, y, terms: Sequence[ModelTerm], level: float = 0.95,
                 grids: dict | None = None, include_intercept: bool = False) -> FitResult:
    """Package a LAWS fit with asymptotic intervals as a :class:`FitResult`."""
    terms = list(terms)
    cov = asymptotic_covariance(fit, y, terms)
    z = stats.norm.ppf(0.5 + level / 2.0)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    edges = np.cumsum([1] + [t.width for t in terms])
    res = FitResult(tau=fit.tau, method="laws", level=level,
                    intercept=Band([fit.intercept], [fit.intercept - z * se[0]],
                                   [fit.intercept + z * se[0]]),
                    diagnostics={"converged": fit.converged, "iterations": fit.iterations,
                                 "lambdas": [float(v) for v in fit.lambdas]})
    for j, t in enumerate(terms):
        sl = slice(edges[j], edges[j + 1])
        b = fit.coefficients[j]
        res.coefficients[t.name] = Band(b, b - z * se[sl], b + z * se[sl])
        if t.kind in ("linear", "mrf"):
            T = np.eye(t.width) if t.transform is None else t.transform
            raw = T @ b
            raw_se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", T, cov[sl, sl], T), 0.0))
            res.effects[t.name] = Band(raw, raw - z * raw_se, raw + z * raw_se)
    if grids:
        bands = asymptotic_ci(fit, y, terms, level=level, points=grids,
                              include_intercept=include_intercept, cov=cov)
        for name, grid in grids.items():
            res.curves[name] = Curve(np.asarray(grid, dtype=float), bands[name])
    return res
