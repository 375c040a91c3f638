"""Metropolis-Hastings within Gibbs sampling for Bayesian expectile regression.

Coefficient blocks are proposed from the Gaussian implied by one penalised
IWLS step at the current state, ``N(m, sigma2 * P^{-1})`` with
``P = B'WB + (sigma2 / delta2) K`` and ``m = P^{-1} B'W (y - eta_{-j})``.
Because ``W`` depends on the coefficients the proposal is not symmetric, so
the acceptance ratio evaluates it in both directions.  The variances have
conjugate inverse-gamma full conditionals.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from .distributions import Asymmetry, asymmetric_weight, inverse_gamma_sample, make_rng
from .results import Band, Curve, FitResult
from .terms import ModelTerm

__all__ = [
    "ChainConfig",
    "ChainState",
    "ChainOutput",
    "intercept_block",
    "initial_state",
    "gibbs_sigma2",
    "gibbs_delta2",
    "mh_update_beta",
    "run_chain",
    "equal_tailed_interval",
    "posterior_summary",
]

log = logging.getLogger(__name__)

RIDGE = 1e-10


@dataclass
class ChainConfig:
    iterations: int = 35000
    burn_in: int = 5000
    thinning: int = 30
    a0: float = 0.001
    b0: float = 0.001
    a: float = 0.001
    b: float = 0.001
    term_hyper: dict = field(default_factory=dict)
    seed: int = 0
    record_log_ratios: bool = False

    def __post_init__(self):
        if self.iterations < 1 or self.thinning < 1:
            raise ValueError("iterations and thinning must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must lie in [0, iterations)")
        for v in (self.a0, self.b0, self.a, self.b):
            if not v > 0:
                raise ValueError("inverse-gamma hyperparameters must be positive")
        if self.retained < 100:
            warnings.warn(f"only {self.retained} draws will be retained", stacklevel=2)

    @property
    def retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thinning

    def hyper(self, name: str) -> tuple[float, float]:
        a, b = self.term_hyper.get(name, (self.a, self.b))
        return float(a), float(b)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["term_hyper"] = {k: list(v) for k, v in self.term_hyper.items()}
        return d


@dataclass
class ChainState:
    """Current values of all parameter blocks.

    ``coefficients[0]`` is the intercept block; ``delta2[j]`` is ``nan`` for
    unpenalised blocks.
    """

    coefficients: list[np.ndarray]
    sigma2: float
    delta2: np.ndarray
    eta: np.ndarray
    weights: np.ndarray

    @property
    def intercept(self) -> float:
        return float(self.coefficients[0][0])

    def smoothing(self, j: int) -> float:
        """``lambda_j = sigma2 / delta2_j``, always from the current variances."""
        d = self.delta2[j]
        return 0.0 if np.isnan(d) else self.sigma2 / d

    def check(self, blocks, tol: float = 1e-10) -> None:
        eta = sum(b.design @ c for b, c in zip(blocks, self.coefficients))
        if not np.allclose(eta, self.eta, atol=tol * max(1.0, np.abs(eta).max())):
            raise AssertionError("predictor out of sync with coefficients")
        if not self.sigma2 > 0 or np.any(self.delta2[~np.isnan(self.delta2)] <= 0):
            raise AssertionError("variances must be positive")


@dataclass
class ChainOutput:
    names: tuple[str, ...]
    draws: dict[str, np.ndarray]
    sigma2: np.ndarray
    delta2: dict[str, np.ndarray]
    acceptance: dict[str, float]
    factorization_failures: dict[str, int]
    ridge_events: dict[str, int]
    tau: float
    config: dict
    log_ratios: np.ndarray | None = None
    runtime: float = 0.0

    @property
    def retained(self) -> int:
        return self.sigma2.size


def intercept_block(n: int) -> ModelTerm:
    return ModelTerm(name="(Intercept)", design=np.ones((n, 1)), penalty=np.zeros((1, 1)),
                     penalty_rank=0, kind="intercept", labels=("(Intercept)",))


def _tau(asym) -> float:
    return asym.tau if isinstance(asym, Asymmetry) else Asymmetry(asym).tau


def initial_state(y, blocks: Sequence[ModelTerm], asym) -> ChainState:
    """Start from a ridge-stabilised least-squares fit (the tau=0.5, lambda=0 solution)."""
    tau = _tau(asym)
    y = np.asarray(y, dtype=float)
    X = np.column_stack([b.design for b in blocks])
    A = X.T @ X + 1e-6 * np.diag(np.r_[0.0, np.ones(X.shape[1] - 1)])
    theta = linalg.solve(A, X.T @ y, assume_a="sym")
    edges = np.cumsum([0] + [b.width for b in blocks])
    coefs = [theta[edges[k]:edges[k + 1]].copy() for k in range(len(blocks))]
    eta = X @ theta
    r = y - eta
    sigma2 = max(float(np.sum(0.5 * r * r) / max(y.size, 1)), 1e-8)
    delta2 = np.array([1.0 if b.penalized else np.nan for b in blocks])
    return ChainState(coefs, sigma2, delta2, eta, asymmetric_weight(y, eta, tau))


def gibbs_sigma2(state: ChainState, y, asym, hyper=(0.001, 0.001), seed=None) -> float:
    """Draw sigma2 from ``IG(a0 + n/2, b0 + sum(w r^2)/2)``."""
    tau = _tau(asym)
    y = np.asarray(y, dtype=float)
    a0, b0 = hyper
    if y.size == 0:
        return float(inverse_gamma_sample(a0, b0, seed))
    r = y - state.eta
    ssq = float(np.sum(asymmetric_weight(y, state.eta, tau) * r * r))
    return float(inverse_gamma_sample(a0 + 0.5 * y.size, b0 + 0.5 * ssq, seed))


def gibbs_delta2(state: ChainState, j: int, term: ModelTerm, hyper=(0.001, 0.001),
                 seed=None) -> float:
    """Draw delta2_j from ``IG(a + rank(K)/2, b + beta'K beta / 2)``."""
    a, b = hyper
    beta = state.coefficients[j]
    quad = float(beta @ term.penalty @ beta) if term.penalty_rank > 0 else 0.0
    return float(inverse_gamma_sample(a + 0.5 * term.penalty_rank, b + 0.5 * max(quad, 0.0), seed))


class _Proposal:
    __slots__ = ("chol", "mean", "logdet_half", "P")

    def __init__(self, P, rhs):
        chol, info = lapack.dpotrf(P, lower=1, clean=1)
        if info != 0:
            raise linalg.LinAlgError(f"precision not positive definite (info={info})")
        self.P = P
        self.chol = chol
        self.mean, _ = lapack.dpotrs(chol, rhs, lower=1)
        self.logdet_half = float(np.log(np.diag(chol)).sum())

    def draw(self, z, sigma2):
        noise, _ = lapack.dtrtrs(self.chol, z, lower=1, trans=1)
        return self.mean + math.sqrt(sigma2) * noise

    def logq(self, x, sigma2):
        d = x - self.mean
        return self.logdet_half - float(d @ self.P @ d) / (2.0 * sigma2)


class _GramCache:
    """``B'WB`` for one block, updated by low-rank corrections as weights flip.

    A full recomputation every few hundred corrections bounds rounding drift.
    """

    __slots__ = ("B", "G", "w", "updates")

    def __init__(self, B, w):
        self.B = B
        self.G, self.w, self.updates = self.full(w), w, 0

    def full(self, w):
        return (self.B.T * w) @ self.B

    def gram(self, w):
        """Return ``(G, corrections)`` for weights ``w``."""
        if w is self.w:
            return self.G, self.updates
        idx = np.flatnonzero(w != self.w)
        if idx.size == 0:
            return self.G, self.updates
        if idx.size * 4 > w.size or self.updates >= 500:
            return self.full(w), 0
        Bi = self.B[idx]
        return self.G + (Bi.T * (w[idx] - self.w[idx])) @ Bi, self.updates + 1

    def commit(self, G, w, updates):
        self.G, self.w, self.updates = G, w, updates


def _proposal(G, B, w, partial, K, lam, counters, name):
    P = G + lam * K if lam > 0 else G
    rhs = B.T @ (w * partial)
    try:
        return _Proposal(P, rhs)
    except linalg.LinAlgError:
        pass
    counters["ridge"][name] = counters["ridge"].get(name, 0) + 1
    log.info("adding ridge %.0e to the proposal precision of %s", RIDGE, name)
    scale = max(float(np.trace(P)) / P.shape[0], 1.0)
    return _Proposal(P + RIDGE * scale * np.eye(P.shape[0]), rhs)


def mh_update_beta(state: ChainState, j: int, y, blocks: Sequence[ModelTerm], asym,
                   seed=None, counters: dict | None = None, cache: dict | None = None):
    """One IWLS-proposal Metropolis-Hastings step for block ``j``.

    Updates ``state`` in place on acceptance and returns
    ``(coefficients, accepted, log_ratio)``.  A failed factorisation counts as
    a rejection with ``log_ratio = -inf``.  ``cache`` carries per-block Gram
    matrices between calls.
    """
    tau = _tau(asym)
    rng = make_rng(seed)
    counters = counters if counters is not None else {"ridge": {}, "fail": {}}
    blk = blocks[j]
    B, K = blk.design, blk.penalty
    if cache is None:
        cache = {}
    gc = cache.get(j)
    if gc is None:
        gc = cache[j] = _GramCache(B, state.weights)
    beta = state.coefficients[j]
    sigma2 = state.sigma2
    lam = state.smoothing(j)
    w = state.weights
    base = state.eta - B @ beta
    partial = y - base
    G, nup = gc.gram(w)
    gc.commit(G, w, nup)
    try:
        fwd = _proposal(G, B, w, partial, K, lam, counters, blk.name)
    except linalg.LinAlgError:
        counters["fail"][blk.name] = counters["fail"].get(blk.name, 0) + 1
        return beta, False, -math.inf
    prop = fwd.draw(rng.standard_normal(beta.size), sigma2)
    eta_new = base + B @ prop
    w_new = np.where(y > eta_new, tau, 1.0 - tau)
    if np.array_equal(w_new, w):
        rev, w_new, G_new, nup_new = fwd, w, G, nup
    else:
        G_new, nup_new = gc.gram(w_new)
        try:
            rev = _proposal(G_new, B, w_new, partial, K, lam, counters, blk.name)
        except linalg.LinAlgError:
            counters["fail"][blk.name] = counters["fail"].get(blk.name, 0) + 1
            return beta, False, -math.inf

    r_old = y - state.eta
    r_new = y - eta_new
    # sum(w' r'^2) - sum(w r^2), written to cancel exactly when the weights agree
    dloss = float(np.dot(w_new, (r_new - r_old) * (r_new + r_old)))
    if w_new is not w:
        dloss += float(np.dot(w_new - w, r_old * r_old))
    log_target = -dloss / (2.0 * sigma2)
    if lam > 0:
        log_target -= float(prop @ K @ prop - beta @ K @ beta) * lam / (2.0 * sigma2)
    log_ratio = log_target + rev.logq(beta, sigma2) - fwd.logq(prop, sigma2)
    if log_ratio >= 0 or math.log(rng.random()) < log_ratio:
        state.coefficients[j] = prop
        state.eta = eta_new
        state.weights = w_new
        gc.commit(G_new, w_new, nup_new)
        return prop, True, log_ratio
    return beta, False, log_ratio


def run_chain(y, terms: Sequence[ModelTerm], asym, config: ChainConfig | None = None,
              init: ChainState | None = None) -> ChainOutput:
    """Run one chain: MH for each block, then sigma2, then every delta2_j."""
    config = config or ChainConfig()
    tau = _tau(asym)
    y = np.asarray(y, dtype=float)
    blocks = [intercept_block(y.size)] + list(terms)
    for b in blocks:
        if b.n != y.size:
            raise ValueError(f"term {b.name!r} has {b.n} rows, response has {y.size}")
    rng = make_rng(config.seed)
    state = init or initial_state(y, blocks, tau)
    names = tuple(b.name for b in blocks)
    penalized = [j for j, b in enumerate(blocks) if b.penalized]
    hypers = {j: config.hyper(blocks[j].name) for j in penalized}

    m = config.retained
    draws = {b.name: np.empty((m, b.width)) for b in blocks}
    sig = np.empty(m)
    dl = {blocks[j].name: np.empty(m) for j in penalized}
    accepted = np.zeros(len(blocks), dtype=int)
    counters = {"ridge": {}, "fail": {}}
    cache: dict = {}
    ratios = np.empty((config.iterations, len(blocks))) if config.record_log_ratios else None

    start = time.perf_counter()
    slot = 0
    for it in range(1, config.iterations + 1):
        for j in range(len(blocks)):
            try:
                _, ok, lr = mh_update_beta(state, j, y, blocks, tau, rng, counters, cache)
            except FloatingPointError as exc:
                raise FloatingPointError(f"iteration {it}, block {names[j]}: {exc}") from exc
            accepted[j] += ok
            if ratios is not None:
                ratios[it - 1, j] = lr
        state.sigma2 = gibbs_sigma2(state, y, tau, (config.a0, config.b0), rng)
        for j in penalized:
            state.delta2[j] = gibbs_delta2(state, j, blocks[j], hypers[j], rng)
        if not (np.isfinite(state.sigma2) and state.sigma2 > 0):
            raise FloatingPointError(f"iteration {it}: invalid sigma2 {state.sigma2}")
        if it > config.burn_in and (it - config.burn_in) % config.thinning == 0:
            for j, b in enumerate(blocks):
                draws[b.name][slot] = state.coefficients[j]
            sig[slot] = state.sigma2
            for j in penalized:
                dl[blocks[j].name][slot] = state.delta2[j]
            slot += 1
    elapsed = time.perf_counter() - start
    return ChainOutput(
        names=names, draws=draws, sigma2=sig, delta2=dl,
        acceptance={b.name: accepted[j] / config.iterations for j, b in enumerate(blocks)},
        factorization_failures=dict(counters["fail"]), ridge_events=dict(counters["ridge"]),
        tau=tau, config=config.to_dict(), log_ratios=ratios, runtime=elapsed)


def _order_stat_indices(m: int, level: float) -> tuple[int, int]:
    alpha = 1.0 - level
    # round away float noise such as 0.025 * 1000 = 25.000000000000004
    lo = math.ceil(round(alpha / 2.0 * m, 9))
    hi = math.floor(round((1.0 - alpha / 2.0) * m, 9))
    lo = min(max(lo, 1), m)
    hi = min(max(hi, lo), m)
    return lo - 1, hi - 1


def equal_tailed_interval(draws, level: float = 0.95, axis: int = 0):
    """Bounds at the ceil(alpha/2 m)-th and floor((1 - alpha/2) m)-th order statistics."""
    draws = np.asarray(draws, dtype=float)
    m = draws.shape[axis]
    if m == 0:
        raise ValueError("no draws")
    i, k = _order_stat_indices(m, level)
    part = np.partition(draws, (i, k), axis=axis)
    return np.take(part, i, axis=axis), np.take(part, k, axis=axis)


def _band(draws, level):
    lo, hi = equal_tailed_interval(draws, level)
    return Band(draws.mean(axis=0), lo, hi)


def posterior_summary(output: ChainOutput, level: float = 0.95,
                      terms: Sequence[ModelTerm] | None = None, grids: dict | None = None,
                      include_intercept: bool = False) -> FitResult:
    """Posterior means and equal-tailed credible intervals.

    Curve bands are computed from the fitted values of every retained draw.
    """
    if output.retained == 0:
        raise ValueError("chain has no retained draws")
    intercept = output.draws["(Intercept)"]
    res = FitResult(tau=output.tau, method="bayes", level=level,
                    intercept=_band(intercept, level),
                    diagnostics={"acceptance": dict(output.acceptance),
                                 "sigma2": _band(output.sigma2[:, None], level),
                                 "factorization_failures": dict(output.factorization_failures),
                                 "ridge_events": dict(output.ridge_events)})
    by_name = {t.name: t for t in (terms or [])}
    for name in output.names[1:]:
        d = output.draws[name]
        res.coefficients[name] = _band(d, level)
        t = by_name.get(name)
        if t is not None and t.kind in ("linear", "mrf"):
            res.effects[name] = _band(t.raw_coefficients(d), level)
    for name, grid in (grids or {}).items():
        t = by_name[name]
        fitted = output.draws[name] @ t.evaluate(grid).T
        if include_intercept:
            fitted = fitted + intercept
        res.curves[name] = Curve(np.asarray(grid, dtype=float), _band(fitted, level))
    return res
