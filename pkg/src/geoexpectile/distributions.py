"""Asymmetric normal distribution, asymmetric weights and expectile oracles.

The asymmetric normal density used throughout the package is

    p(y) = c(sigma2, tau) * exp(-w_tau(y, eta) * (y - eta)**2 / (2 * sigma2))

with ``w_tau(y, eta) = 1 - tau`` for ``y <= eta`` and ``tau`` otherwise.  Its
negative log-kernel is the asymmetric squared loss divided by ``2 * sigma2``,
so maximising the likelihood in ``eta`` is the same as least asymmetrically
weighted squares.  Each side of ``eta`` is a half-Gaussian with scale
``sigma / sqrt(w)``, which gives the normalising constant and moments below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, linalg, optimize, stats

__all__ = [
    "Asymmetry",
    "AndParams",
    "UnivariateLaw",
    "ExpectileRootError",
    "PrecisionFactorizationError",
    "make_rng",
    "asymmetric_weight",
    "asymmetric_loss",
    "and_log_normalizer",
    "and_log_density",
    "and_side_masses",
    "and_moments",
    "and_sample",
    "true_expectile",
    "sample_expectile",
    "inverse_gamma_sample",
    "gaussian_draw_from_precision",
    "normal_law",
    "exponential_law",
    "student_t_law",
    "uniform_law",
    "and_law",
]


class ExpectileRootError(ArithmeticError):
    """Root bracketing for a true expectile failed."""


class PrecisionFactorizationError(np.linalg.LinAlgError):
    """A precision matrix could not be Cholesky factorised."""


def make_rng(seed=None) -> np.random.Generator:
    """Return a counter-based (Philox) generator.

    Generators are passed through unchanged so that callers can thread one
    stream through several draws.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class Asymmetry:
    """Asymmetry level ``tau`` in the open unit interval."""

    tau: float

    def __post_init__(self):
        tau = float(self.tau)
        if not (0.0 < tau < 1.0) or math.isnan(tau):
            raise ValueError(f"tau must lie in (0, 1), got {self.tau!r}")
        object.__setattr__(self, "tau", tau)

    def __float__(self):
        return self.tau


def _tau(asym) -> float:
    return asym.tau if isinstance(asym, Asymmetry) else Asymmetry(asym).tau


@dataclass(frozen=True)
class AndParams:
    """Location, scale (variance-like) and asymmetry of an AND law."""

    location: float
    scale2: float
    asym: Asymmetry

    def __post_init__(self):
        if not self.scale2 > 0:
            raise ValueError(f"scale2 must be positive, got {self.scale2!r}")
        if not isinstance(self.asym, Asymmetry):
            object.__setattr__(self, "asym", Asymmetry(self.asym))


@dataclass(frozen=True)
class UnivariateLaw:
    """A continuous univariate law described by its log-density.

    Parameters
    ----------
    logpdf : callable
        Log-density, evaluated on scalars.
    support : tuple of float
        Lower and upper support bounds, may be infinite.
    mean : float, optional
        Exact mean if known; speeds up the expectile oracle.
    name : str
        Label used in reports.
    """

    logpdf: Callable[[float], float]
    support: tuple[float, float] = (-math.inf, math.inf)
    mean: float | None = None
    name: str = "law"
    breakpoints: tuple[float, ...] = field(default=())

    def pdf(self, y: float) -> float:
        if y < self.support[0] or y > self.support[1]:
            return 0.0
        return math.exp(self.logpdf(y))

    def _integrate(self, func, lo, hi):
        # quad's infinite-range transform handles the tails; finite pieces are
        # split at known kinks so the adaptive rule sees smooth integrands.
        lo = max(lo, self.support[0])
        hi = min(hi, self.support[1])
        if hi <= lo:
            return 0.0
        cuts = [lo] + [b for b in self.breakpoints if lo < b < hi] + [hi]
        total = 0.0
        for a, b in zip(cuts[:-1], cuts[1:]):
            val, _ = integrate.quad(func, a, b, epsabs=1e-13, epsrel=1e-12, limit=500)
            total += val
        return total

    def expect(self, g, lo=-math.inf, hi=math.inf) -> float:
        """Integral of ``g(y) * pdf(y)`` over ``[lo, hi]`` intersected with the support."""
        return self._integrate(lambda y: g(y) * self.pdf(y), lo, hi)

    def first_moment(self) -> float:
        if self.mean is not None:
            return self.mean
        return self.expect(lambda y: y)


def asymmetric_weight(y, eta, asym):
    """Asymmetric weight: ``1 - tau`` where ``y <= eta`` and ``tau`` above.

    Works elementwise on arrays and returns a float for scalar input.
    """
    tau = _tau(asym)
    out = np.where(np.asarray(y) > np.asarray(eta), tau, 1.0 - tau)
    return float(out) if out.ndim == 0 else out


def asymmetric_loss(y, eta, asym) -> float:
    """Sum of asymmetrically weighted squared residuals."""
    y = np.asarray(y, dtype=float)
    r = y - eta
    return float(np.sum(asymmetric_weight(y, eta, asym) * r * r))


def and_side_masses(asym) -> tuple[float, float]:
    """Probability mass left and right of the location."""
    tau = _tau(asym)
    st, s1t = math.sqrt(tau), math.sqrt(1.0 - tau)
    return st / (st + s1t), s1t / (st + s1t)


def and_log_normalizer(scale2: float, asym) -> float:
    """``log c`` with ``1/c = sqrt(pi * sigma2 / 2) * (1/sqrt(1-tau) + 1/sqrt(tau))``."""
    tau = _tau(asym)
    inv = math.sqrt(math.pi * scale2 / 2.0) * (1.0 / math.sqrt(1.0 - tau) + 1.0 / math.sqrt(tau))
    return -math.log(inv)


def and_log_density(y, p: AndParams):
    """Log-density of the asymmetric normal distribution."""
    y = np.asarray(y, dtype=float)
    r = y - p.location
    w = asymmetric_weight(y, p.location, p.asym)
    out = and_log_normalizer(p.scale2, p.asym) - w * r * r / (2.0 * p.scale2)
    return float(out) if np.ndim(out) == 0 else out


def and_moments(p: AndParams) -> tuple[float, float]:
    """Exact mean and variance of the AND law.

    The left half has scale ``sigma / sqrt(1 - tau)`` and the right half
    ``sigma / sqrt(tau)``; mixing the half-Gaussian moments with the side
    masses gives::

        mean - eta = sigma * sqrt(2/pi) * (1 - 2 tau) / (S * sqrt(tau (1 - tau)))
        E(y - eta)^2 = sigma2 * (sqrt(tau)/(1 - tau) + sqrt(1 - tau)/tau) / S

    where ``S = sqrt(tau) + sqrt(1 - tau)``.
    """
    tau = p.asym.tau
    st, s1t = math.sqrt(tau), math.sqrt(1.0 - tau)
    s = st + s1t
    sigma = math.sqrt(p.scale2)
    shift = sigma * math.sqrt(2.0 / math.pi) * (1.0 - 2.0 * tau) / (s * st * s1t)
    second = p.scale2 * (st / (1.0 - tau) + s1t / tau) / s
    return p.location + shift, second - shift * shift


def and_sample(p: AndParams, n: int, seed=None) -> np.ndarray:
    """Draw ``n`` variates as a mixture of two half-Gaussians."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = make_rng(seed)
    left_mass, _ = and_side_masses(p.asym)
    tau = p.asym.tau
    sigma = math.sqrt(p.scale2)
    left = rng.random(n) < left_mass
    mag = np.abs(rng.standard_normal(n))
    scale = np.where(left, -sigma / math.sqrt(1.0 - tau), sigma / math.sqrt(tau))
    return p.location + scale * mag


def _expectile_equation(law: UnivariateLaw, tau: float, mean: float):
    # With L(e) = E(e - Y)_+ the right partial moment is L(e) + mean - e, so
    # the tail-expectation identity reduces to (1 - 2 tau) L(e) - tau (mean - e) = 0.
    def g(e):
        lower = law.expect(lambda y: e - y, hi=e)
        return (1.0 - 2.0 * tau) * lower - tau * (mean - e)

    return g


def true_expectile(law: UnivariateLaw, asym) -> float:
    """The tau-expectile of ``law`` from the tail-expectation identity.

    Solves ``int_{-inf}^{e} |y - e| f(y) dy = tau * int |y - e| f(y) dy`` by
    Brent's method on a geometrically widened bracket, integrating with
    adaptive quadrature.
    """
    tau = _tau(asym)
    mean = law.first_moment()
    g = _expectile_equation(law, tau, mean)
    if g(mean) == 0.0:
        return mean
    # spread proxy: mean absolute deviation around the mean
    spread = law.expect(lambda y: abs(y - mean))
    if not spread > 0:
        raise ExpectileRootError(f"{law.name}: degenerate law")
    lo, hi = mean - spread, mean + spread
    if law.support[0] > -math.inf:
        lo = max(lo, law.support[0])
    if law.support[1] < math.inf:
        hi = min(hi, law.support[1])
    step = spread
    for _ in range(60):
        glo, ghi = g(lo), g(hi)
        if glo <= 0.0 <= ghi:
            break
        step *= 2.0
        if glo > 0.0:
            lo = max(lo - step, law.support[0]) if law.support[0] > -math.inf else lo - step
        if ghi < 0.0:
            hi = min(hi + step, law.support[1]) if law.support[1] < math.inf else hi + step
    else:
        raise ExpectileRootError(f"{law.name}: could not bracket the {tau}-expectile")
    if glo == 0.0:
        return lo
    if ghi == 0.0:
        return hi
    root, info = optimize.brentq(g, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps,
                                 maxiter=200, full_output=True)
    if not info.converged:
        raise ExpectileRootError(f"{law.name}: root search did not converge ({info.flag})")
    return float(root)


def sample_expectile(y, asym) -> float:
    """Empirical tau-expectile: the minimiser of the asymmetric squared loss.

    Iterates the weighted-mean fixed point, which terminates once the set of
    observations above the estimate stops changing.
    """
    tau = _tau(asym)
    y = np.sort(np.asarray(y, dtype=float))
    n = y.size
    csum = np.concatenate([[0.0], np.cumsum(y)])
    e = csum[-1] / n
    for _ in range(200):
        k = int(np.searchsorted(y, e, side="right"))  # y[:k] <= e
        wl, wr = (1.0 - tau) * k, tau * (n - k)
        new = ((1.0 - tau) * csum[k] + tau * (csum[-1] - csum[k])) / (wl + wr)
        if new == e:
            break
        e = new
    return float(e)


def inverse_gamma_sample(shape: float, rate: float, seed=None, size=None):
    """Inverse-gamma draw(s): reciprocal of Gamma(shape, rate)."""
    if not (shape > 0 and rate > 0):
        raise ValueError("shape and rate must be positive")
    rng = make_rng(seed)
    return 1.0 / rng.gamma(shape, 1.0 / rate, size=size)


def gaussian_draw_from_precision(Q, b, seed=None, scale2: float = 1.0, size=None):
    """Draw from ``N(Q^{-1} b, scale2 * Q^{-1})`` using one Cholesky factor.

    Raises
    ------
    PrecisionFactorizationError
        If ``Q`` is not numerically positive definite.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    try:
        chol = linalg.cholesky(Q, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise PrecisionFactorizationError(str(exc)) from exc
    mean = linalg.cho_solve((chol, True), b, check_finite=False)
    rng = make_rng(seed)
    k = Q.shape[0]
    z = rng.standard_normal(k if size is None else (size, k))
    noise = linalg.solve_triangular(chol, z.T, lower=True, trans="T", check_finite=False).T
    return mean + math.sqrt(scale2) * noise


# built-in laws ----------------------------------------------------------------

def normal_law(mu: float = 0.0, var: float = 1.0) -> UnivariateLaw:
    if not var > 0:
        raise ValueError("variance must be positive")
    dist = stats.norm(mu, math.sqrt(var))
    return UnivariateLaw(dist.logpdf, mean=float(mu), name=f"normal({mu},{var})",
                         breakpoints=(float(mu),))


def exponential_law(rate: float = 1.0) -> UnivariateLaw:
    if not rate > 0:
        raise ValueError("rate must be positive")
    return UnivariateLaw(lambda y: math.log(rate) - rate * y, support=(0.0, math.inf),
                         mean=1.0 / rate, name=f"exponential({rate})")


def student_t_law(df: float) -> UnivariateLaw:
    if not df > 1:
        raise ValueError("expectiles need a finite mean: df must exceed 1")
    dist = stats.t(df)
    return UnivariateLaw(dist.logpdf, mean=0.0, name=f"t({df})", breakpoints=(0.0,))


def uniform_law(a: float = 0.0, b: float = 1.0) -> UnivariateLaw:
    if not b > a:
        raise ValueError("uniform law needs a < b")
    logd = -math.log(b - a)
    return UnivariateLaw(lambda y: logd, support=(float(a), float(b)),
                         mean=0.5 * (a + b), name=f"uniform({a},{b})")


def and_law(p: AndParams) -> UnivariateLaw:
    mean, _ = and_moments(p)
    return UnivariateLaw(lambda y: and_log_density(y, p), mean=mean,
                         name=f"AND({p.location},{p.scale2},{p.asym.tau})",
                         breakpoints=(float(p.location),))
