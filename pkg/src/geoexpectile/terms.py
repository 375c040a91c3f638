"""Design and penalty matrices for linear, P-spline and Markov random field terms."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

__all__ = [
    "ModelTerm",
    "SplineSpec",
    "AdjacencyGraph",
    "bspline_knots",
    "bspline_design",
    "difference_penalty",
    "mrf_precision",
    "mrf_design",
    "numerical_rank",
    "apply_centering",
    "assemble_predictor",
    "linear_term",
    "pspline_term",
    "mrf_term",
    "dummy_code",
    "read_adjacency",
]

RANK_RTOL = 1e-10


def numerical_rank(matrix, rtol: float = RANK_RTOL) -> int:
    """Rank of a symmetric PSD matrix from its eigenvalues."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.size == 0:
        return 0
    eig = linalg.eigvalsh(matrix)
    top = eig.max()
    if top <= 0:
        return 0
    return int(np.sum(eig > rtol * top))


@dataclass(frozen=True)
class ModelTerm:
    """One additive predictor component.

    ``design`` and ``penalty`` live in the (possibly reparametrised)
    coefficient space; ``transform`` maps those coefficients back to the raw
    basis coefficients and ``basis`` evaluates the raw basis at new covariate
    values.
    """

    name: str
    design: np.ndarray
    penalty: np.ndarray
    penalty_rank: int
    centered: bool = False
    center: bool = False
    kind: str = "linear"
    transform: np.ndarray | None = None
    basis: Callable | None = field(default=None, repr=False, compare=False)
    labels: tuple[str, ...] = ()
    domain: tuple[float, float] | None = None

    def __post_init__(self):
        design = np.atleast_2d(np.asarray(self.design, dtype=float))
        penalty = np.atleast_2d(np.asarray(self.penalty, dtype=float))
        if penalty.shape != (design.shape[1], design.shape[1]):
            raise ValueError(f"{self.name}: penalty shape {penalty.shape} does not match "
                             f"design width {design.shape[1]}")
        if not np.allclose(penalty, penalty.T, atol=1e-12):
            raise ValueError(f"{self.name}: penalty must be symmetric")
        design.setflags(write=False)
        penalty.setflags(write=False)
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "penalty", penalty)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def width(self) -> int:
        return self.design.shape[1]

    @property
    def penalized(self) -> bool:
        return self.penalty_rank > 0

    def raw_coefficients(self, beta):
        """Map coefficients to the raw basis (e.g. one value per region)."""
        beta = np.asarray(beta, dtype=float)
        if self.transform is None:
            return beta
        return beta @ self.transform.T

    def evaluate(self, values) -> np.ndarray:
        """Design matrix of this term at new covariate values."""
        if self.basis is None:
            raise ValueError(f"term {self.name!r} cannot be evaluated at new values")
        raw = self.basis(values)
        return raw if self.transform is None else raw @ self.transform

    def subset(self, rows) -> "ModelTerm":
        """Same term restricted to a subset of observations."""
        return replace(self, design=self.design[rows])


@dataclass(frozen=True)
class SplineSpec:
    """Equidistant B-spline basis with a difference penalty."""

    degree: int = 3
    inner_knots: int = 20
    difference_order: int = 2
    domain: tuple[float, float] | None = None

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.inner_knots < 1:
            raise ValueError("inner_knots must be >= 1")
        if self.difference_order < 1:
            raise ValueError("difference_order must be >= 1")
        if self.domain is not None:
            lo, hi = map(float, self.domain)
            if not hi > lo:
                raise ValueError(f"degenerate spline domain {self.domain}")
            object.__setattr__(self, "domain", (lo, hi))

    @property
    def n_basis(self) -> int:
        return self.inner_knots + self.degree + 1

    def with_domain(self, x) -> "SplineSpec":
        if self.domain is not None:
            return self
        x = np.asarray(x, dtype=float)
        return replace(self, domain=(float(x.min()), float(x.max())))


def bspline_knots(spec: SplineSpec) -> np.ndarray:
    """Clamped equidistant knot vector."""
    if spec.domain is None:
        raise ValueError("spline domain is not set")
    lo, hi = spec.domain
    interior = np.linspace(lo, hi, spec.inner_knots + 2)
    return np.concatenate([np.full(spec.degree, lo), interior, np.full(spec.degree, hi)])


def bspline_design(x, spec: SplineSpec) -> np.ndarray:
    """B-spline basis functions evaluated at ``x`` (one row per value)."""
    if spec.domain is None:
        raise ValueError("spline domain is not set")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lo, hi = spec.domain
    span = hi - lo
    bad = (x < lo - 1e-12 * span) | (x > hi + 1e-12 * span) | ~np.isfinite(x)
    if bad.any():
        raise ValueError(f"{int(bad.sum())} value(s) outside spline domain [{lo}, {hi}], "
                         f"e.g. {x[bad][0]!r}")
    x = np.clip(x, lo, hi)
    return BSpline.design_matrix(x, bspline_knots(spec), spec.degree).toarray()


def difference_penalty(K: int, order: int) -> np.ndarray:
    """``D'D`` for the ``order``-th difference matrix ``D`` on ``K`` coefficients."""
    if order < 1:
        raise ValueError("difference order must be >= 1")
    if K <= order:
        raise ValueError(f"need more coefficients ({K}) than the difference order ({order})")
    D = np.diff(np.eye(K), n=order, axis=0)
    return D.T @ D


@dataclass(frozen=True)
class AdjacencyGraph:
    """Region labels and undirected neighbour pairs."""

    labels: tuple[str, ...]
    pairs: frozenset

    def __post_init__(self):
        labels = tuple(str(s) for s in self.labels)
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate region labels")
        known = set(labels)
        pairs = set()
        for pair in self.pairs:
            a, b = (str(p) for p in pair)
            if a == b:
                raise ValueError(f"self-loop at region {a!r}")
            for s in (a, b):
                if s not in known:
                    raise ValueError(f"neighbour {s!r} is not a known region")
            pairs.add(frozenset((a, b)))
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "pairs", frozenset(pairs))

    def index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.labels)}


def mrf_precision(graph: AdjacencyGraph) -> np.ndarray:
    """Graph Laplacian: neighbour counts on the diagonal, -1 per edge."""
    if not graph.labels:
        raise ValueError("empty graph")
    idx = graph.index()
    S = len(graph.labels)
    K = np.zeros((S, S))
    for pair in graph.pairs:
        a, b = (idx[s] for s in sorted(pair))
        K[a, b] = K[b, a] = -1.0
        K[a, a] += 1.0
        K[b, b] += 1.0
    return K


def mrf_design(regions: Sequence[str], graph: AdjacencyGraph) -> np.ndarray:
    """Observation-by-region incidence matrix."""
    idx = graph.index()
    B = np.zeros((len(regions), len(graph.labels)))
    for i, r in enumerate(regions):
        try:
            B[i, idx[str(r)]] = 1.0
        except KeyError:
            raise ValueError(f"unknown region label {r!r} at observation {i}") from None
    return B


def apply_centering(term: ModelTerm) -> ModelTerm:
    """Reparametrise so the term's fitted values sum to zero over the data.

    Coefficients are restricted to the null space of the column sums of the
    design, found from a complete QR factorisation; one dimension is lost.
    """
    c = term.design.sum(axis=0)
    if np.linalg.norm(c) <= 1e-10 * max(1.0, np.abs(term.design).sum()):
        return replace(term, centered=True)
    q, _ = linalg.qr(c[:, None], mode="full")
    Z = q[:, 1:]
    penalty = Z.T @ term.penalty @ Z
    penalty = 0.5 * (penalty + penalty.T)
    transform = Z if term.transform is None else term.transform @ Z
    return replace(term, design=term.design @ Z, penalty=penalty,
                   penalty_rank=numerical_rank(penalty), centered=True, transform=transform)


def assemble_predictor(terms: Sequence[ModelTerm], coefficients, intercept: float = 0.0,
                       n: int | None = None) -> np.ndarray:
    """``intercept + sum_j B_j beta_j``."""
    if len(terms) != len(coefficients):
        raise ValueError("one coefficient vector per term is required")
    if n is None:
        if not terms:
            raise ValueError("n is required when there are no terms")
        n = terms[0].n
    eta = np.full(n, float(intercept))
    for term, beta in zip(terms, coefficients):
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        if beta.shape != (term.width,):
            raise ValueError(f"term {term.name!r}: expected {term.width} coefficients, "
                             f"got {beta.shape}")
        if term.n != n:
            raise ValueError(f"term {term.name!r} has {term.n} rows, expected {n}")
        eta += term.design @ beta
    return eta


# term constructors -------------------------------------------------------------

def linear_term(name: str, X, labels: Sequence[str] | None = None) -> ModelTerm:
    """Unpenalised term with the columns of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    p = X.shape[1]
    labels = tuple(labels) if labels is not None else tuple(f"{name}[{k}]" for k in range(p))

    def basis(values):
        v = np.asarray(values, dtype=float)
        return v[:, None] if v.ndim == 1 else v

    return ModelTerm(name=name, design=X, penalty=np.zeros((p, p)), penalty_rank=0,
                     kind="linear", basis=basis, labels=labels)


def pspline_term(name: str, x, spec: SplineSpec = SplineSpec(), center: bool = True) -> ModelTerm:
    """P-spline term; the domain defaults to the observed range of ``x``."""
    spec = spec.with_domain(x)
    design = bspline_design(x, spec)
    penalty = difference_penalty(spec.n_basis, spec.difference_order)
    term = ModelTerm(name=name, design=design, penalty=penalty,
                     penalty_rank=numerical_rank(penalty), center=center, kind="pspline",
                     basis=lambda v, spec=spec: bspline_design(v, spec), domain=spec.domain)
    return apply_centering(term) if center else term


def mrf_term(name: str, regions: Sequence[str], graph: AdjacencyGraph,
             center: bool = True) -> ModelTerm:
    """Markov random field term over the regions of ``graph``."""
    penalty = mrf_precision(graph)

    def basis(values, graph=graph):
        return mrf_design(list(values), graph)

    term = ModelTerm(name=name, design=mrf_design(regions, graph), penalty=penalty,
                     penalty_rank=numerical_rank(penalty), center=center, kind="mrf",
                     basis=basis, labels=graph.labels)
    return apply_centering(term) if center else term


def dummy_code(values: Sequence[str]) -> tuple[np.ndarray, list[str], str]:
    """Treatment coding with the first label in sorted order as reference.

    Returns the indicator matrix, the non-reference level names and the
    reference level.
    """
    values = [str(v) for v in values]
    levels = sorted(set(values))
    if len(levels) < 2:
        raise ValueError(f"categorical covariate needs at least two levels, got {levels}")
    ref, rest = levels[0], levels[1:]
    X = np.array([[v == lev for lev in rest] for v in values], dtype=float)
    return X, rest, ref


def read_adjacency(path) -> AdjacencyGraph:
    """Parse ``region: neighbour neighbour ...`` lines into a graph.

    Every listing must be mirrored by the neighbour's own line.
    """
    text = Path(path).read_text(encoding="utf-8")
    listed: dict[str, set[str]] = {}
    order: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'region: neighbours...'")
        head, tail = line.split(":", 1)
        region = head.strip()
        if not region:
            raise ValueError(f"{path}:{lineno}: empty region id")
        if region in listed:
            raise ValueError(f"{path}:{lineno}: region {region!r} listed twice")
        listed[region] = set(tail.split())
        order.append(region)
    pairs = set()
    for region, nbrs in listed.items():
        for nb in nbrs:
            if nb == region:
                raise ValueError(f"{path}: region {region!r} lists itself as a neighbour")
            if nb not in listed:
                raise ValueError(f"{path}: neighbour {nb!r} of {region!r} has no line of its own")
            if region not in listed[nb]:
                raise ValueError(f"{path}: asymmetric adjacency, {region!r} lists {nb!r} "
                                 f"but not vice versa")
            pairs.add(frozenset((region, nb)))
    return AdjacencyGraph(tuple(order), frozenset(pairs))
