"""Containers for point and interval estimates shared by both estimators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Band:
    """Point estimate with pointwise lower/upper bounds."""

    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.estimate = np.asarray(self.estimate, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def excludes_zero(self) -> np.ndarray:
        return (self.lower > 0) | (self.upper < 0)

    def contains(self, truth) -> np.ndarray:
        truth = np.asarray(truth, dtype=float)
        return (self.lower <= truth) & (truth <= self.upper)


@dataclass
class Curve:
    """A band evaluated on a covariate grid."""

    grid: np.ndarray
    band: Band


@dataclass
class FitResult:
    """Per-tau estimates from one estimator.

    ``coefficients`` holds bands for the coefficients of each term as stored
    in the model (the reparametrised ones for centred terms);
    ``effects`` holds bands for the raw per-level effects of linear and
    spatial terms; ``curves`` holds bands of fitted curves on grids.
    """

    tau: float
    method: str
    level: float
    intercept: Band
    coefficients: dict[str, Band] = field(default_factory=dict)
    effects: dict[str, Band] = field(default_factory=dict)
    curves: dict[str, Curve] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
