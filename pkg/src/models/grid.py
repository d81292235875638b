import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy.integrate import trapezoid

from src.models.errors import GridError

logger = logging.getLogger(__name__)

# Mass tolerance for anything carried as a density
MASS_TOLERANCE = 1e-6


def trapezoid_weights(n_points: int, step: float) -> np.ndarray:
    """Quadrature weights c_j such that sum(c * f) is the trapezoidal integral"""
    weights = np.full(n_points, step)
    weights[0] = weights[-1] = 0.5 * step
    return weights


@dataclass(frozen=True)
class GridFn:
    """A function tabulated at uniformly spaced abscissae over [lo, hi], endpoints included"""

    lo: float
    hi: float
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if not self.lo < self.hi:
            raise GridError(f"Grid needs lo < hi, got [{self.lo}, {self.hi}]")
        if values.ndim != 1 or values.size < 2:
            raise GridError("Grid needs a one-dimensional array of at least 2 values")
        if not np.all(np.isfinite(values)):
            raise GridError("Grid values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))
        object.__setattr__(self, "values", values)

    @property
    def n_points(self) -> int:
        return int(self.values.size)

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / (self.n_points - 1)

    @property
    def abscissae(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_points)

    @property
    def quadrature_weights(self) -> np.ndarray:
        return trapezoid_weights(self.n_points, self.step)

    def integral(self) -> float:
        return float(trapezoid(self.values, dx=self.step))

    def with_values(self, values: np.ndarray) -> "GridFn":
        return GridFn(self.lo, self.hi, values)

    def evaluate(self, x, outside: float = 0.0) -> np.ndarray:
        """Linear interpolation between grid nodes; `outside` beyond the grid"""
        return np.interp(x, self.abscissae, self.values, left=outside, right=outside)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all((x >= self.lo) & (x <= self.hi)))


@dataclass(frozen=True)
class GridDensity:
    """Nonnegative GridFn with unit trapezoidal mass.

    `renormalization` is the raw mass the values were divided by when the
    density was built from unnormalized values; `warnings` collects notes
    attached at construction (e.g. a renormalization factor far from 1).
    """

    grid: GridFn
    renormalization: float = 1.0
    warnings: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if np.any(self.grid.values < 0):
            raise GridError("Density values must be nonnegative")
        mass = self.grid.integral()
        if abs(mass - 1.0) > MASS_TOLERANCE:
            raise GridError(f"Density mass {mass:.9f} differs from 1 by more than {MASS_TOLERANCE}")

    @classmethod
    def from_values(cls, lo: float, hi: float, values: np.ndarray, max_factor_gap: float = 1e-3) -> "GridDensity":
        """Normalize nonnegative values to unit mass, recording the factor"""
        raw = GridFn(lo, hi, np.clip(np.asarray(values, dtype=float), 0.0, None))
        mass = raw.integral()
        if mass <= 0:
            raise GridError(f"Cannot normalize a grid function with mass {mass}")
        notes = []
        if abs(mass - 1.0) > max_factor_gap:
            notes.append(f"renormalized by factor {mass:.6g}")
            logger.warning(f"Grid density on [{lo:.4g}, {hi:.4g}] renormalized by factor {mass:.6g}")
        return cls(raw.with_values(raw.values / mass), renormalization=mass, warnings=tuple(notes))

    @property
    def values(self) -> np.ndarray:
        return self.grid.values

    @property
    def abscissae(self) -> np.ndarray:
        return self.grid.abscissae

    def mass(self) -> float:
        return self.grid.integral()
