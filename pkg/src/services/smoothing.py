"""Kernels and the linear (S) and nonlinear (N) smoothing operators.

Operators act on functions tabulated on a GridFn. Every kernel row
K_h(x - u_j) is divided by its lattice mass

    Z(x) = step * sum_m K_h(x - lo - m * step),  m over all integers,

the trapezoidal mass of the row on the infinite uniform lattice through the
grid. Rows therefore integrate to exactly 1 wherever the kernel support lies
inside the grid, and nothing is renormalized near the edges.
"""
import logging
import math
from enum import Enum
from typing import Union

import numpy as np

from src.models.errors import ConfigError, GridError
from src.models.grid import GridDensity, GridFn

logger = logging.getLogger(__name__)

DEFAULT_LOG_FLOOR = 1e-12


class Kernel(str, Enum):
    TRIANGULAR = "triangular"
    GAUSSIAN = "gaussian"

    @property
    def support_radius(self) -> float:
        """|u| beyond which quadrature treats the kernel as zero"""
        return 1.0 if self is Kernel.TRIANGULAR else 6.0


def _check_bandwidth(h: float) -> None:
    if not (h > 0 and math.isfinite(h)):
        raise ConfigError(f"Bandwidth must be positive and finite, got {h}")


def kernel_eval(k: Kernel, u):
    k = Kernel(k)
    u = np.asarray(u, dtype=float)
    if k is Kernel.TRIANGULAR:
        out = np.maximum(0.0, 1.0 - np.abs(u))
    else:
        out = np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)
    return float(out) if out.ndim == 0 else out


def rescaled_eval(k: Kernel, h: float, x):
    _check_bandwidth(h)
    return kernel_eval(k, np.asarray(x, dtype=float) / h) / h


def truncated_kernel(k: Kernel, u: np.ndarray) -> np.ndarray:
    k = Kernel(k)
    out = kernel_eval(k, u)
    if k is Kernel.GAUSSIAN:
        out = np.where(np.abs(u) <= k.support_radius, out, 0.0)
    return out


def lattice_mass(k: Kernel, h: float, xs: np.ndarray, lo: float, step: float) -> np.ndarray:
    """Z(x) for each x in xs (see module docstring)"""
    k = Kernel(k)
    reach = int(math.ceil(k.support_radius * h / step)) + 1
    offsets = np.mod(np.asarray(xs, dtype=float) - lo, step)
    shifts = np.arange(-reach, reach + 1) * step
    return step * truncated_kernel(k, (offsets[:, None] - shifts[None, :]) / h).sum(axis=1) / h


class SmoothingOperator:
    """S and N evaluated at fixed points for functions tabulated on a fixed grid.

    Holds the normalized kernel rows R[i, j] = K_h(x_i - u_j) / Z(x_i) and the
    trapezoid weights c, so that S f(x_i) = sum_j c_j R[i, j] f(u_j).
    """

    def __init__(self, kernel: Kernel, h: float, points, grid: GridFn):
        _check_bandwidth(h)
        self.kernel = Kernel(kernel)
        self.h = float(h)
        self.points = np.asarray(points, dtype=float)
        self.lo, self.hi, self.n_points = grid.lo, grid.hi, grid.n_points
        self.step = grid.step
        self.weights = grid.quadrature_weights

        z = lattice_mass(self.kernel, self.h, self.points, self.lo, self.step)
        if np.any(z <= 0):
            raise GridError(f"Bandwidth {self.h:g} is below the grid resolution (step {self.step:g})")
        u = grid.abscissae
        self.rows = truncated_kernel(self.kernel, (self.points[:, None] - u[None, :]) / self.h) / self.h / z[:, None]

    def smooth(self, values: np.ndarray) -> np.ndarray:
        return self.rows @ (self.weights * values)

    def smooth_log(self, values: np.ndarray, floor: float = DEFAULT_LOG_FLOOR) -> np.ndarray:
        return self.smooth(np.log(np.maximum(values, floor)))

    def nonlinear(self, values: np.ndarray, floor: float = DEFAULT_LOG_FLOOR) -> np.ndarray:
        return np.exp(self.smooth_log(values, floor))

    def spread(self, point_weights: np.ndarray) -> np.ndarray:
        """sum_i w_i K_h(x_i - u_j) / Z(x_i) at every grid node u_j"""
        return point_weights @ self.rows


def linear_smooth(k: Kernel, h: float, f: GridFn) -> GridFn:
    _check_bandwidth(h)
    if h > (f.hi - f.lo) / 2:
        raise GridError(f"Bandwidth {h:g} exceeds half the grid extent {(f.hi - f.lo) / 2:g}")
    op = SmoothingOperator(k, h, f.abscissae, f)
    return f.with_values(op.smooth(f.values))


def nonlinear_smooth(k: Kernel, h: float, f: GridFn, floor: float = DEFAULT_LOG_FLOOR) -> GridFn:
    if not floor > 0:
        raise ConfigError(f"Log floor must be positive, got {floor}")
    op = SmoothingOperator(k, h, f.abscissae, f)
    return f.with_values(op.nonlinear(f.values, floor))


def nonlinear_mass(k: Kernel, h: float, f: Union[GridFn, GridDensity], floor: float = DEFAULT_LOG_FLOOR) -> float:
    """Trapezoidal integral of N f over the grid; at most 1 for a density"""
    grid = f.grid if isinstance(f, GridDensity) else f
    return nonlinear_smooth(k, h, grid, floor).integral()
