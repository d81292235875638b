"""Empirical MM iteration for g(x) = (1 - p) f0(x) + p f(x).

One step from (p, f):

    w_i    = p N f(X_i) / ((1 - p) f0(X_i) + p N f(X_i))
    p'     = mean(w)
    f'(x)  = (alpha / n) sum_i K_h(x - X_i) w_i,   alpha = n / sum(w)

f is carried on a uniform grid and N f(X_i) is computed by grid quadrature
with the same normalized kernel rows that build f', so each step is the
exact minimizer of the discretized majorizer and the objective

    l_n(p, f) = -sum_i log((1 - p) f0(X_i) + p N f(X_i))

never increases.
"""
import logging
import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

from src.models.densities import GammaDensity, NormalDensity, Sample, default_grid_points, tabulate
from src.models.errors import ConfigError, DegenerateFitError, GridError, ObjectiveError
from src.models.grid import MASS_TOLERANCE, GridDensity, GridFn
from src.models.schemas import GridSpec, MmConfig, StopReason, TracePoint
from src.services.smoothing import (
    DEFAULT_LOG_FLOOR,
    Kernel,
    SmoothingOperator,
    lattice_mass,
    truncated_kernel,
)

logger = logging.getLogger(__name__)

# Descent slack per step before a warning is logged
DESCENT_SLACK = 1e-8


@dataclass(frozen=True)
class MmState:
    """Iterate t: (p, f) with the weights w(t-1) and normalizer alpha(t) that produced it.

    `weights` and `nf` are aligned with the caller's sample order; both
    `weights` and `alpha` are None for the starting state.
    """

    t: int
    p: float
    f: GridDensity
    objective: float
    nf: np.ndarray
    weights: Optional[np.ndarray] = None
    alpha: Optional[float] = None


@dataclass(frozen=True)
class FitResult:
    p_hat: float
    f_hat: GridDensity
    trace: List[TracePoint]
    n_iters: int
    stop_reason: StopReason
    bandwidth: float
    state: MmState


def grid_padding(kernel: Kernel, h: float) -> float:
    return max(3.0, Kernel(kernel).support_radius) * h


def default_grid(points: np.ndarray, kernel: Kernel, h: float, n_points: Optional[int] = None) -> GridFn:
    """Grid spanning the data padded by the kernel reach"""
    pad = grid_padding(kernel, h)
    n_points = n_points or default_grid_points()
    return GridFn(float(np.min(points)) - pad, float(np.max(points)) + pad, np.zeros(n_points))


def resolve_grid(sample: Sample, cfg: MmConfig, h: float) -> GridFn:
    if cfg.grid is None:
        return default_grid(sample.points, cfg.kernel, h)
    return GridFn(cfg.grid.lo, cfg.grid.hi, np.zeros(cfg.grid.n_points))


def _as_grid(grid) -> GridFn:
    if isinstance(grid, GridSpec):
        return GridFn(grid.lo, grid.hi, np.zeros(grid.n_points))
    if isinstance(grid, GridFn):
        return grid
    lo, hi, n_points = grid
    return GridFn(lo, hi, np.zeros(int(n_points)))


def default_f_init(sample: Sample, f0):
    """Gamma(4, 2) for positive-support problems, Normal(mean, sd) of the sample otherwise"""
    if float(np.min(sample.points)) >= 0 and f0.default_grid()[0] >= 0:
        return GammaDensity(alpha=4.0, beta=2.0)
    sd = float(np.std(sample.points, ddof=1)) if sample.n > 1 else 1.0
    return NormalDensity(mu=float(np.mean(sample.points)), sigma=sd if sd > 0 else 1.0)


def nf_at_points(f: GridDensity, xs, kernel: Kernel, h: float, floor: float = DEFAULT_LOG_FLOOR) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    if not f.grid.contains(xs):
        bad = xs[(xs < f.grid.lo) | (xs > f.grid.hi)][0]
        raise GridError(f"Point {bad:g} lies outside the grid [{f.grid.lo:g}, {f.grid.hi:g}]")
    return SmoothingOperator(kernel, h, xs, f.grid).nonlinear(f.values, floor)


def compute_weights(p: float, f0_vals, nf_vals) -> np.ndarray:
    f0_vals = np.asarray(f0_vals, dtype=float)
    nf_vals = np.asarray(nf_vals, dtype=float)
    numerator = p * nf_vals
    denominator = (1 - p) * f0_vals + numerator
    undefined = ~(denominator > 0)
    weights = np.divide(numerator, denominator, out=np.full_like(numerator, 0.5), where=~undefined)
    if np.any(undefined):
        logger.warning(f"Mixture density underflows at {int(undefined.sum())} point(s); their weight is set to 0.5")
    return weights


def update_p(weights) -> float:
    weights = np.asarray(weights, dtype=float)
    if weights.size == 0:
        raise ConfigError("Cannot update p from an empty weight vector")
    return float(np.mean(weights))


def _weighted_kde(op: SmoothingOperator, weights: np.ndarray, grid: GridFn) -> Tuple[GridDensity, float]:
    total = float(np.sum(weights))
    if not total > 0:
        raise DegenerateFitError("All weights vanished; the unknown component has no support in the data")
    alpha = weights.size / total
    values = alpha / weights.size * op.spread(weights)
    density_grid = grid.with_values(values)
    mass = density_grid.integral()
    if abs(mass - 1.0) > MASS_TOLERANCE:
        raise GridError(f"Grid [{grid.lo:g}, {grid.hi:g}] loses kernel mass (f mass {mass:.9f}); widen it")
    return GridDensity(density_grid), alpha


def update_f(sample: Sample, weights, kernel: Kernel, h: float, grid) -> Tuple[GridDensity, float]:
    """Weighted KDE of the sample tabulated on `grid`; returns (f, alpha)"""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != sample.points.shape:
        raise ConfigError(f"Expected {sample.n} weights, got {weights.size}")
    grid = _as_grid(grid)
    op = SmoothingOperator(kernel, h, sample.points, grid)
    return _weighted_kde(op, weights, grid)


def _objective_from_values(p: float, f0_vals: np.ndarray, nf_vals: np.ndarray, points: np.ndarray) -> float:
    mixture = (1 - p) * f0_vals + p * nf_vals
    bad = ~(mixture > 0)
    if np.any(bad):
        point = float(points[bad][0])
        raise ObjectiveError(f"Mixture density is not positive at sample point {point:g}", point=point)
    return float(-np.sum(np.log(mixture)))


def objective(p: float, f: GridDensity, sample: Sample, f0, kernel: Kernel, h: float, floor: float = DEFAULT_LOG_FLOOR) -> float:
    nf = nf_at_points(f, sample.points, kernel, h, floor)
    return _objective_from_values(p, f0.pdf(sample.points), nf, sample.points)


def majorizer(p_tilde: float, f_tilde: GridDensity, weights, sample: Sample, kernel: Kernel, h: float, floor: float = DEFAULT_LOG_FLOOR) -> float:
    """Surrogate b(p~, f~) built from the weights of the current iterate.

    l_n(p~, f~) - l_n(p, f) <= b(p~, f~) - b(p, f) for every (p~, f~), with
    equality at the current (p, f).
    """
    weights = np.asarray(weights, dtype=float)
    nf = nf_at_points(f_tilde, sample.points, kernel, h, floor)
    mixing = (1 - weights) * math.log1p(-p_tilde) + weights * math.log(p_tilde)
    return float(-np.sum(mixing) - np.sum(weights * np.log(nf)))


def evaluate_estimate(sample: Sample, weights, alpha: float, kernel: Kernel, h: float, grid, at) -> np.ndarray:
    """(alpha / n) sum_i K_h(x - X_i) w_i / Z(X_i) at arbitrary points x.

    Same kernel normalization as the grid carrier, so at grid nodes this
    reproduces the tabulated estimate.
    """
    grid = _as_grid(grid)
    at = np.asarray(at, dtype=float)
    weights = np.asarray(weights, dtype=float)
    z = lattice_mass(kernel, h, sample.points, grid.lo, grid.step)
    kernel_values = truncated_kernel(kernel, (at[:, None] - sample.points[None, :]) / h) / h
    return alpha / sample.n * (kernel_values @ (weights / z))


class MmProblem:
    """Fixed ingredients of a fit: sorted sample, f0 at the points, kernel rows"""

    def __init__(self, sample: Sample, f0, kernel: Kernel, h: float, grid: GridFn, floor: float):
        self.order = np.argsort(sample.points, kind="stable")
        self.points = sample.points[self.order]
        if not grid.contains(self.points):
            raise GridError(f"Sample range [{self.points[0]:g}, {self.points[-1]:g}] exceeds the grid [{grid.lo:g}, {grid.hi:g}]")
        self.n = self.points.size
        self.f0 = f0
        self.kernel = Kernel(kernel)
        self.h = float(h)
        self.grid = grid
        self.floor = floor
        self.f0_values = np.asarray(f0.pdf(self.points), dtype=float)
        self.operator = SmoothingOperator(self.kernel, self.h, self.points, grid)

    def _unsort(self, values: np.ndarray) -> np.ndarray:
        out = np.empty_like(values)
        out[self.order] = values
        return out

    def _same_grid(self, f: GridDensity) -> bool:
        g = f.grid
        return (g.lo, g.hi, g.n_points) == (self.grid.lo, self.grid.hi, self.grid.n_points)

    def state_at(self, t: int, p: float, f: GridDensity) -> MmState:
        if not self._same_grid(f):
            raise GridError("Iterate density must live on the fit grid")
        nf = self.operator.nonlinear(f.values, self.floor)
        value = _objective_from_values(p, self.f0_values, nf, self.points)
        return MmState(t=t, p=p, f=f, objective=value, nf=self._unsort(nf))

    def step(self, state: MmState) -> MmState:
        nf = state.nf[self.order]
        weights = compute_weights(state.p, self.f0_values, nf)
        p_next = update_p(weights)
        f_next, alpha = _weighted_kde(self.operator, weights, self.grid)
        nf_next = self.operator.nonlinear(f_next.values, self.floor)
        value = _objective_from_values(p_next, self.f0_values, nf_next, self.points)
        if value > state.objective + DESCENT_SLACK:
            logger.warning(f"Objective increased by {value - state.objective:.3e} at t={state.t + 1}")
        return MmState(
            t=state.t + 1,
            p=p_next,
            f=f_next,
            objective=value,
            nf=self._unsort(nf_next),
            weights=self._unsort(weights),
            alpha=alpha,
        )


def _require_bandwidth(cfg: MmConfig) -> float:
    if cfg.bandwidth is None:
        raise ConfigError("MmConfig.bandwidth is unset; resolve it with a bandwidth mode first")
    return cfg.bandwidth


def iterate(sample: Sample, f0, cfg: MmConfig, start: Optional[MmState] = None, grid: Optional[GridFn] = None) -> Iterator[MmState]:
    """Yield the starting state and then every MM iterate, without end"""
    h = _require_bandwidth(cfg)
    grid = grid or resolve_grid(sample, cfg, h)
    problem = MmProblem(sample, f0, cfg.kernel, h, grid, cfg.log_floor)
    if start is None:
        f_init = cfg.f_init or default_f_init(sample, f0)
        f = tabulate(f_init, grid.lo, grid.hi, grid.n_points, max_missing_mass=None)
        state = problem.state_at(0, cfg.p_init, f)
    else:
        state = problem.state_at(start.t, start.p, start.f)
        state = MmState(state.t, state.p, state.f, state.objective, state.nf, start.weights, start.alpha)
    yield state
    while True:
        state = problem.step(state)
        yield state


def fit(sample: Sample, f0, cfg: MmConfig, start: Optional[MmState] = None, grid: Optional[GridFn] = None) -> FitResult:
    """Iterate until |p(t+1) - p(t)| < tol or max_iters steps.

    A step satisfying both stop rules reports Converged. With `start`, the
    iteration continues from that state and `n_iters` counts from its t.
    """
    h = _require_bandwidth(cfg)
    states = iterate(sample, f0, cfg, start=start, grid=grid)
    state = next(states)
    first_t = state.t
    logger.info(f"Fitting n={sample.n} with h={h:.6g}, kernel={Kernel(cfg.kernel).value}, p0={state.p:.4g}")
    trace = [TracePoint(t=state.t, p=state.p, objective=state.objective)]
    reason = None
    while reason is None:
        previous = state
        state = next(states)
        trace.append(TracePoint(t=state.t, p=state.p, objective=state.objective))
        if state.t - first_t >= cfg.max_iters:
            reason = StopReason.MAX_ITERS
        if abs(state.p - previous.p) < cfg.tol:
            reason = StopReason.CONVERGED
    logger.info(f"Fit stopped ({reason.value}) after {state.t} iterations with p_hat={state.p:.6f}")
    return FitResult(
        p_hat=state.p,
        f_hat=state.f,
        trace=trace,
        n_iters=state.t,
        stop_reason=reason,
        bandwidth=h,
        state=state,
    )
