"""Parametric densities, samples and quadrature functionals.

The five families cover the known component and the simulation truths.
Each family is a frozen pydantic model, so specs parse straight from JSON
with field-path errors, and carries its closed-form pdf/cdf plus a sampler
driven by an explicit numpy Generator.
"""
import logging
import math
import os
from dataclasses import dataclass
from typing import Annotated, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats
from scipy.integrate import trapezoid

from src.models.errors import ConfigError, GridError
from src.models.grid import GridDensity, GridFn

logger = logging.getLogger(__name__)


def default_grid_points() -> int:
    return int(os.getenv("SMOOTHMIX_GRID_POINTS", "1024"))


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for substream `stream` of `seed`.

    Substreams are derived by SeedSequence hashing of (seed, stream ids), so
    draws for distinct ids are independent and reproducible.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(stream))))


class _Family(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    def _dist(self):
        raise NotImplementedError

    def pdf(self, x):
        return self._dist().pdf(x)

    def cdf(self, x):
        return self._dist().cdf(x)

    def mean(self) -> float:
        return float(self._dist().mean())

    def default_grid(self) -> Tuple[float, float]:
        raise NotImplementedError

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def label(self) -> str:
        params = ",".join(repr(float(v)) for k, v in self.model_dump().items() if k != "family")
        return f"{self.family}:{params}"


class NormalDensity(_Family):
    family: Literal["normal"] = "normal"
    mu: float = Field(..., description="Mean")
    sigma: float = Field(..., gt=0, description="Standard deviation")

    def _dist(self):
        return stats.norm(loc=self.mu, scale=self.sigma)

    def default_grid(self) -> Tuple[float, float]:
        return self.mu - 6 * self.sigma, self.mu + 6 * self.sigma

    def draw(self, n, rng):
        # numpy's ziggurat transform of the PCG64 stream
        return self.mu + self.sigma * rng.standard_normal(n)


class PositiveTruncNormalDensity(_Family):
    """Normal(mu, sigma) restricted to x > 0 and renormalized by its positive-tail mass"""

    family: Literal["positive_trunc_normal"] = "positive_trunc_normal"
    mu: float = Field(..., description="Location of the parent normal")
    sigma: float = Field(..., gt=0, description="Scale of the parent normal")

    def _dist(self):
        return stats.truncnorm(-self.mu / self.sigma, np.inf, loc=self.mu, scale=self.sigma)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x > 0, self._dist().pdf(x), 0.0)

    def default_grid(self) -> Tuple[float, float]:
        return max(0.0, self.mu - 6 * self.sigma), max(self.mu, 0.0) + 6 * self.sigma

    def draw(self, n, rng):
        out = np.empty(0)
        while out.size < n:
            batch = self.mu + self.sigma * rng.standard_normal(n)
            out = np.concatenate([out, batch[batch > 0]])
        return out[:n]


class GammaDensity(_Family):
    family: Literal["gamma"] = "gamma"
    alpha: float = Field(..., gt=0, description="Shape")
    beta: float = Field(..., gt=0, description="Rate")

    def _dist(self):
        return stats.gamma(self.alpha, scale=1.0 / self.beta)

    def default_grid(self) -> Tuple[float, float]:
        return 0.0, float(self._dist().ppf(0.9999)) + 5.0

    def draw(self, n, rng):
        # Marsaglia-Tsang rejection on top of the normal sampler
        return rng.standard_gamma(self.alpha, n) / self.beta


class ExponentialDensity(_Family):
    family: Literal["exponential"] = "exponential"
    rate: float = Field(..., gt=0, description="Rate lambda")

    def _dist(self):
        return stats.expon(scale=1.0 / self.rate)

    def default_grid(self) -> Tuple[float, float]:
        return 0.0, float(self._dist().ppf(0.9999)) + 5.0

    def draw(self, n, rng):
        return -np.log1p(-rng.random(n)) / self.rate


class UniformDensity(_Family):
    family: Literal["uniform"] = "uniform"
    a: float = Field(..., description="Lower end")
    b: float = Field(..., description="Upper end")

    @model_validator(mode="after")
    def _check_interval(self):
        if not self.a < self.b:
            raise ValueError(f"uniform needs a < b, got a={self.a}, b={self.b}")
        return self

    def _dist(self):
        return stats.uniform(loc=self.a, scale=self.b - self.a)

    def default_grid(self) -> Tuple[float, float]:
        return self.a, self.b

    def draw(self, n, rng):
        return self.a + (self.b - self.a) * rng.random(n)


ParametricDensity = Annotated[
    Union[NormalDensity, PositiveTruncNormalDensity, GammaDensity, ExponentialDensity, UniformDensity],
    Field(discriminator="family"),
]

FAMILIES = {
    "normal": (NormalDensity, ("mu", "sigma")),
    "positive_trunc_normal": (PositiveTruncNormalDensity, ("mu", "sigma")),
    "gamma": (GammaDensity, ("alpha", "beta")),
    "exponential": (ExponentialDensity, ("rate",)),
    "uniform": (UniformDensity, ("a", "b")),
}


def parse_density(text: str) -> "_Family":
    """Parse 'family:p1,p2' (e.g. 'gamma:2,1') into a density"""
    name, _, params = text.partition(":")
    name = name.strip().lower().replace("-", "_")
    if name not in FAMILIES:
        raise ConfigError(f"Unknown density family '{name}', expected one of {sorted(FAMILIES)}")
    model, fields = FAMILIES[name]
    try:
        values = [float(v) for v in params.split(",")] if params.strip() else []
    except ValueError:
        raise ConfigError(f"Density parameters must be numbers: '{params}'")
    if len(values) != len(fields):
        raise ConfigError(f"Family '{name}' takes {len(fields)} parameters {fields}, got {len(values)}")
    return model(**dict(zip(fields, values)))


class MixtureSpec(BaseModel):
    """g(x) = (1 - p) known(x) + p unknown(x)"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    p: float = Field(..., ge=0, le=1, description="Weight of the unknown component")
    known: ParametricDensity = Field(..., description="Known component f0")
    unknown: ParametricDensity = Field(..., description="Unknown component f (simulation truth)")

    def pdf(self, x):
        return (1 - self.p) * self.known.pdf(x) + self.p * self.unknown.pdf(x)


@dataclass(frozen=True)
class Sample:
    """Observations X_1..X_n with optional provenance"""

    points: np.ndarray
    seed: Optional[int] = None
    provenance: Optional[str] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.array(self.points, dtype=float).ravel()
        if points.size == 0:
            raise ConfigError("Sample must be nonempty")
        if not np.all(np.isfinite(points)):
            raise ConfigError("Sample points must be finite")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    @property
    def n(self) -> int:
        return int(self.points.size)

    def subset(self, index: np.ndarray) -> "Sample":
        labels = None if self.labels is None else self.labels[index]
        return Sample(self.points[index], seed=self.seed, provenance=self.provenance, labels=labels)


def pdf_eval(d: "_Family", x):
    """Density at x, zero outside the support; a float for scalar x"""
    out = np.asarray(d.pdf(x), dtype=float)
    return float(out) if out.ndim == 0 else out


def sample(d: "_Family", n: int, seed: int) -> Sample:
    if n < 1:
        raise ConfigError(f"Sample size must be at least 1, got {n}")
    return Sample(d.draw(n, make_rng(seed)), seed=seed, provenance=d.label())


def sample_mixture(spec: MixtureSpec, n: int, seed: int) -> Sample:
    """Draw n points, each from `unknown` w.p. p and `known` otherwise.

    Membership, known draws and unknown draws use independent substreams of
    `seed`.
    """
    if n < 1:
        raise ConfigError(f"Sample size must be at least 1, got {n}")
    labels = make_rng(seed, 1).random(n) < spec.p
    n_unknown = int(labels.sum())
    points = np.empty(n)
    points[~labels] = spec.known.draw(n - n_unknown, make_rng(seed, 2))
    points[labels] = spec.unknown.draw(n_unknown, make_rng(seed, 3))
    provenance = f"mixture p={spec.p:g} known={spec.known.label()} unknown={spec.unknown.label()}"
    return Sample(points, seed=seed, provenance=provenance, labels=labels)


def tabulate(
    d: "_Family",
    lo: float,
    hi: float,
    n_points: Optional[int] = None,
    max_missing_mass: Optional[float] = 0.005,
) -> GridDensity:
    """Evaluate the pdf on a uniform grid and renormalize to unit trapezoidal mass.

    Grids missing more than `max_missing_mass` of the density's probability are
    rejected; with `max_missing_mass=None` the gap is only logged and noted.
    """
    n_points = n_points or default_grid_points()
    if not lo < hi:
        raise GridError(f"Grid needs lo < hi, got [{lo}, {hi}]")
    missing = 1.0 - float(d.cdf(hi) - d.cdf(lo))
    notes = []
    if missing > (0.005 if max_missing_mass is None else max_missing_mass):
        message = f"grid [{lo:.4g}, {hi:.4g}] misses {missing:.3%} of {d.label()}"
        if max_missing_mass is not None:
            raise GridError(message)
        logger.warning(message)
        notes.append(message)
    xs = np.linspace(lo, hi, n_points)
    density = GridDensity.from_values(lo, hi, d.pdf(xs))
    return GridDensity(density.grid, density.renormalization, density.warnings + tuple(notes))


def moment(f: GridDensity, k: int) -> float:
    if k < 1:
        raise ConfigError(f"Moment order must be at least 1, got {k}")
    return float(trapezoid(f.abscissae**k * f.values, dx=f.grid.step))


def ise(f, g_true: "_Family") -> float:
    """Integrated squared distance between a grid function and a closed-form density.

    Computed at the grid's step on the union of the grid span and the
    density's default grid; the grid function is zero outside its span.
    """
    grid: GridFn = f.grid if isinstance(f, GridDensity) else f
    t_lo, t_hi = g_true.default_grid()
    lo, hi = min(grid.lo, t_lo), max(grid.hi, t_hi)
    n_points = int(math.ceil((hi - lo) / grid.step - 1e-9)) + 1
    xs = np.linspace(lo, hi, n_points)
    diff = grid.evaluate(xs) - g_true.pdf(xs)
    return float(trapezoid(diff**2, xs))
