from enum import Enum
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.models.densities import MixtureSpec, ParametricDensity
from src.services.smoothing import DEFAULT_LOG_FLOOR, Kernel

SCHEMA_VERSION = "1"


class StopReason(str, Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"


class GridSpec(BaseModel):
    """Uniform grid carrying f, N f and every fitted curve"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    lo: float = Field(..., description="Left end of the grid")
    hi: float = Field(..., description="Right end of the grid")
    n_points: int = Field(1024, ge=2, description="Number of grid nodes, endpoints included")

    @model_validator(mode="after")
    def _check_span(self):
        if not self.lo < self.hi:
            raise ValueError(f"grid needs lo < hi, got lo={self.lo}, hi={self.hi}")
        return self


class MmConfig(BaseModel):
    """Settings of one MM fit"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kernel: Kernel = Field(Kernel.TRIANGULAR, description="Smoothing kernel")
    bandwidth: Optional[float] = Field(None, gt=0, description="Bandwidth h; None until a bandwidth mode resolves it")
    grid: Optional[GridSpec] = Field(None, description="Grid; None spans the data padded by the kernel reach")
    p_init: float = Field(0.3, gt=0, lt=1, description="Initial mixing proportion")
    f_init: Optional[ParametricDensity] = Field(None, description="Initial unknown component; None picks a default")
    tol: float = Field(1e-5, gt=0, description="Stop when |p(t+1) - p(t)| < tol")
    max_iters: int = Field(2000, ge=1, description="Iteration cap")
    log_floor: float = Field(DEFAULT_LOG_FLOOR, gt=0, description="Floor applied before taking logarithms")

    def with_bandwidth(self, h: float) -> "MmConfig":
        return self.model_copy(update={"bandwidth": float(h)})


class CvConfig(BaseModel):
    """Warm-up K-fold cross-validation over h_s +/- (i/M) l"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    folds: int = Field(50, ge=2, description="Number of folds K")
    half_range: float = Field(0.4, gt=0, description="Half-width l of the bandwidth grid")
    grid_steps: int = Field(10, ge=0, description="Steps M on each side of h_s")
    warmup: int = Field(5, ge=1, description="MM iterations T before scoring")
    fold_seed: int = Field(0, ge=0, description="Seed of the random fold partition")


class CvPoint(BaseModel):
    h: float
    cv: Optional[float] = Field(None, description="CV(h); None when the bandwidth failed")
    error: Optional[str] = None

    @property
    def valid(self) -> bool:
        return self.cv is not None


class CvCurve(BaseModel):
    points: List[CvPoint] = Field(..., description="Candidates in increasing h")
    h_star: float = Field(..., description="Smallest h attaining the minimal CV value")
    h_silverman: float = Field(..., description="Centre h_s of the candidate grid")


class TracePoint(BaseModel):
    t: int
    p: float
    objective: float


class NefPvfVariance(BaseModel):
    """V(mu) = scale * mu ** power"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["nef_pvf"] = "nef_pvf"
    scale: float = Field(1.0, description="alpha, nonzero")
    power: float = Field(..., description="gamma")

    @field_validator("scale")
    @classmethod
    def _nonzero(cls, v):
        if v == 0:
            raise ValueError("scale must be nonzero")
        return v


class TabulatedVariance(BaseModel):
    """V given at increasing mu values, linearly interpolated"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["tabulated"] = "tabulated"
    mu: List[float] = Field(..., min_length=2)
    v: List[float] = Field(..., min_length=2)

    @model_validator(mode="after")
    def _check_table(self):
        if len(self.mu) != len(self.v):
            raise ValueError("mu and v must have the same length")
        if any(b <= a for a, b in zip(self.mu, self.mu[1:])):
            raise ValueError("mu must be strictly increasing")
        if any(x <= 0 for x in self.v):
            raise ValueError("variance values must be positive")
        return self


VarianceFunction = Annotated[Union[NefPvfVariance, TabulatedVariance], Field(discriminator="kind")]

VARIANCE_PRESETS = {
    "normal": NefPvfVariance(power=0.0),
    "poisson": NefPvfVariance(power=1.0),
    "gamma": NefPvfVariance(power=2.0),
    "inverse_gaussian": NefPvfVariance(power=3.0),
}


class IdentifiabilityReport(BaseModel):
    condition_holds: bool
    witness: Optional[Tuple[float, float]] = Field(None, description="First adjacent pair where G fails to increase")
    notes: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _witness_iff_fails(self):
        if (self.witness is None) != self.condition_holds:
            raise ValueError("witness must be present exactly when the condition fails")
        return self


class SilvermanBandwidth(BaseModel):
    mode: Literal["silverman"] = "silverman"


class FixedBandwidth(BaseModel):
    mode: Literal["fixed"] = "fixed"
    h: float = Field(..., gt=0)


class CvBandwidth(BaseModel):
    mode: Literal["cv"] = "cv"
    cv: CvConfig = Field(default_factory=CvConfig)
    restart: bool = Field(False, description="Refit from the initial values instead of continuing the warm-up at h*")


BandwidthMode = Annotated[Union[SilvermanBandwidth, FixedBandwidth, CvBandwidth], Field(discriminator="mode")]

Statistic = Literal["p_hat", "ise", "mu_hat"]


class ExperimentSpec(BaseModel):
    """Seeded replication plan"""
    model_config = ConfigDict(extra="forbid")

    name: str = Field("experiment", description="Label used in output file names")
    mixture: MixtureSpec
    n: int = Field(..., ge=1, description="Sample size per replication")
    reps: int = Field(..., ge=1, description="Number of replications")
    master_seed: int = Field(0, ge=0, description="Seed every replication seed derives from")
    bandwidth: BandwidthMode = Field(default_factory=SilvermanBandwidth)
    mm: MmConfig = Field(default_factory=MmConfig)
    outputs: List[Statistic] = Field(default_factory=lambda: ["p_hat", "ise", "mu_hat"])


class SimulationFile(BaseModel):
    """Spec file for the simulate command: one experiment, optionally swept over p and n"""
    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentSpec
    p_values: Optional[List[float]] = Field(None, description="Sweep of the true p (mse curve)")
    sample_sizes: Optional[List[int]] = Field(None, description="Sweep of n")

    @field_validator("p_values")
    @classmethod
    def _open_unit_interval(cls, v):
        if v is not None and any(not 0 < p < 1 for p in v):
            raise ValueError("every p must lie in (0, 1)")
        return v


class RepRow(BaseModel):
    rep: int
    seed: int
    p_hat: Optional[float] = None
    ise: Optional[float] = None
    mu_hat: Optional[float] = None
    h: Optional[float] = None
    n_iters: Optional[int] = None
    stop_reason: Optional[StopReason] = None
    error: Optional[str] = None


class ExperimentSummary(BaseModel):
    spec: ExperimentSpec
    rows: List[RepRow]
    n_failed: int
    mse_p: Optional[float] = None
    mise: Optional[float] = None
    p_mean: Optional[float] = None
    p_sd: Optional[float] = None
    mu_mean: Optional[float] = None
    mu_sd: Optional[float] = None
    notes: List[str] = Field(default_factory=list)


class FitReport(BaseModel):
    """Serialized fit: estimate, curves on the grid, trace and config echo"""
    schema_version: str = SCHEMA_VERSION
    p_hat: float
    n_iters: int
    stop_reason: StopReason
    bandwidth: float
    x: List[float] = Field(..., description="Grid abscissae")
    f_hat: List[float] = Field(..., description="Fitted unknown component on the grid")
    mixture: List[float] = Field(..., description="(1 - p_hat) f0 + p_hat f_hat on the grid")
    trace: List[TracePoint]
    config: Dict[str, Any] = Field(default_factory=dict, description="Echo of every input needed to rerun")
