"""Data models for peakcr.

Records that leave the library (peak lists, covariance estimates, confidence
regions, simulation reports) are pydantic models. Arrays are held as numpy
arrays and serialize to nested lists.
"""

from enum import Enum
from typing import Annotated, Any, Literal

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, PlainSerializer, model_validator

from peakcr.exceptions import SingularCovarianceError

MAX_CONDITION = 1e12


def _to_float_array(value: Any) -> np.ndarray:
    return np.array(value, dtype=float)


FloatArray = Annotated[
    np.ndarray,
    BeforeValidator(_to_float_array),
    PlainSerializer(lambda array: array.tolist(), return_type=list),
]


class ArrayModel(BaseModel):
    """Base for frozen records carrying numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True, populate_by_name=True)


class PeakKind(str, Enum):
    """Classification of a critical point by its Hessian eigenvalues."""

    MAX = "max"
    MIN = "min"
    SADDLE = "saddle"
    DEGENERATE = "degenerate"


class RegionMethod(str, Enum):
    """How a confidence region's threshold is obtained."""

    ASYMPTOTIC = "asym"
    MONTE_CARLO = "mc"


class RegionTarget(str, Enum):
    """Which field's peak a region is about."""

    MEAN = "mean"
    COHENS_D = "cohensd"


class CovarianceMode(str, Enum):
    """Whether covariance moments come from one point or are pooled over space."""

    POINTWISE = "pointwise"
    STATIONARY_POOLED = "pooled"


class DerivedFieldKind(str, Enum):
    """Cohort-level fields assembled from the subject fields."""

    MEAN = "mean"
    VARIANCE = "variance"
    TSTAT = "tstat"
    COHENS_D = "cohensd"


class PeakEstimate(ArrayModel):
    """A refined critical point of a smooth field."""

    location: FloatArray = Field(description="Location of the critical point")
    value: float = Field(description="Field value at the location")
    gradient_norm: float = Field(description="Euclidean norm of the gradient", ge=0.0)
    hessian: FloatArray = Field(description="Hessian at the location (D x D)")
    kind: PeakKind = Field(description="Eigenvalue classification")
    ball_index: int | None = Field(description="Index of the search ball holding it", default=None)

    @property
    def dim(self) -> int:
        return int(self.location.shape[0])

    def to_record(self) -> dict[str, Any]:
        """JSON record {location, value, kind, hessian, ball_index}."""
        return self.model_dump(
            mode="json", include={"location", "value", "kind", "hessian", "ball_index"}
        )


class GradCov(ArrayModel):
    """Gradient covariance objects at a point (or pooled over the domain)."""

    lambda_: FloatArray = Field(alias="lambda", description="cov of the gradient (D x D)")
    gamma: FloatArray = Field(description="E[(Y - mu) grad Y], held as a D-vector")
    sigma2: float = Field(description="Variance of the component fields", ge=0.0)
    mode: CovarianceMode = Field(description="Pointwise or stationary pooled")
    gamma_layout: Literal["column"] = "column"

    @property
    def dim(self) -> int:
        return int(self.gamma.shape[0])

    def require_nonsingular(self, max_condition: float = MAX_CONDITION) -> "GradCov":
        """Return self, or raise SingularCovarianceError if lambda is ill-conditioned."""
        eigenvalues = np.linalg.eigvalsh(self.lambda_)
        if eigenvalues[0] <= 0 or eigenvalues[-1] / eigenvalues[0] > max_condition:
            raise SingularCovarianceError(
                f"gradient covariance is singular (eigenvalues {eigenvalues.tolist()})"
            )
        return self


class HessCov(ArrayModel):
    """Covariance of the half-vectorized Hessian of the component fields."""

    omega: FloatArray = Field(description="cov(vech(Hessian)), D(D+1)/2 square")
    mode: CovarianceMode = Field(description="Pointwise or stationary pooled")
    vech_order: Literal["lower-column-major"] = "lower-column-major"


class ConfidenceEllipsoid(ArrayModel):
    """{theta : n (center - theta)^T shape^-1 (center - theta) < threshold}."""

    center: FloatArray = Field(description="Estimated peak location")
    shape: FloatArray = Field(description="Symmetric positive definite shape matrix")
    threshold: float = Field(description="Chi-square quantile or Monte Carlo lambda", ge=0.0)
    n: int = Field(description="Number of subjects", ge=1)
    alpha: float = Field(description="Nominal level", gt=0.0, lt=1.0)
    method: RegionMethod
    target: RegionTarget
    draws_discarded: int = Field(description="Monte Carlo draws discarded", default=0, ge=0)
    draw_statistics: np.ndarray | None = Field(default=None, exclude=True, repr=False)

    @model_validator(mode="after")
    def _check_shape(self) -> "ConfidenceEllipsoid":
        d = self.center.shape[0]
        if self.shape.shape != (d, d):
            raise ValueError(f"shape must be {d}x{d}, got {self.shape.shape}")
        if not np.allclose(self.shape, self.shape.T, rtol=1e-10, atol=0.0):
            raise ValueError("shape must be symmetric")
        if np.linalg.eigvalsh(self.shape)[0] <= 0:
            raise ValueError("shape must be positive definite")
        return self

    @property
    def dim(self) -> int:
        return int(self.center.shape[0])


class CoverageRow(BaseModel):
    """Marginal coverage of one peak for one (N, method) setting."""

    n: int
    method: RegionMethod
    peak: int
    hits: int = Field(ge=0)
    trials: int = Field(ge=0)
    empirical_coverage: float = Field(ge=0.0, le=1.0)
    band: float = Field(description="Binomial 95% band half-width", ge=0.0)


class CoverageSummary(BaseModel):
    """Averaged and joint coverage for one (N, method) setting."""

    n: int
    method: RegionMethod
    trials: int = Field(ge=0)
    failures: int = Field(ge=0)
    average_empirical_coverage: float = Field(ge=0.0, le=1.0)
    joint_hits: int = Field(ge=0)
    empirical_joint_coverage: float = Field(ge=0.0, le=1.0)
    joint_band: float = Field(ge=0.0)
    identifiability_rate: float | None = Field(default=None, ge=0.0, le=1.0)


class CoverageReport(BaseModel):
    """Result of a coverage experiment."""

    target: RegionTarget
    alpha: float
    nsim: int
    master_seed: int
    rows: list[CoverageRow] = Field(default_factory=list)
    summaries: list[CoverageSummary] = Field(default_factory=list)

    def summary(self, n: int, method: RegionMethod) -> CoverageSummary:
        for item in self.summaries:
            if item.n == n and item.method == method:
                return item
        raise KeyError(f"no summary for n={n}, method={method.value}")


class IdentifiabilityRow(BaseModel):
    """Identifiability tally at one sample size."""

    n: int
    replicates: int
    identified: int
    rate: float = Field(ge=0.0, le=1.0)
    outside_rate: float = Field(
        description="Fraction of replicates with a maximum outside every ball", ge=0.0, le=1.0
    )
    band: float = Field(ge=0.0)


class IdentifiabilityReport(BaseModel):
    """Empirical check that each ball holds exactly one peak."""

    rows: list[IdentifiabilityRow]
    min_outside_gradient: float = Field(
        description="Smallest true gradient norm seen outside the balls"
    )
    flat_fraction: float = Field(
        description="Fraction of the outside grid where the true gradient vanishes"
    )
    assumption_violated: bool


class MomentReport(ArrayModel):
    """Empirical moments compared against their theoretical targets."""

    name: str
    reps: int
    expected: FloatArray
    empirical: FloatArray
    max_relative_deviation: float
    extras: dict[str, float] = Field(default_factory=dict)


class DominanceRow(BaseModel):
    """Tail probabilities of A/E[B] and A/B at one threshold x."""

    x: float
    p_mean_ratio: float
    p_ratio: float
    band: float
    exact_mean_ratio: float | None = None
    exact_ratio: float | None = None
    holds: bool


class DominanceReport(BaseModel):
    """Empirical check that dividing by B fattens the upper tail."""

    reps: int
    rows: list[DominanceRow]
    holds: bool
