"""Configuration loading and validation for peakcr.

Experiment configs are JSON or YAML documents (JSON parses as YAML) with a
versioned schema. Strings may reference environment variables as ${VAR_NAME};
a .env file in the working directory is loaded first.
"""

import os
import re
from pathlib import Path
from typing import Annotated, Any, Literal

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from peakcr.exceptions import ConfigError
from peakcr.models import CovarianceMode, RegionMethod, RegionTarget

SCHEMA_VERSION = 1


def substitute_env_vars(value: str) -> str:
    """Substitute ${VAR_NAME} patterns with environment variables.

    Args:
        value: String potentially containing ${VAR_NAME} patterns.

    Returns:
        String with environment variables substituted.

    Raises:
        ValueError: If a referenced environment variable is not set.
    """
    pattern = r"\$\{([^}]+)\}"

    def replacer(match: re.Match[str]) -> str:
        var_name = match.group(1)
        env_value = os.environ.get(var_name)
        if env_value is None:
            raise ValueError(f"Environment variable {var_name} not set")
        return env_value

    return re.sub(pattern, replacer, value)


def _substitute(data: Any) -> Any:
    """Recursively substitute env vars in strings of a parsed document."""
    if isinstance(data, str):
        return substitute_env_vars(data)
    if isinstance(data, dict):
        return {key: _substitute(value) for key, value in data.items()}
    if isinstance(data, list):
        return [_substitute(item) for item in data]
    return data


def json_pointer(loc: tuple[int | str, ...]) -> str:
    """Render a pydantic error location as a JSON pointer (RFC 6901)."""
    parts = [str(part).replace("~", "~0").replace("/", "~1") for part in loc]
    return "/" + "/".join(parts)


def describe_validation_error(error: ValidationError) -> str:
    """One line per failure, each prefixed with the failing JSON pointer."""
    return "\n".join(f"{json_pointer(item['loc'])}: {item['msg']}" for item in error.errors())


class BoxSpec(BaseModel):
    """Axis-aligned box in voxel coordinates."""

    lower: list[float] = Field(description="Lower corner", min_length=1, max_length=2)
    upper: list[float] = Field(description="Upper corner", min_length=1, max_length=2)

    @model_validator(mode="after")
    def _check_corners(self) -> "BoxSpec":
        if len(self.lower) != len(self.upper):
            raise ValueError("lower and upper must have the same dimension")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper, strict=True)):
            raise ValueError("lower must be strictly below upper on every axis")
        return self

    @property
    def dim(self) -> int:
        return len(self.lower)


class Ball(BaseModel):
    """Search ball B_j = {s : |s - center| <= radius}."""

    center: list[float] = Field(description="Ball center", min_length=1, max_length=2)
    radius: float = Field(description="Ball radius", gt=0.0)


class SearchSpec(BaseModel):
    """Peak search settings."""

    grid_refinement: int = Field(
        description="Seeding grid evaluations per voxel per axis", default=11, ge=1
    )
    balls: list[Ball] | None = Field(description="Search balls (None = whole domain)", default=None)
    newton_tol: float = Field(
        description="Gradient norm tolerance relative to the field scale", default=1e-8, gt=0.0
    )
    max_iters: int = Field(description="Maximum Newton iterations per seed", default=50, ge=1)
    dedup_radius: float = Field(
        description="Converged points closer than this (voxels) are merged", default=1e-4, gt=0.0
    )

    @field_validator("balls")
    @classmethod
    def _balls_disjoint(cls, balls: list[Ball] | None) -> list[Ball] | None:
        if not balls:
            return balls
        dims = {len(ball.center) for ball in balls}
        if len(dims) != 1:
            raise ValueError("all balls must share one dimension")
        for i, first in enumerate(balls):
            for second in balls[i + 1 :]:
                gap = sum((a - b) ** 2 for a, b in zip(first.center, second.center, strict=True))
                if gap**0.5 <= first.radius + second.radius:
                    raise ValueError("search balls must be pairwise disjoint")
        return balls


class McConfig(BaseModel):
    """Monte Carlo region settings."""

    draws: int = Field(description="Number of Monte Carlo draws K", default=100_000, ge=1000)
    eigen_floor: float = Field(
        description="Hessian draws must keep this fraction of the observed smallest eigenvalue",
        default=0.05,
        gt=0.0,
        lt=1.0,
    )
    seed: int = Field(description="Seed for the draw stream", default=0, ge=0)
    max_discard_fraction: float = Field(
        description="Error out when more draws than this are discarded", default=0.5, gt=0.0, le=1.0
    )


class NoiseScale(BaseModel):
    """Standard deviation profile sigma(s) = level + slope . (s - domain center)."""

    level: float = Field(description="Standard deviation at the domain center", default=1.0, ge=0.0)
    slope: list[float] = Field(description="Linear slope per axis (empty = constant)", default=[])

    @property
    def is_constant(self) -> bool:
        return not any(self.slope)


class NoiseSpec(BaseModel):
    """Smoothed white noise settings."""

    marginal: Literal["gaussian", "student_t"] = Field(
        description="Marginal distribution of the white noise", default="gaussian"
    )
    df: float = Field(description="Degrees of freedom for student_t noise", default=3.0, ge=3.0)
    fwhm: float = Field(description="Kernel FWHM in voxels", default=6.0, gt=0.0)
    truncation: float = Field(description="Kernel truncation radius in sigmas", default=4.0, gt=0.0)
    standardize: bool = Field(description="Divide by the exact kernel-weight norm", default=True)
    seed: int = Field(description="Seed for stand-alone cohorts", default=0, ge=0)
    scale: NoiseScale = Field(default_factory=NoiseScale)


class Beta1DSignal(BaseModel):
    """Repeated sections of a beta density, one per equal slice of the domain."""

    kind: Literal["beta1d"] = "beta1d"
    a: float = Field(description="First beta shape parameter", default=1.5, gt=1.0)
    b: float = Field(description="Second beta shape parameter", default=3.0, gt=1.0)
    n_peaks: int = Field(description="Number of repeated sections", default=3, ge=1)
    amplitude: float = Field(description="Peak height", default=1.0)


class GaussBumps2DSignal(BaseModel):
    """Sum of isotropic Gaussian bumps."""

    kind: Literal["gauss_bumps2d"] = "gauss_bumps2d"
    centers: list[list[float]] = Field(description="Bump centers", min_length=1)
    widths: list[float] = Field(description="Bump standard deviations")
    amplitudes: list[float] = Field(description="Bump heights")

    @model_validator(mode="after")
    def _check_lengths(self) -> "GaussBumps2DSignal":
        if not len(self.centers) == len(self.widths) == len(self.amplitudes):
            raise ValueError("centers, widths and amplitudes must have equal length")
        if any(len(center) != 2 for center in self.centers):
            raise ValueError("bump centers must be 2D")
        if any(width <= 0 for width in self.widths):
            raise ValueError("bump widths must be positive")
        return self


class QuadraticSignal(BaseModel):
    """-curvature * |s - theta|^2."""

    kind: Literal["quadratic"] = "quadratic"
    theta: list[float] = Field(description="Peak location", min_length=1, max_length=2)
    curvature: float = Field(description="Curvature c >= 0", default=1.0, ge=0.0)


SignalShape = Annotated[
    Beta1DSignal | GaussBumps2DSignal | QuadraticSignal, Field(discriminator="kind")
]


class SignalSpec(BaseModel):
    """Mean signal and the domain it lives on."""

    shape: SignalShape
    domain: BoxSpec

    @model_validator(mode="after")
    def _check_dimension(self) -> "SignalSpec":
        expected = {"beta1d": 1, "gauss_bumps2d": 2}.get(self.shape.kind)
        if isinstance(self.shape, QuadraticSignal):
            expected = len(self.shape.theta)
        if expected != self.domain.dim:
            raise ValueError(f"{self.shape.kind} signal needs a {expected}D domain")
        return self


class ExperimentConfig(BaseModel):
    """Coverage / identifiability experiment."""

    version: Literal[1] = SCHEMA_VERSION
    signal: SignalSpec
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    n_list: list[int] = Field(description="Sample sizes", default=[20, 100], min_length=1)
    nsim: int = Field(description="Replicates per sample size", default=1000, ge=1)
    alpha: float = Field(description="Nominal level", default=0.05, gt=0.0, lt=1.0)
    methods: list[RegionMethod] = Field(
        default=[RegionMethod.ASYMPTOTIC, RegionMethod.MONTE_CARLO], min_length=1
    )
    target: RegionTarget = RegionTarget.MEAN
    search: SearchSpec = Field(default_factory=SearchSpec)
    mc: McConfig = Field(default_factory=McConfig)
    covariance_mode: CovarianceMode = CovarianceMode.STATIONARY_POOLED
    master_seed: int = Field(description="Seed all replicate streams derive from", default=0, ge=0)
    threads: int = Field(description="Worker threads for replicates", default=1, ge=1)
    failure_tolerance: float = Field(
        description="Maximum fraction of failed replicates", default=0.05, ge=0.0, le=1.0
    )
    threshold_override: float | None = Field(
        description="Replace every region threshold (diagnostics only)", default=None, ge=0.0
    )
    track_identifiability: bool = True

    @field_validator("n_list")
    @classmethod
    def _check_sizes(cls, n_list: list[int]) -> list[int]:
        if any(n < 2 for n in n_list):
            raise ValueError("every sample size must be at least 2")
        return n_list

    @model_validator(mode="after")
    def _check_combination(self) -> "ExperimentConfig":
        if self.target == RegionTarget.COHENS_D and RegionMethod.MONTE_CARLO in self.methods:
            raise ValueError("unsupported: Monte Carlo for Cohen's d")
        return self


class WelchSpec(BaseModel):
    """Welch power spectrum settings."""

    segment_length: int = Field(description="Segment length a in samples", default=240, ge=8)
    window_edge: float = Field(
        description="Gaussian window value at the segment ends", default=0.05, gt=0.0, lt=1.0
    )
    sample_rate: float = Field(description="Sampling rate in Hz", default=240.0, gt=0.0)
    demean: bool = Field(description="Remove each segment's mean before windowing", default=True)

    @field_validator("segment_length")
    @classmethod
    def _even(cls, value: int) -> int:
        if value % 2:
            raise ValueError("segment_length must be even")
        return value

    @property
    def overlap(self) -> int:
        return self.segment_length // 2

    @property
    def stride(self) -> int:
        return self.segment_length - self.overlap

    @property
    def frequency_step(self) -> float:
        return self.sample_rate / self.segment_length


class SpectrumExperimentConfig(BaseModel):
    """End-to-end coverage of the spectrum peak pipeline on synthetic series."""

    version: Literal[1] = SCHEMA_VERSION
    welch: WelchSpec = Field(
        default_factory=lambda: WelchSpec(segment_length=240, sample_rate=24.0)
    )
    frequencies: list[float] = Field(description="Sine frequencies (Hz)", default=[0.9, 2.3])
    amplitudes: list[float] = Field(description="Sine amplitudes", default=[1.0, 1.0])
    noise_sd: float = Field(description="White noise standard deviation", default=1.0, gt=0.0)
    duration: float = Field(description="Series length in seconds", default=120.0, gt=0.0)
    n_subjects: int = Field(default=20, ge=2)
    nsim: int = Field(default=200, ge=1)
    alpha: float = Field(default=0.05, gt=0.0, lt=1.0)
    method: RegionMethod = RegionMethod.ASYMPTOTIC
    target: RegionTarget = RegionTarget.MEAN
    ball_radius: float = Field(description="Search radius around each frequency", default=0.3, gt=0)
    search: SearchSpec = Field(default_factory=SearchSpec)
    mc: McConfig = Field(default_factory=McConfig)
    master_seed: int = Field(default=0, ge=0)
    threads: int = Field(default=1, ge=1)
    failure_tolerance: float = Field(default=0.05, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check(self) -> "SpectrumExperimentConfig":
        if len(self.frequencies) != len(self.amplitudes):
            raise ValueError("frequencies and amplitudes must have equal length")
        if self.target == RegionTarget.COHENS_D and self.method == RegionMethod.MONTE_CARLO:
            raise ValueError("unsupported: Monte Carlo for Cohen's d")
        return self


def _load_document(path: Path) -> Any:
    load_dotenv()

    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")

    with open(path) as f:
        try:
            raw_data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse {path}: {e}") from e

    try:
        return _substitute(raw_data if raw_data is not None else {})
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e


def load_config(path: Path) -> ExperimentConfig:
    """Load and validate an experiment configuration file.

    Args:
        path: Path to the JSON or YAML configuration file.

    Returns:
        Validated ExperimentConfig instance.

    Raises:
        FileNotFoundError: If the config file doesn't exist.
        ConfigError: If the file is not valid YAML or names an unset variable.
        ValidationError: If the config is invalid.
    """
    return ExperimentConfig.model_validate(_load_document(path))


def load_spectrum_config(path: Path) -> SpectrumExperimentConfig:
    """Load and validate a spectrum experiment configuration file."""
    return SpectrumExperimentConfig.model_validate(_load_document(path))
