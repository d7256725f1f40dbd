"""Synthetic cohorts: smooth noise added to closed-form peaked signals.

Subject n is Y_n(s) = mu(s) + sigma(s) eps_n(s), where mu is the signal,
sigma(s) the noise scale profile and eps_n the convolution field of unit-variance
white noise on a unit-spaced lattice, divided pointwise by the kernel-weight
norm sqrt(sum_l K(s - l)^2) so that eps_n has variance one everywhere. White
noise for (seed, replicate, subject) comes from its own Philox substream.
"""

import math
from dataclasses import dataclass

import numpy as np

from peakcr import streams
from peakcr.config import (
    Beta1DSignal,
    BoxSpec,
    GaussBumps2DSignal,
    NoiseSpec,
    QuadraticSignal,
    SignalSpec,
    SpectrumExperimentConfig,
)
from peakcr.exceptions import ConfigError
from peakcr.grid_field import (
    Box,
    FieldJet,
    GaussianKernel,
    KernelWeights,
    Lattice,
    LatticeSample,
    PointwiseMixin,
    SmoothField,
    as_points,
    jet_quotient,
)
from peakcr.logging_config import get_logger
from peakcr.models import RegionTarget
from peakcr.peaks import refine
from peakcr.sample_fields import FieldCohort

logger = get_logger("noisegen")

PRESET_NAMES = ("narrow", "wide")


def domain_box(signal: SignalSpec) -> Box:
    return Box(tuple(signal.domain.lower), tuple(signal.domain.upper))


def _beta_jet(shape: Beta1DSignal, box: Box, x: np.ndarray, order: int) -> FieldJet:
    width = box.widths[0] / shape.n_peaks
    position = (x - box.lower[0]) / width
    section = np.clip(np.floor(position), 0, shape.n_peaks - 1)
    u = position - section
    inside = (u > 0.0) & (u < 1.0)
    a1, b1 = shape.a - 1.0, shape.b - 1.0
    mode = a1 / (a1 + b1)

    ui = u[inside]
    log_peak = a1 * math.log(mode) + b1 * math.log1p(-mode)
    g = shape.amplitude * np.exp(a1 * np.log(ui) + b1 * np.log1p(-ui) - log_peak)
    value = np.zeros_like(x)
    value[inside] = g
    if order == 0:
        return FieldJet(value)

    p = a1 / ui - b1 / (1.0 - ui)
    dp = -a1 / ui**2 - b1 / (1.0 - ui) ** 2
    gradient = np.zeros_like(x)
    hessian = np.zeros_like(x)
    gradient[inside] = g * p / width
    hessian[inside] = g * (p * p + dp) / width**2
    return FieldJet(value, gradient[:, None], hessian[:, None, None])


def _bumps_jet(shape: GaussBumps2DSignal, points: np.ndarray, order: int) -> FieldJet:
    m, dim = points.shape
    value = np.zeros(m)
    gradient = np.zeros((m, dim))
    hessian = np.zeros((m, dim, dim))
    bumps = zip(shape.centers, shape.widths, shape.amplitudes, strict=True)
    for center, width, amplitude in bumps:
        x = points - np.asarray(center)
        bump = amplitude * np.exp(-np.sum(x * x, axis=1) / (2.0 * width**2))
        value += bump
        if order:
            gradient += -x / width**2 * bump[:, None]
            outer = x[:, :, None] * x[:, None, :] / width**4 - np.eye(dim) / width**2
            hessian += outer * bump[:, None, None]
    return FieldJet(value) if order == 0 else FieldJet(value, gradient, hessian)


def _quadratic_jet(shape: QuadraticSignal, points: np.ndarray, order: int) -> FieldJet:
    x = points - np.asarray(shape.theta)
    value = -shape.curvature * np.sum(x * x, axis=1)
    if order == 0:
        return FieldJet(value)
    dim = points.shape[1]
    hessian = np.broadcast_to(-2.0 * shape.curvature * np.eye(dim), (len(points), dim, dim))
    return FieldJet(value, -2.0 * shape.curvature * x, hessian.copy())


def signal_jet(signal: SignalSpec, points: np.ndarray, order: int = 2) -> FieldJet:
    """Exact value, gradient and Hessian of the signal at (M, D) points."""
    pts = as_points(points, signal.domain.dim)
    shape = signal.shape
    if isinstance(shape, Beta1DSignal):
        return _beta_jet(shape, domain_box(signal), pts[:, 0], order)
    if isinstance(shape, GaussBumps2DSignal):
        return _bumps_jet(shape, pts, order)
    return _quadratic_jet(shape, pts, order)


def signal_eval(signal: SignalSpec, s: np.ndarray | float) -> float:
    return float(signal_jet(signal, s, order=0).value[0])


def signal_grad(signal: SignalSpec, s: np.ndarray | float) -> np.ndarray:
    return signal_jet(signal, s).gradient[0]


def signal_hessian(signal: SignalSpec, s: np.ndarray | float) -> np.ndarray:
    return signal_jet(signal, s).hessian[0]


def signal_modes(signal: SignalSpec) -> np.ndarray:
    """Closed-form peak locations, one row per peak.

    Exact for beta sections, a quadratic and isolated bumps; the centers of
    overlapping bumps are starting points only (see true_peaks).
    """
    shape = signal.shape
    if isinstance(shape, Beta1DSignal):
        width = (signal.domain.upper[0] - signal.domain.lower[0]) / shape.n_peaks
        mode = (shape.a - 1.0) / (shape.a + shape.b - 2.0)
        starts = signal.domain.lower[0] + width * np.arange(shape.n_peaks)
        return (starts + mode * width)[:, None]
    if isinstance(shape, GaussBumps2DSignal):
        return np.array(shape.centers, dtype=float)
    return np.array([shape.theta], dtype=float)


@dataclass(frozen=True, eq=False)
class SignalTerm:
    """The signal as an additive term of a smooth field."""

    signal: SignalSpec

    def jet(self, points: np.ndarray, order: int = 2) -> FieldJet:
        return signal_jet(self.signal, points, order)


@dataclass(frozen=True, eq=False)
class ScaleTerm:
    """sigma(s) = level + slope . (s - center)."""

    level: float
    slope: np.ndarray
    center: np.ndarray

    def jet(self, points: np.ndarray, order: int = 2) -> FieldJet:
        value = self.level + (points - self.center) @ self.slope
        if order == 0:
            return FieldJet(value)
        m, dim = points.shape
        gradient = np.broadcast_to(self.slope, (m, dim)).copy()
        return FieldJet(value, gradient, np.zeros((m, dim, dim)))


def scale_term(noise: NoiseSpec, box: Box) -> ScaleTerm | None:
    """The noise scale profile, or None for unit, constant scale."""
    slope = np.zeros(box.dim) if not noise.scale.slope else np.asarray(noise.scale.slope, float)
    if slope.shape != (box.dim,):
        raise ConfigError(f"noise scale slope needs {box.dim} entries, got {slope.size}")
    if noise.scale.level == 1.0 and not np.any(slope):
        return None
    corners = np.array(np.meshgrid(*zip(box.lower, box.upper, strict=True), indexing="ij"))
    corners = corners.reshape(box.dim, -1).T
    lowest = np.min(noise.scale.level + (corners - box.center) @ slope)
    if noise.scale.level > 0 and lowest <= 0:
        raise ConfigError("noise scale must stay positive over the whole domain")
    return ScaleTerm(noise.scale.level, slope, box.center)


def noise_lattice(signal: SignalSpec, kernel: GaussianKernel) -> Lattice:
    """Unit-spaced lattice covering the domain plus the kernel radius."""
    return Lattice.covering(domain_box(signal), math.ceil(kernel.radius))


def kernel_for(noise: NoiseSpec) -> GaussianKernel:
    return GaussianKernel(noise.fwhm, noise.truncation)


def white_noise(noise: NoiseSpec, size: int, seed: int, *keys: int) -> np.ndarray:
    """Unit-variance white noise for one subject (t noise rescaled before smoothing)."""
    rng = streams.generator(seed, *keys, streams.NOISE)
    if noise.marginal == "gaussian":
        return rng.standard_normal(size)
    return rng.standard_t(noise.df, size) / math.sqrt(noise.df / (noise.df - 2.0))


def _check_signal(signal: SignalSpec) -> None:
    """Require every signal mode strictly inside the domain.

    No kernel-radius margin is needed here: `noise_lattice` pads the lattice by
    ceil(kernel radius) on every side, so the whole domain, edges included, sees
    the full kernel support.
    """
    box = domain_box(signal)
    modes = signal_modes(signal)
    inside = box.contains(modes) & (box.distance_to_boundary(modes) > 0)
    if not np.all(inside):
        outside = modes[~inside].tolist()
        raise ConfigError(f"signal peaks {outside} are not strictly inside the domain")


def generate_cohort(
    signal: SignalSpec,
    noise: NoiseSpec,
    n: int,
    *,
    replicate: int = 0,
    seed: int | None = None,
) -> FieldCohort:
    """N subject fields sharing one lattice, kernel, signal and noise scale.

    Args:
        signal: Mean signal and domain.
        noise: Noise marginal, smoothing and scale.
        n: Number of subjects (at least 2).
        replicate: Replicate index, part of every subject's stream key.
        seed: Master seed (defaults to noise.seed).
    """
    _check_signal(signal)
    seed = noise.seed if seed is None else seed
    kernel = kernel_for(noise)
    lattice = noise_lattice(signal, kernel)
    box = domain_box(signal)
    offset = SignalTerm(signal)
    modulation = scale_term(noise, box)

    subjects = tuple(
        SmoothField(
            LatticeSample(lattice, white_noise(noise, lattice.size, seed, replicate, subject)),
            kernel,
            domain=box,
            standardize=noise.standardize,
            offset=offset,
            modulation=modulation,
        )
        for subject in range(n)
    )
    return FieldCohort(subjects)


def generate_lattice_samples(
    signal: SignalSpec, noise: NoiseSpec, n: int, *, replicate: int = 0, seed: int | None = None
) -> list[LatticeSample]:
    """Raw observations X_n(l) = mu(l) + sigma(l) w_n(l) on the noise lattice."""
    _check_signal(signal)
    seed = noise.seed if seed is None else seed
    kernel = kernel_for(noise)
    lattice = noise_lattice(signal, kernel)
    points = lattice.points
    mu = signal_jet(signal, points, order=0).value
    scale = scale_term(noise, domain_box(signal))
    sigma = np.ones(lattice.size) if scale is None else scale.jet(points, order=0).value
    return [
        LatticeSample(lattice, mu + sigma * white_noise(noise, lattice.size, seed, replicate, k))
        for k in range(n)
    ]


@dataclass(frozen=True, eq=False)
class TruthField(PointwiseMixin):
    """Population mean mu(s), or population Cohen's d mu(s) / sigma(s)."""

    signal: SignalSpec
    noise: NoiseSpec
    target: RegionTarget = RegionTarget.MEAN

    def __post_init__(self) -> None:
        if self.target == RegionTarget.COHENS_D and self.noise.scale.level <= 0:
            raise ConfigError("Cohen's d is undefined for noiseless cohorts")

    @property
    def domain(self) -> Box:
        return domain_box(self.signal)

    @property
    def dim(self) -> int:
        return self.signal.domain.dim

    @property
    def resolution(self) -> float:
        return 1.0

    def jet(self, points: np.ndarray, order: int = 2) -> FieldJet:
        pts = as_points(points, self.dim)
        mean = signal_jet(self.signal, pts, order)
        if self.target == RegionTarget.MEAN:
            return mean
        scale = scale_term(self.noise, self.domain)
        if scale is None:
            return mean
        return jet_quotient(mean, scale.jet(pts, order))


def true_peaks(signal: SignalSpec, noise: NoiseSpec, target: RegionTarget) -> np.ndarray:
    """True peak locations theta_j of the target field, one row per peak."""
    modes = signal_modes(signal)
    constant = not any(noise.scale.slope)
    if isinstance(signal.shape, Beta1DSignal | QuadraticSignal) and (
        target == RegionTarget.MEAN or constant
    ):
        return modes
    truth = TruthField(signal, noise, target)
    result = refine(truth, modes, np.ones(len(modes)), tol=1e-12, max_iters=100)
    if not np.all(result.converged):
        logger.warning("true peak refinement did not converge for every peak")
    return result.locations


def analytic_noise_grad_cov(
    lattice: Lattice, kernel: GaussianKernel, s: np.ndarray, standardize: bool = True
) -> np.ndarray:
    """Exact covariance of the gradient of unit white noise smoothed on `lattice`.

    With weights phi_l(s) = K(s - l) / sqrt(q(s)) (or K(s - l) unstandardized) the
    covariance is sum_l grad phi_l grad phi_l^T.
    """
    point = as_points(s, lattice.dim)
    weights = KernelWeights.build(lattice, kernel, point)
    k = weights.value.toarray()[0]
    dk = np.stack([op.toarray()[0] for op in weights.gradient], axis=-1)
    if standardize:
        q = weights.norm_jet.value[0]
        dq = weights.norm_jet.gradient[0]
        dk = dk / np.sqrt(q) - k[:, None] * dq[None, :] / (2.0 * q**1.5)
    return dk.T @ dk


def preset_signal(name: str, dim: int = 1, amplitude: float = 1.0) -> SignalSpec:
    """Narrow or wide peaks in 1D (beta sections) or 2D (Gaussian bumps).

    1D: three sections of Beta(1.5, 3) (narrow) or Beta(1.5, 2) (wide) on [0, 150].
    2D: two bumps of width 3 (narrow) or 6 (wide) on a 50 x 50 square.
    """
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    if dim == 1:
        b = 3.0 if name == "narrow" else 2.0
        return SignalSpec(
            shape=Beta1DSignal(a=1.5, b=b, n_peaks=3, amplitude=amplitude),
            domain=BoxSpec(lower=[0.0], upper=[150.0]),
        )
    if dim == 2:
        width = 3.0 if name == "narrow" else 6.0
        return SignalSpec(
            shape=GaussBumps2DSignal(
                centers=[[16.0, 16.0], [33.0, 33.0]],
                widths=[width, width],
                amplitudes=[amplitude, amplitude],
            ),
            domain=BoxSpec(lower=[0.0, 0.0], upper=[49.0, 49.0]),
        )
    raise ConfigError(f"presets exist for 1D and 2D only, got {dim}D")


def generate_series(config: SpectrumExperimentConfig, replicate: int = 0) -> np.ndarray:
    """(subjects, samples) time series: common sines plus independent white noise."""
    count = int(round(config.duration * config.welch.sample_rate))
    t = np.arange(count) / config.welch.sample_rate
    signal = np.zeros(count)
    for frequency, amplitude in zip(config.frequencies, config.amplitudes, strict=True):
        signal += amplitude * np.sin(2.0 * np.pi * frequency * t)
    series = np.empty((config.n_subjects, count))
    for subject in range(config.n_subjects):
        rng = streams.generator(config.master_seed, replicate, subject, streams.SERIES)
        series[subject] = signal + config.noise_sd * rng.standard_normal(count)
    return series
