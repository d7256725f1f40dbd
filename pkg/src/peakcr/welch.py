"""Welch log-power spectra as smooth fields over frequency.

A series is cut into half-overlapping segments of length a, each segment is
multiplied by a Gaussian window and transformed. Evaluating the windowed
transform off the DFT grid is the same as convolving the segment's DFT with the
window's transform:

    D(s) = sum_t w_t x_t exp(-2 pi i t s / R)
         = (1/a) sum_k W(s - f_k) X(f_k),     f_k = R k / a

so the per-segment spectrum is a smooth (periodic) convolution field on the
frequency lattice. The subject field is the average over segments of
10 log10 |D(s)|^2, with exact first and second derivatives in s.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.signal import windows

from peakcr.config import Ball, McConfig, SearchSpec, WelchSpec
from peakcr.exceptions import DataError
from peakcr.grid_field import (
    Box,
    FieldJet,
    Lattice,
    LatticeSample,
    PointwiseMixin,
    as_points,
    require_inside,
)
from peakcr.logging_config import get_logger
from peakcr.models import (
    ConfidenceEllipsoid,
    CovarianceMode,
    DerivedFieldKind,
    PeakEstimate,
    RegionMethod,
    RegionTarget,
)
from peakcr.peaks import argmax_in_ball
from peakcr.regions import bonferroni_joint, region_for_peak
from peakcr.sample_fields import FieldCohort

logger = get_logger("welch")

POWER_FLOOR = 1e-300
DB_SCALE = 10.0 / np.log(10.0)


def segment(series: np.ndarray, spec: WelchSpec) -> np.ndarray:
    """(M, a) segments starting every a - a // 2 samples; a trailing partial segment is dropped."""
    x = np.asarray(series)
    if x.ndim != 1:
        raise DataError(f"a series must be one-dimensional, got shape {x.shape}")
    a = spec.segment_length
    if len(x) < a:
        raise DataError(f"series of length {len(x)} is shorter than one segment ({a})")
    count = (len(x) - a) // spec.stride + 1
    starts = spec.stride * np.arange(count)
    return x[starts[:, None] + np.arange(a)[None, :]]


def gaussian_window(a: int, edge: float) -> np.ndarray:
    """Symmetric Gaussian window of length a taking the value `edge` at both ends."""
    half = (a - 1) / 2.0
    std = half / np.sqrt(2.0 * np.log(1.0 / edge))
    return windows.gaussian(a, std, sym=True)


@dataclass(frozen=True, eq=False)
class WindowKernel:
    """Transform of the window, W(v) = sum_t w_t exp(-2 pi i t v / R), with derivatives."""

    weights: np.ndarray
    sample_rate: float

    @classmethod
    def from_spec(cls, spec: WelchSpec) -> "WindowKernel":
        return cls(gaussian_window(spec.segment_length, spec.window_edge), spec.sample_rate)

    @property
    def length(self) -> int:
        return len(self.weights)

    @cached_property
    def table(self) -> np.ndarray:
        """W at the lattice offsets f_k, k = 0..a-1."""
        return np.fft.fft(self.weights)

    def evaluate(
        self, offsets: np.ndarray, order: int = 2
    ) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
        v = np.asarray(offsets, dtype=float)
        omega = -2j * np.pi * np.arange(self.length) / self.sample_rate
        phase = np.exp(v[..., None] * omega)
        w = phase @ self.weights
        if order == 0:
            return w, None, None
        return w, phase @ (omega * self.weights), phase @ (omega**2 * self.weights)


def convolve_segment(segment_dft: np.ndarray, kernel: WindowKernel, s: np.ndarray) -> np.ndarray:
    """(1/a) sum_k W(s - f_k) X(f_k) at each frequency in s."""
    a = kernel.length
    lattice = kernel.sample_rate * np.arange(a) / a
    offsets = np.asarray(s, dtype=float).reshape(-1)[:, None] - lattice[None, :]
    w, _, _ = kernel.evaluate(offsets, order=0)
    return w @ np.asarray(segment_dft) / a


@dataclass(frozen=True, eq=False)
class SpectrumField(PointwiseMixin):
    """Segment-averaged log-power (dB) of one series over [0, R/2]."""

    tapered: np.ndarray
    spec: WelchSpec

    def __post_init__(self) -> None:
        tapered = np.atleast_2d(np.asarray(self.tapered))
        if tapered.shape[1] != self.spec.segment_length:
            raise DataError(
                f"segments have length {tapered.shape[1]}, expected {self.spec.segment_length}"
            )
        object.__setattr__(self, "tapered", tapered)

    @property
    def segments(self) -> int:
        return len(self.tapered)

    @property
    def kernel(self) -> WindowKernel:
        return WindowKernel.from_spec(self.spec)

    @property
    def lattice(self) -> Lattice:
        """The DFT frequencies inside [0, R/2]."""
        a = self.spec.segment_length
        return Lattice((a // 2 + 1,), (self.spec.frequency_step,), (0.0,))

    @property
    def domain(self) -> Box:
        return Box((0.0,), (self.spec.sample_rate / 2.0,))

    @property
    def dim(self) -> int:
        return 1

    @property
    def resolution(self) -> float:
        return self.spec.frequency_step

    def transforms(
        self, points: np.ndarray, order: int = 2
    ) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
        """Windowed segment transforms D and their s-derivatives, shape (locations, M)."""
        s = as_points(points, 1)[:, 0]
        omega = -2j * np.pi * np.arange(self.spec.segment_length) / self.spec.sample_rate
        phase = np.exp(s[:, None] * omega[None, :])
        d = phase @ self.tapered.T
        if order == 0:
            return d, None, None
        return d, (phase * omega) @ self.tapered.T, (phase * omega**2) @ self.tapered.T

    def power(self, points: np.ndarray) -> np.ndarray:
        d, _, _ = self.transforms(points, order=0)
        return np.abs(d) ** 2

    def periodic_jet(self, points: np.ndarray, order: int = 2) -> FieldJet:
        """The field at any frequency, using the R-periodic extension."""
        d, d1, d2 = self.transforms(points, order)
        p = np.abs(d) ** 2
        low = p < POWER_FLOOR
        if np.any(low):
            logger.warning(f"Segment power below {POWER_FLOOR:g} at {int(np.sum(low))} point(s)")
            p = np.maximum(p, POWER_FLOOR)
        scale = DB_SCALE / self.segments
        value = scale * np.sum(np.log(p), axis=1)
        if order == 0:
            return FieldJet(value)
        p1 = 2.0 * np.real(np.conj(d) * d1)
        p2 = 2.0 * (np.abs(d1) ** 2 + np.real(np.conj(d) * d2))
        ratio = p1 / p
        gradient = scale * np.sum(ratio, axis=1)
        hessian = scale * np.sum(p2 / p - ratio**2, axis=1)
        return FieldJet(value, gradient[:, None], hessian[:, None, None])

    def jet(self, points: np.ndarray, order: int = 2) -> FieldJet:
        pts = as_points(points, 1)
        require_inside(self.domain, pts)
        return self.periodic_jet(pts, order)

    def lattice_sample(self) -> LatticeSample:
        """The field at its lattice frequencies, for export."""
        lattice = self.lattice
        return LatticeSample(lattice, self.periodic_jet(lattice.points, order=0).value)


def taper(series: np.ndarray, spec: WelchSpec) -> np.ndarray:
    segments = segment(series, spec)
    if spec.demean:
        segments = segments - segments.mean(axis=1, keepdims=True)
    return segments * gaussian_window(spec.segment_length, spec.window_edge)


def spectrum_field(series: np.ndarray, spec: WelchSpec) -> SpectrumField:
    return SpectrumField(taper(series, spec), spec)


def spectrum_cohort(series_matrix: np.ndarray, spec: WelchSpec) -> FieldCohort:
    """One spectrum field per row of a (subjects, samples) matrix."""
    matrix = np.asarray(series_matrix)
    if matrix.ndim != 2:
        raise DataError(f"expected a (subjects, samples) matrix, got shape {matrix.shape}")
    return FieldCohort(tuple(spectrum_field(row, spec) for row in matrix))


@dataclass(frozen=True)
class SpectrumRegions:
    peaks: list[PeakEstimate]
    marginal: list[ConfidenceEllipsoid]
    joint: list[ConfidenceEllipsoid]


def spectrum_peak_regions(
    cohort: FieldCohort,
    balls: list[Ball],
    alpha: float,
    target: RegionTarget = RegionTarget.MEAN,
    method: RegionMethod = RegionMethod.ASYMPTOTIC,
    mc: McConfig | None = None,
    search: SearchSpec | None = None,
    stream_key: tuple[int, ...] = (),
) -> SpectrumRegions:
    """Peaks of the cohort spectrum in each ball with marginal and joint regions.

    Spectra are not stationary in frequency, so covariances are estimated at each
    peak. The regions are Bonferroni-corrected to familywise level alpha.
    """
    kind = DerivedFieldKind.MEAN if target == RegionTarget.MEAN else DerivedFieldKind.COHENS_D
    field = cohort.field(kind)
    peaks = [argmax_in_ball(field, ball, search, j) for j, ball in enumerate(balls)]
    marginal = [
        region_for_peak(
            cohort,
            peak,
            method,
            target,
            alpha,
            covariance_mode=CovarianceMode.POINTWISE,
            mc=mc,
            stream_key=(*stream_key, j),
        )
        for j, peak in enumerate(peaks)
    ]
    return SpectrumRegions(peaks, marginal, bonferroni_joint(marginal, alpha))
