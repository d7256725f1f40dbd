"""Cohort-level fields: sample mean, sample variance, t-statistic and Cohen's d.

For component fields Y_1..Y_N the derived fields are

    mean      mu(s)  = (1/N) sum_n Y_n(s)
    variance  v(s)   = (1/(N-1)) sum_n (Y_n(s) - mu(s))^2
    Cohen's d d(s)   = mu(s) / sqrt(v(s))
    t         T(s)   = sqrt(N) d(s)

with exact first and second derivatives assembled from the subject jets.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from peakcr.exceptions import DataError, DegenerateVarianceError
from peakcr.grid_field import (
    Box,
    Field,
    FieldJet,
    PointwiseMixin,
    SmoothField,
    as_points,
    convolution_jet,
    jet_quotient,
    jet_scale,
    jet_sqrt,
    require_inside,
)
from peakcr.models import DerivedFieldKind

VAR_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class FieldCohort:
    """N >= 2 subject fields sharing one domain.

    Subjects are usually SmoothFields; any Field works (spectrum fields, for one).
    """

    subjects: tuple[Field, ...]
    var_floor: float = VAR_FLOOR

    def __post_init__(self) -> None:
        subjects = tuple(self.subjects)
        if len(subjects) < 2:
            raise DataError(f"a cohort needs at least 2 subjects, got {len(subjects)}")
        first = subjects[0]
        if any(subject.domain != first.domain for subject in subjects):
            raise DataError("all subjects must share one domain")
        object.__setattr__(self, "subjects", subjects)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def dim(self) -> int:
        return self.subjects[0].dim

    @property
    def domain(self) -> Box:
        return self.subjects[0].domain

    @property
    def resolution(self) -> float:
        return self.subjects[0].resolution

    @cached_property
    def _stacked_values(self) -> np.ndarray | None:
        first = self.subjects[0]
        if not all(isinstance(subject, SmoothField) for subject in self.subjects):
            return None
        if all(first.shares_operators_with(subject) for subject in self.subjects[1:]):
            return np.stack([subject.sample.flat for subject in self.subjects], axis=1)
        return None

    def subject_jets(self, points: np.ndarray, order: int = 2) -> FieldJet:
        """Jets of every subject, leading axes (locations, subjects)."""
        pts = as_points(points, self.dim)
        require_inside(self.domain, pts)
        values = self._stacked_values
        if values is not None:
            first = self.subjects[0]
            return convolution_jet(
                first.lattice,
                first.kernel,
                values,
                pts,
                order,
                first.standardize,
                first.offset,
                first.modulation,
            )
        jets = [subject.jet(pts, order) for subject in self.subjects]
        if order == 0:
            return FieldJet(np.stack([j.value for j in jets], axis=1))
        return FieldJet(
            np.stack([j.value for j in jets], axis=1),
            np.stack([j.gradient for j in jets], axis=1),
            np.stack([j.hessian for j in jets], axis=1),
        )

    def derived_jet(self, kind: DerivedFieldKind, points: np.ndarray, order: int = 2) -> FieldJet:
        return _derive(self.subject_jets(points, order), kind, self.var_floor)

    def field(self, kind: DerivedFieldKind) -> "DerivedField":
        return DerivedField(self, kind)

    def _at(self, kind: DerivedFieldKind, s: np.ndarray | float, order: int) -> FieldJet:
        return self.derived_jet(kind, as_points(s, self.dim), order).take(0)

    def mean_eval(self, s: np.ndarray | float) -> float:
        return float(self._at(DerivedFieldKind.MEAN, s, 0).value)

    def mean_grad(self, s: np.ndarray | float) -> np.ndarray:
        return self._at(DerivedFieldKind.MEAN, s, 2).gradient

    def mean_hessian(self, s: np.ndarray | float) -> np.ndarray:
        return self._at(DerivedFieldKind.MEAN, s, 2).hessian

    def var_eval(self, s: np.ndarray | float) -> float:
        return float(self._at(DerivedFieldKind.VARIANCE, s, 0).value)

    def var_grad(self, s: np.ndarray | float) -> np.ndarray:
        return self._at(DerivedFieldKind.VARIANCE, s, 2).gradient

    def var_hessian(self, s: np.ndarray | float) -> np.ndarray:
        return self._at(DerivedFieldKind.VARIANCE, s, 2).hessian

    def t_eval(self, s: np.ndarray | float) -> float:
        return float(self._at(DerivedFieldKind.TSTAT, s, 0).value)

    def t_grad(self, s: np.ndarray | float) -> np.ndarray:
        return self._at(DerivedFieldKind.TSTAT, s, 2).gradient

    def t_hessian(self, s: np.ndarray | float) -> np.ndarray:
        return self._at(DerivedFieldKind.TSTAT, s, 2).hessian

    def d_eval(self, s: np.ndarray | float) -> float:
        return float(self._at(DerivedFieldKind.COHENS_D, s, 0).value)

    def d_grad(self, s: np.ndarray | float) -> np.ndarray:
        return self._at(DerivedFieldKind.COHENS_D, s, 2).gradient

    def d_hessian(self, s: np.ndarray | float) -> np.ndarray:
        return self._at(DerivedFieldKind.COHENS_D, s, 2).hessian


def mean_of(subjects: FieldJet) -> FieldJet:
    if subjects.gradient is None:
        return FieldJet(subjects.value.mean(axis=1))
    return FieldJet(
        subjects.value.mean(axis=1), subjects.gradient.mean(axis=1), subjects.hessian.mean(axis=1)
    )


def variance_of(subjects: FieldJet) -> FieldJet:
    """Sample variance (N - 1 denominator) and its derivatives."""
    n = subjects.value.shape[1]
    mean = mean_of(subjects)
    r = subjects.value - mean.value[:, None]
    value = np.sum(r * r, axis=1) / (n - 1)
    if subjects.gradient is None:
        return FieldJet(value)
    rg = subjects.gradient - mean.gradient[:, None]
    rh = subjects.hessian - mean.hessian[:, None]
    gradient = 2.0 / (n - 1) * np.einsum("mn,mni->mi", r, rg)
    hessian = 2.0 / (n - 1) * (
        np.einsum("mni,mnj->mij", rg, rg) + np.einsum("mn,mnij->mij", r, rh)
    )
    return FieldJet(value, gradient, 0.5 * (hessian + np.swapaxes(hessian, -1, -2)))


def _derive(subjects: FieldJet, kind: DerivedFieldKind, var_floor: float) -> FieldJet:
    if kind == DerivedFieldKind.MEAN:
        return mean_of(subjects)
    variance = variance_of(subjects)
    if kind == DerivedFieldKind.VARIANCE:
        return variance

    low = variance.value <= var_floor
    if np.any(low):
        raise DegenerateVarianceError(
            f"sample variance at or below {var_floor:g} at {int(np.sum(low))} location(s)"
        )
    d = jet_quotient(mean_of(subjects), jet_sqrt(variance))
    if kind == DerivedFieldKind.COHENS_D:
        return d
    return jet_scale(d, np.sqrt(subjects.value.shape[1]))


@dataclass(frozen=True, eq=False)
class DerivedField(PointwiseMixin):
    """A derived cohort field, usable wherever a C^2 field is expected."""

    cohort: FieldCohort
    kind: DerivedFieldKind

    @property
    def domain(self) -> Box:
        return self.cohort.domain

    @property
    def dim(self) -> int:
        return self.cohort.dim

    @property
    def resolution(self) -> float:
        return self.cohort.resolution

    def jet(self, points: np.ndarray, order: int = 2) -> FieldJet:
        return self.cohort.derived_jet(self.kind, points, order)
