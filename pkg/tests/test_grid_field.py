"""Tests for lattices, kernels and smooth convolution fields."""

import numpy as np
import pytest

from peakcr.exceptions import ConfigError, DataError, DomainError
from peakcr.grid_field import (
    Box,
    FieldJet,
    GaussianKernel,
    Lattice,
    LatticeSample,
    SmoothField,
    average_samples,
    convolution_jet,
    jet_product,
    jet_quotient,
    jet_sqrt,
)

STEP = 1e-5


def finite_gradient(field: SmoothField, points: np.ndarray) -> np.ndarray:
    """Central differences of the field value along every axis."""
    columns = []
    for axis in range(points.shape[1]):
        shift = np.zeros(points.shape[1])
        shift[axis] = STEP
        up = field.jet(points + shift, order=0).value
        down = field.jet(points - shift, order=0).value
        columns.append((up - down) / (2 * STEP))
    return np.stack(columns, axis=-1)


def finite_hessian(field: SmoothField, points: np.ndarray) -> np.ndarray:
    """Central differences of the analytic gradient."""
    columns = []
    for axis in range(points.shape[1]):
        shift = np.zeros(points.shape[1])
        shift[axis] = STEP
        up = field.jet(points + shift).gradient
        down = field.jet(points - shift).gradient
        columns.append((up - down) / (2 * STEP))
    return np.stack(columns, axis=-1)


class TestBox:
    """Tests for axis-aligned boxes."""

    def test_contains_with_tolerance(self) -> None:
        box = Box((0.0, 0.0), (1.0, 2.0))
        points = np.array([[0.5, 1.0], [1.0 + 1e-12, 2.0], [1.1, 1.0]])
        assert box.contains(points).tolist() == [True, True, False]

    def test_inset(self) -> None:
        box = Box((0.0,), (10.0,)).inset(2.0)
        assert box.lower == (2.0,)
        assert box.upper == (8.0,)

    def test_inset_too_large(self) -> None:
        with pytest.raises(DataError):
            Box((0.0,), (4.0,)).inset(2.0)

    def test_empty_box_rejected(self) -> None:
        with pytest.raises(DataError):
            Box((1.0,), (0.0,))

    def test_distance_to_boundary(self) -> None:
        box = Box((0.0, 0.0), (10.0, 4.0))
        assert box.distance_to_boundary(np.array([3.0, 1.5])) == pytest.approx(1.5)


class TestLattice:
    """Tests for regular lattices."""

    def test_points_row_major(self) -> None:
        lattice = Lattice((2, 3))
        assert lattice.size == 6
        assert lattice.points[1].tolist() == [0.0, 1.0]
        assert lattice.points[3].tolist() == [1.0, 0.0]

    def test_spacing_and_origin(self) -> None:
        lattice = Lattice((3,), (0.5,), (-1.0,))
        assert lattice.points[:, 0].tolist() == [-1.0, -0.5, 0.0]
        assert lattice.hull == Box((-1.0,), (0.0,))

    def test_covering(self) -> None:
        lattice = Lattice.covering(Box((0.0,), (10.0,)), 2.5)
        assert lattice.shape == (17,)
        assert lattice.origin == (-3.0,)

    def test_three_dimensions_rejected(self) -> None:
        with pytest.raises(DataError):
            Lattice((2, 2, 2))

    def test_non_positive_spacing_rejected(self) -> None:
        with pytest.raises(DataError):
            Lattice((4,), (0.0,))


class TestLatticeSample:
    """Tests for lattice observations."""

    def test_values_reshaped_and_frozen(self) -> None:
        sample = LatticeSample(Lattice((2, 3)), np.arange(6.0))
        assert sample.values.shape == (2, 3)
        with pytest.raises(ValueError):
            sample.values[0, 0] = 1.0

    def test_wrong_size_rejected(self) -> None:
        with pytest.raises(DataError):
            LatticeSample(Lattice((4,)), np.zeros(5))

    def test_non_finite_rejected(self) -> None:
        with pytest.raises(DataError):
            LatticeSample(Lattice((3,)), np.array([0.0, np.nan, 1.0]))

    def test_average_samples(self) -> None:
        lattice = Lattice((3,))
        mean = average_samples(
            [LatticeSample(lattice, np.zeros(3)), LatticeSample(lattice, np.full(3, 2.0))]
        )
        assert mean.flat.tolist() == [1.0, 1.0, 1.0]

    def test_average_samples_needs_one_lattice(self) -> None:
        with pytest.raises(DataError):
            average_samples(
                [
                    LatticeSample(Lattice((3,)), np.zeros(3)),
                    LatticeSample(Lattice((4,)), np.zeros(4)),
                ]
            )


class TestGaussianKernel:
    """Tests for the Gaussian kernel."""

    def test_sigma_from_fwhm(self) -> None:
        assert GaussianKernel(6.0).sigma == pytest.approx(6.0 / 2.354820045, rel=1e-9)

    def test_peak_and_half_maximum(self) -> None:
        kernel = GaussianKernel(6.0)
        assert kernel.value(np.array([0.0])) == 1.0
        assert kernel.value(np.array([3.0])) == pytest.approx(0.5)

    def test_symmetric(self) -> None:
        kernel = GaussianKernel(3.0)
        offsets = np.array([[1.2, -0.4], [-1.2, 0.4]])
        values = kernel.value(offsets)
        assert values[0] == values[1]

    def test_default_radius(self) -> None:
        kernel = GaussianKernel(4.0)
        assert kernel.radius == pytest.approx(4.0 * kernel.sigma)

    def test_invalid_fwhm(self) -> None:
        with pytest.raises(ConfigError):
            GaussianKernel(0.0)

    def test_derivatives_match_closed_form(self) -> None:
        kernel = GaussianKernel(2.0)
        x = np.array([[0.7]])
        k, dk, d2k = kernel.evaluate(x)
        s2 = kernel.sigma**2
        assert dk[0, 0] == pytest.approx(-0.7 / s2 * k[0])
        assert d2k[0, 0, 0] == pytest.approx((0.49 / s2**2 - 1.0 / s2) * k[0])


class TestJetAlgebra:
    """Tests for the product, quotient and square-root rules."""

    @staticmethod
    def _square_and_identity(x: np.ndarray) -> tuple[FieldJet, FieldJet]:
        m = len(x)
        square = FieldJet(x**2, 2 * x[:, None], np.full((m, 1, 1), 2.0))
        identity = FieldJet(x, np.ones((m, 1)), np.zeros((m, 1, 1)))
        return square, identity

    def test_quotient(self) -> None:
        x = np.array([1.0, 2.5])
        square, identity = self._square_and_identity(x)
        result = jet_quotient(square, identity)
        np.testing.assert_allclose(result.value, x)
        np.testing.assert_allclose(result.gradient[:, 0], 1.0)
        np.testing.assert_allclose(result.hessian[:, 0, 0], 0.0, atol=1e-12)

    def test_sqrt(self) -> None:
        x = np.array([1.0, 2.5])
        square, _ = self._square_and_identity(x)
        result = jet_sqrt(square)
        np.testing.assert_allclose(result.value, x)
        np.testing.assert_allclose(result.gradient[:, 0], 1.0)
        np.testing.assert_allclose(result.hessian[:, 0, 0], 0.0, atol=1e-12)

    def test_product(self) -> None:
        x = np.array([1.0, 2.5])
        square, identity = self._square_and_identity(x)
        result = jet_product(identity, identity)
        np.testing.assert_allclose(result.value, square.value)
        np.testing.assert_allclose(result.gradient, square.gradient)
        np.testing.assert_allclose(result.hessian, square.hessian)

    def test_product_broadcasts_over_subjects(self) -> None:
        x = np.array([1.0, 2.5])
        _, identity = self._square_and_identity(x)
        stacked = FieldJet(
            np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 2, 1)), np.zeros((2, 2, 1, 1))
        )
        result = jet_product(stacked, identity)
        np.testing.assert_allclose(result.value, [[1.0, 2.0], [7.5, 10.0]])
        np.testing.assert_allclose(result.gradient[..., 0], [[2.0, 3.0], [5.5, 6.5]])


class TestSmoothField:
    """Tests for convolution fields and their derivatives."""

    def test_single_point_gives_kernel(self) -> None:
        values = np.zeros(21)
        values[10] = 1.0
        kernel = GaussianKernel(2.0)
        field = SmoothField(LatticeSample(Lattice((21,)), values), kernel)
        assert field.eval(11.3) == pytest.approx(float(kernel.value(np.array([1.3]))), rel=1e-12)
        assert field.eval(14.0) == 0.0

    def test_matches_direct_sum(self, field_1d: SmoothField) -> None:
        s = 30.37
        offsets = s - field_1d.lattice.points
        weights = field_1d.kernel.value(offsets)
        weights[np.abs(offsets[:, 0]) > field_1d.kernel.radius] = 0.0
        expected = weights @ field_1d.sample.flat
        assert field_1d.eval(s) == pytest.approx(expected, rel=1e-12)

    def test_standardized_divides_by_weight_norm(self, field_2d: SmoothField) -> None:
        s = np.array([19.2, 20.7])
        offsets = s - field_2d.lattice.points
        weights = field_2d.kernel.value(offsets)
        weights[np.linalg.norm(offsets, axis=1) > field_2d.kernel.radius] = 0.0
        expected = weights @ field_2d.sample.flat / np.sqrt(np.sum(weights**2))
        assert field_2d.eval(s) == pytest.approx(expected, rel=1e-10)

    def test_default_domain_is_inset_hull(self, field_1d: SmoothField) -> None:
        radius = field_1d.kernel.radius
        assert field_1d.domain.lower[0] == pytest.approx(radius)
        assert field_1d.domain.upper[0] == pytest.approx(59.0 - radius)

    def test_outside_domain(self, field_1d: SmoothField) -> None:
        with pytest.raises(DomainError):
            field_1d.eval(2.0)

    def test_domain_too_close_to_hull(self, wide_kernel: GaussianKernel) -> None:
        sample = LatticeSample(Lattice((60,)), np.zeros(60))
        with pytest.raises(DomainError):
            SmoothField(sample, wide_kernel, domain=Box((5.0,), (40.0,)))

    def test_gradient_and_hessian_1d(self, field_1d: SmoothField) -> None:
        points = np.random.default_rng(0).uniform(16.0, 43.0, size=(25, 1))
        jet = field_1d.jet(points)
        scale = np.max(np.abs(jet.gradient))
        np.testing.assert_allclose(
            jet.gradient, finite_gradient(field_1d, points), atol=1e-6 * scale
        )
        np.testing.assert_allclose(
            jet.hessian[..., 0], finite_hessian(field_1d, points)[..., 0], atol=1e-5 * scale
        )

    def test_gradient_and_hessian_2d_standardized(self, field_2d: SmoothField) -> None:
        points = np.random.default_rng(1).uniform(15.0, 24.0, size=(20, 2))
        jet = field_2d.jet(points)
        scale = np.max(np.abs(jet.gradient))
        np.testing.assert_allclose(
            jet.gradient, finite_gradient(field_2d, points), atol=1e-6 * scale
        )
        np.testing.assert_allclose(jet.hessian, finite_hessian(field_2d, points), atol=1e-5 * scale)

    def test_hessian_symmetric(self, field_2d: SmoothField) -> None:
        hessian = field_2d.hessian(np.array([18.0, 21.5]))
        assert hessian[0, 1] == hessian[1, 0]

    def test_translation_equivariance(self, field_1d: SmoothField) -> None:
        shifted = SmoothField(field_1d.sample.translated(np.array([3.0])), field_1d.kernel)
        points = np.array([[20.1], [33.3]])
        np.testing.assert_allclose(
            shifted.jet(points + 3.0).value, field_1d.jet(points).value, rtol=1e-12
        )

    def test_linear_in_values(self, field_1d: SmoothField) -> None:
        other = np.random.default_rng(5).standard_normal(60)
        lattice = field_1d.lattice
        combined = SmoothField(
            LatticeSample(lattice, 2.0 * field_1d.sample.flat - other), field_1d.kernel
        )
        second = SmoothField(LatticeSample(lattice, other), field_1d.kernel)
        points = np.array([[18.0], [27.5], [40.0]])
        np.testing.assert_allclose(
            combined.jet(points).gradient,
            2.0 * field_1d.jet(points).gradient - second.jet(points).gradient,
            atol=1e-12,
        )

    def test_order_zero_has_values_only(self, field_1d: SmoothField) -> None:
        jet = field_1d.jet(np.array([[20.0]]), order=0)
        assert jet.order == 0
        assert jet.gradient is None

    def test_blocks_agree_with_pieces(self, field_2d: SmoothField) -> None:
        points = np.random.default_rng(2).uniform(15.0, 24.0, size=(1500, 2))
        whole = field_2d.jet(points)
        first = field_2d.jet(points[:700])
        np.testing.assert_allclose(whole.value[:700], first.value, rtol=1e-12)
        np.testing.assert_allclose(whole.hessian[:700], first.hessian, rtol=1e-10, atol=1e-14)

    def test_columns_match_separate_fields(self, field_1d: SmoothField) -> None:
        other = np.random.default_rng(6).standard_normal(60)
        points = np.array([[19.0], [36.0]])
        stacked = convolution_jet(
            field_1d.lattice,
            field_1d.kernel,
            np.stack([field_1d.sample.flat, other], axis=1),
            points,
        )
        second = SmoothField(LatticeSample(field_1d.lattice, other), field_1d.kernel)
        np.testing.assert_allclose(stacked.column(0).gradient, field_1d.jet(points).gradient)
        np.testing.assert_allclose(stacked.column(1).hessian, second.jet(points).hessian)

    def test_shares_operators_with(self, field_1d: SmoothField) -> None:
        same = SmoothField(LatticeSample(field_1d.lattice, np.zeros(60)), field_1d.kernel)
        different = SmoothField(
            LatticeSample(field_1d.lattice, np.zeros(60)), GaussianKernel(4.0, truncation=7.0)
        )
        assert field_1d.shares_operators_with(same)
        assert not field_1d.shares_operators_with(different)
