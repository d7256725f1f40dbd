"""Tests for gradient and Hessian covariance estimation."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from peakcr.config import NoiseSpec, SignalSpec
from peakcr.covariance import (
    estimate_grad_cov,
    estimate_hess_cov,
    lambda_prime,
    pooling_points,
    repair_psd,
    vech,
    vech_dim,
    vech_inv,
)
from peakcr.exceptions import DataError, DegenerateVarianceError, SingularCovarianceError
from peakcr.grid_field import LatticeSample, SmoothField
from peakcr.models import CovarianceMode, GradCov
from peakcr.noisegen import analytic_noise_grad_cov, generate_cohort, kernel_for, noise_lattice
from peakcr.sample_fields import FieldCohort

square_matrices = st.integers(min_value=1, max_value=3).flatmap(
    lambda d: arrays(np.float64, (d, d), elements=st.floats(-1e3, 1e3))
)


def signed_cohort(field: SmoothField, signs: list[float]) -> FieldCohort:
    """Copies of one field multiplied by +1 or -1."""
    return FieldCohort(
        tuple(
            SmoothField(LatticeSample(field.lattice, sign * field.sample.flat), field.kernel)
            for sign in signs
        )
    )


class TestVech:
    """Tests for half-vectorization."""

    def test_two_by_two(self) -> None:
        assert vech(np.array([[1.0, 2.0], [2.0, 3.0]])).tolist() == [1.0, 2.0, 3.0]

    def test_three_by_three_order(self) -> None:
        a = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 5.0], [3.0, 5.0, 6.0]])
        assert vech(a).tolist() == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]

    def test_one_dimension_is_identity(self) -> None:
        assert vech(np.array([[-2.5]])).tolist() == [-2.5]

    def test_asymmetric_rejected(self) -> None:
        with pytest.raises(DataError):
            vech(np.array([[1.0, 2.0], [2.1, 3.0]]))

    def test_invalid_length(self) -> None:
        with pytest.raises(DataError):
            vech_dim(4)

    def test_inverse_keeps_leading_axes(self) -> None:
        out = vech_inv(np.arange(15.0).reshape(5, 3))
        assert out.shape == (5, 2, 2)
        assert out[1].tolist() == [[3.0, 4.0], [4.0, 5.0]]

    @given(square_matrices)
    def test_round_trip(self, matrix: np.ndarray) -> None:
        symmetric = (matrix + matrix.T) / 2
        np.testing.assert_array_equal(vech_inv(vech(symmetric)), symmetric)


class TestRepairPsd:
    """Tests for PSD repair."""

    def test_small_negative_clipped(self) -> None:
        repaired = repair_psd(np.diag([1.0, -1e-12]), "test")
        assert np.linalg.eigvalsh(repaired)[0] >= 0.0
        assert repaired[0, 0] == pytest.approx(1.0)

    def test_large_negative_rejected(self) -> None:
        with pytest.raises(SingularCovarianceError):
            repair_psd(np.diag([1.0, -0.1]), "test")

    def test_symmetrizes(self) -> None:
        repaired = repair_psd(np.array([[2.0, 1.0], [0.0, 2.0]]), "test")
        assert repaired[0, 1] == repaired[1, 0] == 0.5


class TestEstimateGradCov:
    """Tests for gradient covariance estimates."""

    def test_identical_subjects(self, field_1d: SmoothField) -> None:
        cohort = FieldCohort((field_1d, field_1d, field_1d))
        gc = estimate_grad_cov(cohort, 25.0, CovarianceMode.POINTWISE, check_singular=False)
        assert gc.lambda_[0, 0] == pytest.approx(0.0, abs=1e-20)
        assert gc.gamma[0] == pytest.approx(0.0, abs=1e-20)

    def test_identical_subjects_are_singular(self, field_1d: SmoothField) -> None:
        cohort = FieldCohort((field_1d, field_1d, field_1d))
        with pytest.raises(SingularCovarianceError):
            estimate_grad_cov(cohort, 25.0, CovarianceMode.POINTWISE)

    def test_sign_flipped_copies(self, field_2d: SmoothField) -> None:
        field = SmoothField(field_2d.sample, field_2d.kernel)
        cohort = signed_cohort(field, [1.0, -1.0, 1.0, -1.0])
        s = np.array([19.0, 20.0])
        g = field.grad(s)
        v = field.eval(s)
        gc = estimate_grad_cov(cohort, s, CovarianceMode.POINTWISE, check_singular=False)
        np.testing.assert_allclose(gc.lambda_, 4.0 / 3.0 * np.outer(g, g), rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(gc.gamma, 4.0 / 3.0 * v * g, rtol=1e-10)
        assert gc.sigma2 == pytest.approx(4.0 / 3.0 * v * v, rel=1e-10)

    def test_pointwise_needs_location(self, field_1d: SmoothField) -> None:
        cohort = signed_cohort(field_1d, [1.0, -1.0])
        with pytest.raises(DataError):
            estimate_grad_cov(cohort, None, CovarianceMode.POINTWISE)

    def test_pooled_matches_analytic(self, quadratic_signal: SignalSpec) -> None:
        noise = NoiseSpec(fwhm=4.0, seed=21)
        cohort = generate_cohort(quadratic_signal, noise, 200)
        gc = estimate_grad_cov(cohort, refinement=2)
        kernel = kernel_for(noise)
        expected = analytic_noise_grad_cov(noise_lattice(quadratic_signal, kernel), kernel, 15.0)
        assert gc.mode == CovarianceMode.STATIONARY_POOLED
        assert gc.lambda_[0, 0] == pytest.approx(expected[0, 0], rel=0.1)
        assert expected[0, 0] == pytest.approx(1.0 / (2.0 * kernel.sigma**2), rel=0.02)
        assert gc.sigma2 == pytest.approx(1.0, rel=0.1)


class TestEstimateHessCov:
    """Tests for Hessian covariance estimates."""

    def test_one_dimension_is_second_derivative_variance(
        self, quadratic_signal: SignalSpec, noise: NoiseSpec
    ) -> None:
        cohort = generate_cohort(quadratic_signal, noise, 15)
        hessians = np.array([subject.hessian(12.0)[0, 0] for subject in cohort.subjects])
        hc = estimate_hess_cov(cohort, CovarianceMode.POINTWISE, 12.0)
        assert hc.omega.shape == (1, 1)
        assert hc.omega[0, 0] == pytest.approx(np.var(hessians, ddof=1), rel=1e-10)

    def test_pooled_is_average_of_pointwise(
        self, quadratic_signal: SignalSpec, noise: NoiseSpec
    ) -> None:
        cohort = generate_cohort(quadratic_signal, noise, 8)
        pooled = estimate_hess_cov(cohort, refinement=1)
        pointwise = [
            estimate_hess_cov(cohort, CovarianceMode.POINTWISE, s).omega
            for s in pooling_points(cohort, 1)
        ]
        np.testing.assert_allclose(pooled.omega, np.mean(pointwise, axis=0), rtol=1e-10)

    def test_two_dimensional_shape(self, field_2d: SmoothField) -> None:
        rng = np.random.default_rng(4)
        subjects = tuple(
            SmoothField(
                LatticeSample(field_2d.lattice, rng.standard_normal(1600)),
                field_2d.kernel,
                standardize=True,
            )
            for _ in range(6)
        )
        hc = estimate_hess_cov(FieldCohort(subjects), CovarianceMode.POINTWISE, [20.0, 20.0])
        assert hc.omega.shape == (3, 3)
        np.testing.assert_array_equal(hc.omega, hc.omega.T)


class TestLambdaPrime:
    """Tests for the gradient covariance of Y / sigma."""

    @staticmethod
    def _grad_cov(sigma2: float) -> GradCov:
        return GradCov(
            lambda_=np.array([[2.0, 0.0], [0.0, 1.0]]),
            gamma=np.array([1.0, 0.0]),
            sigma2=sigma2,
            mode=CovarianceMode.POINTWISE,
        )

    def test_constant_variance(self) -> None:
        result = lambda_prime(self._grad_cov(2.0), np.zeros(2))
        np.testing.assert_allclose(result, [[1.0, 0.0], [0.0, 0.5]])

    def test_unit_variance(self) -> None:
        result = lambda_prime(self._grad_cov(1.0), np.zeros(2))
        np.testing.assert_allclose(result, [[2.0, 0.0], [0.0, 1.0]])

    def test_cross_terms(self) -> None:
        result = lambda_prime(self._grad_cov(2.0), np.array([0.5, 1.0]))
        np.testing.assert_allclose(result, [[0.890625, -0.09375], [-0.09375, 0.5625]])

    def test_zero_variance(self) -> None:
        with pytest.raises(DegenerateVarianceError):
            lambda_prime(self._grad_cov(0.0), np.zeros(2))
