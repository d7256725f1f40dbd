"""Tests for replicated simulation experiments."""

import numpy as np
import pytest
from scipy import stats

from peakcr.config import (
    BoxSpec,
    ExperimentConfig,
    NoiseScale,
    NoiseSpec,
    QuadraticSignal,
    SignalSpec,
    SpectrumExperimentConfig,
)
from peakcr.exceptions import ConfigError
from peakcr.models import (
    CovarianceMode,
    CoverageReport,
    CoverageSummary,
    GradCov,
    RegionMethod,
    RegionTarget,
)
from peakcr.noisegen import (
    analytic_noise_grad_cov,
    domain_box,
    kernel_for,
    noise_lattice,
    preset_signal,
    signal_modes,
)
from peakcr.simharness import (
    binomial_band,
    check_chi2_gradient,
    check_ratio_dominance,
    check_t_gradient_clt,
    plot_series,
    run_coverage,
    run_identifiability,
    run_spectrum_coverage,
)


def sharp_quadratic(curvature: float = 0.5) -> SignalSpec:
    return SignalSpec(
        shape=QuadraticSignal(theta=[15.0], curvature=curvature),
        domain=BoxSpec(lower=[0.0], upper=[30.0]),
    )


def tiny_config(**overrides: object) -> ExperimentConfig:
    settings: dict = {
        "signal": sharp_quadratic(),
        "noise": NoiseSpec(fwhm=4.0, seed=5),
        "n_list": [8],
        "nsim": 4,
        "methods": [RegionMethod.ASYMPTOTIC],
        "failure_tolerance": 1.0,
        "track_identifiability": False,
    }
    settings.update(overrides)
    return ExperimentConfig(**settings)


def unit_grad_cov(lambda_: list[list[float]], gamma: list[float], sigma2: float) -> GradCov:
    return GradCov(
        lambda_=np.array(lambda_),
        gamma=np.array(gamma),
        sigma2=sigma2,
        mode=CovarianceMode.POINTWISE,
    )


class TestBinomialBand:
    """Tests for the binomial band."""

    def test_nominal_band(self) -> None:
        assert binomial_band(0.95, 1000) == pytest.approx(0.013508, abs=1e-6)

    def test_degenerate_rates(self) -> None:
        assert binomial_band(1.0, 50) == 0.0
        assert binomial_band(0.0, 50) == 0.0

    def test_no_trials(self) -> None:
        assert binomial_band(0.5, 0) == 0.0


class TestRunCoverage:
    """Tests for coverage experiments."""

    def test_report_layout(self) -> None:
        report = run_coverage(tiny_config())
        assert report.nsim == 4
        assert report.target == RegionTarget.MEAN
        assert len(report.rows) == 1
        summary = report.summary(8, RegionMethod.ASYMPTOTIC)
        assert summary.trials + summary.failures == 4
        assert summary.identifiability_rate is None

    def test_infinite_threshold_covers(self) -> None:
        report = run_coverage(tiny_config(threshold_override=1e12))
        summary = report.summary(8, RegionMethod.ASYMPTOTIC)
        assert summary.trials > 0
        assert summary.average_empirical_coverage == 1.0
        assert summary.empirical_joint_coverage == 1.0

    def test_zero_threshold_never_covers(self) -> None:
        report = run_coverage(tiny_config(threshold_override=0.0))
        summary = report.summary(8, RegionMethod.ASYMPTOTIC)
        assert summary.average_empirical_coverage == 0.0
        assert summary.joint_hits == 0

    def test_independent_of_thread_count(self) -> None:
        methods = [RegionMethod.ASYMPTOTIC, RegionMethod.MONTE_CARLO]
        single = run_coverage(tiny_config(methods=methods, threads=1))
        pooled = run_coverage(tiny_config(methods=methods, threads=3))
        assert single.model_dump() == pooled.model_dump()

    def test_identifiability_tracked(self) -> None:
        report = run_coverage(tiny_config(track_identifiability=True))
        rate = report.summary(8, RegionMethod.ASYMPTOTIC).identifiability_rate
        assert rate is not None
        assert 0.0 <= rate <= 1.0

    def test_ball_must_hold_true_peak(self) -> None:
        config = tiny_config(search={"balls": [{"center": [5.0], "radius": 2.0}]})
        with pytest.raises(ConfigError):
            run_coverage(config)

    def test_ball_count_must_match(self) -> None:
        balls = [{"center": [15.0], "radius": 2.0}, {"center": [25.0], "radius": 2.0}]
        with pytest.raises(ConfigError):
            run_coverage(tiny_config(search={"balls": balls}))


class TestRunIdentifiability:
    """Tests for identifiability experiments."""

    def test_noiseless_quadratic_is_identified(self) -> None:
        noise = NoiseSpec(fwhm=4.0, scale=NoiseScale(level=0.0))
        report = run_identifiability(tiny_config(noise=noise, n_list=[3, 6], nsim=2))
        assert [row.rate for row in report.rows] == [1.0, 1.0]
        assert [row.outside_rate for row in report.rows] == [0.0, 0.0]
        assert not report.assumption_violated
        assert report.min_outside_gradient > 0.0

    def test_flat_signal_is_flagged(self) -> None:
        config = tiny_config(signal=sharp_quadratic(curvature=0.0), nsim=2)
        report = run_identifiability(config)
        assert report.flat_fraction == 1.0
        assert report.assumption_violated


class TestChi2Gradient:
    """Tests for the gradient of a sum of squared Gaussian fields."""

    def test_uncorrelated_unit_case(self) -> None:
        report = check_chi2_gradient(unit_grad_cov([[1.0]], [0.0], 1.0), reps=40_000)
        assert report.expected[0, 0] == 1.0
        assert report.max_relative_deviation < 0.05
        assert report.extras["max_abs_mean"] < 0.03
        assert report.extras["ks_statistic"] < 0.02

    def test_correlated_components(self) -> None:
        params = unit_grad_cov([[2.0, 0.3], [0.3, 1.0]], [0.5, 0.2], 1.0)
        report = check_chi2_gradient(params, reps=40_000, components=3, seed=4)
        np.testing.assert_allclose(report.expected, [[1.75, 0.2], [0.2, 0.96]], rtol=1e-12)
        assert report.max_relative_deviation < 0.05
        assert report.extras["max_abs_corr_with_u"] < 0.03
        assert "ks_statistic" not in report.extras

    def test_zero_variance_rejected(self) -> None:
        with pytest.raises(ConfigError):
            check_chi2_gradient(unit_grad_cov([[1.0]], [0.0], 0.0), reps=10)


class TestRatioDominance:
    """Tests for tail dominance of A / B over A / E[B]."""

    def test_constant_denominator_is_equality(self) -> None:
        report = check_ratio_dominance(stats.norm(), 2.0, [0.5, 1.0], reps=20_000)
        assert report.holds
        for row in report.rows:
            assert row.p_mean_ratio == row.p_ratio
            assert row.exact_ratio == pytest.approx(row.exact_mean_ratio)

    def test_half_at_zero(self) -> None:
        report = check_ratio_dominance(stats.norm(), stats.chi2(5), [0.0], reps=50_000)
        row = report.rows[0]
        assert row.p_mean_ratio == pytest.approx(0.5, abs=0.01)
        assert row.p_ratio == pytest.approx(0.5, abs=0.01)
        assert row.exact_ratio == pytest.approx(0.5, abs=1e-6)

    def test_uniform_denominator_fattens_tail(self) -> None:
        report = check_ratio_dominance(
            stats.norm(), stats.uniform(0.5, 1.0), [1.0, 2.0, 3.0], reps=200_000, seed=3
        )
        assert report.holds
        row = report.rows[1]
        assert row.exact_mean_ratio == pytest.approx(stats.norm.sf(2.0))
        assert row.exact_ratio > row.exact_mean_ratio
        assert row.p_ratio > row.p_mean_ratio

    def test_non_positive_denominator_rejected(self) -> None:
        with pytest.raises(ConfigError):
            check_ratio_dominance(stats.norm(), stats.norm(1.0, 0.1), [1.0], reps=10)
        with pytest.raises(ConfigError):
            check_ratio_dominance(stats.norm(), -1.0, [1.0], reps=10)


class TestGradientClt:
    """Tests for the Cohen's d gradient covariance check."""

    def test_zero_signal(self) -> None:
        noise = NoiseSpec(fwhm=4.0, seed=8)
        report = check_t_gradient_clt(noise, n_large=40, reps=400, threads=2)
        signal = SignalSpec(
            shape=QuadraticSignal(theta=[20.0], curvature=0.0),
            domain=BoxSpec(lower=[0.0], upper=[40.0]),
        )
        kernel = kernel_for(noise)
        center = domain_box(signal).center
        expected = analytic_noise_grad_cov(noise_lattice(signal, kernel), kernel, center)
        assert report.extras["d"] == 0.0
        np.testing.assert_allclose(report.expected, expected, rtol=1e-12)
        assert report.max_relative_deviation < 0.3


class TestSpectrumCoverage:
    """Tests for spectrum coverage experiments."""

    def test_report_layout(self) -> None:
        config = SpectrumExperimentConfig(
            n_subjects=6, nsim=3, duration=60.0, failure_tolerance=1.0
        )
        report = run_spectrum_coverage(config)
        assert len(report.rows) == 2
        assert [row.peak for row in report.rows] == [0, 1]
        assert len(report.summaries) == 1
        assert report.summaries[0].n == 6


class TestPlotSeries:
    """Tests for plot-ready coverage curves."""

    def test_series(self) -> None:
        summaries = [
            CoverageSummary(
                n=n,
                method=RegionMethod.ASYMPTOTIC,
                trials=100,
                failures=0,
                average_empirical_coverage=rate,
                joint_hits=int(rate * 100),
                empirical_joint_coverage=rate,
                joint_band=0.02,
            )
            for n, rate in [(100, 0.94), (20, 0.91)]
        ]
        report = CoverageReport(
            target=RegionTarget.MEAN, alpha=0.05, nsim=100, master_seed=0, summaries=summaries
        )
        series = plot_series(report)
        assert series["nominal"] == pytest.approx(0.95)
        assert series["band_upper"] - series["nominal"] == pytest.approx(binomial_band(0.95, 100))
        assert series["series"][0]["n"] == [20, 100]
        assert series["series"][0]["average_coverage"] == [0.91, 0.94]


@pytest.mark.slow
class TestAcceptance:
    """Long coverage reproductions."""

    def test_mean_coverage_by_method(self) -> None:
        config = ExperimentConfig(
            signal=preset_signal("narrow", 1),
            n_list=[100],
            nsim=1000,
            methods=[RegionMethod.ASYMPTOTIC, RegionMethod.MONTE_CARLO],
            threads=4,
        )
        report = run_coverage(config)
        asym = report.summary(100, RegionMethod.ASYMPTOTIC).average_empirical_coverage
        mc = report.summary(100, RegionMethod.MONTE_CARLO).average_empirical_coverage
        assert 0.90 <= asym <= 0.97
        assert 0.93 <= mc <= 0.97
        # Same cohorts for both methods; the finite-N threshold is the larger one.
        assert mc >= asym

    def test_cohens_d_coverage(self) -> None:
        config = ExperimentConfig(
            signal=preset_signal("narrow", 1, amplitude=1.0),
            n_list=[200],
            nsim=1000,
            methods=[RegionMethod.ASYMPTOTIC],
            target=RegionTarget.COHENS_D,
            threads=4,
        )
        summary = run_coverage(config).summary(200, RegionMethod.ASYMPTOTIC)
        assert summary.average_empirical_coverage >= 0.90

    def test_narrow_peaks_are_identified(self) -> None:
        config = ExperimentConfig(
            signal=preset_signal("narrow", 1), n_list=[200], nsim=500, threads=4
        )
        report = run_identifiability(config)
        assert report.rows[0].rate >= 0.99
        assert not report.assumption_violated

    def test_spectrum_coverage(self) -> None:
        report = run_spectrum_coverage(SpectrumExperimentConfig(nsim=200, threads=4))
        summary = report.summaries[0]
        assert summary.average_empirical_coverage >= 0.90
        assert summary.empirical_joint_coverage >= 0.90

    def test_t_gradient_clt_unit_d(self) -> None:
        signal = preset_signal("narrow", 1, amplitude=1.0)
        report = check_t_gradient_clt(
            NoiseSpec(fwhm=4.0),
            n_large=200,
            reps=5000,
            signal=signal,
            point=signal_modes(signal)[0],
            threads=4,
        )
        assert report.extras["d"] == pytest.approx(1.0)
        assert report.max_relative_deviation < 0.07

    def test_t_gradient_clt_varying_scale(self) -> None:
        noise = NoiseSpec(fwhm=4.0, scale=NoiseScale(level=1.0, slope=[0.01]))
        report = check_t_gradient_clt(noise, n_large=200, reps=5000, threads=4)
        assert report.extras["d"] == 0.0
        assert report.max_relative_deviation < 0.07
