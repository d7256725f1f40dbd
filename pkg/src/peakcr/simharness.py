"""Replicated simulation experiments.

Coverage experiments draw synthetic cohorts, locate the peak in every search
ball, build confidence regions and tally how often they contain the true peak
location. Replicates run in a joblib thread pool; each replicate owns its random
substreams, and the results are folded in replicate order, so the report does not
depend on the number of threads.

The remaining checks compare simulated moments against the distributional
results the regions rest on: the limiting covariance of the Cohen's d gradient,
the conditional law of the gradient of a sum of squared Gaussian fields, and
tail dominance of A / B over A / E[B].
"""

import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from joblib import Parallel, delayed
from scipy import integrate, stats

from peakcr import streams
from peakcr.config import (
    Ball,
    ExperimentConfig,
    NoiseSpec,
    QuadraticSignal,
    SearchSpec,
    SignalSpec,
    SpectrumExperimentConfig,
)
from peakcr.covariance import estimate_grad_cov, estimate_hess_cov, lambda_prime
from peakcr.exceptions import ConfigError, ExperimentError, NumericError
from peakcr.logging_config import get_logger
from peakcr.models import (
    CovarianceMode,
    CoverageReport,
    CoverageRow,
    CoverageSummary,
    DerivedFieldKind,
    DominanceReport,
    DominanceRow,
    GradCov,
    IdentifiabilityReport,
    IdentifiabilityRow,
    MomentReport,
    RegionMethod,
    RegionTarget,
)
from peakcr.noisegen import (
    TruthField,
    analytic_noise_grad_cov,
    domain_box,
    generate_cohort,
    generate_series,
    kernel_for,
    noise_lattice,
    scale_term,
    true_peaks,
)
from peakcr.peaks import argmax_in_ball, ball_census, default_balls, grid_points, seeding_grid
from peakcr.regions import bonferroni_joint, contains, region_for_peak
from peakcr.welch import spectrum_cohort, spectrum_peak_regions

logger = get_logger("simharness")

Z_95 = 1.96
FLAT_GRADIENT = 1e-8
FLAT_FRACTION_LIMIT = 0.1


def binomial_band(rate: float, trials: int) -> float:
    """Half-width of the normal-approximation 95% band of a binomial proportion."""
    if trials <= 0:
        return 0.0
    return Z_95 * math.sqrt(rate * (1.0 - rate) / trials)


def _parallel(threads: int, task: Callable[..., Any], items: Iterable[tuple]) -> list[Any]:
    """Run task(*item) for every item; results come back in item order."""
    return Parallel(n_jobs=threads, prefer="threads")(delayed(task)(*item) for item in items)


def _check_failures(failures: int, replicates: int, tolerance: float, label: str) -> None:
    if failures > tolerance * replicates:
        raise ExperimentError(
            f"{failures} of {replicates} replicates failed at {label} "
            f"(tolerance {tolerance:.0%})"
        )
    if failures:
        logger.warning(f"{failures} of {replicates} replicates failed at {label}")


def _field_kind(target: RegionTarget) -> DerivedFieldKind:
    return DerivedFieldKind.MEAN if target == RegionTarget.MEAN else DerivedFieldKind.COHENS_D


def _search_balls(config: ExperimentConfig, truths: np.ndarray) -> list[Ball]:
    """Configured balls, or the default heuristic balls around the true peaks."""
    balls = config.search.balls or default_balls(truths, domain_box(config.signal))
    if len(balls) != len(truths):
        raise ConfigError(f"{len(balls)} search balls for {len(truths)} true peaks")
    for j, (ball, truth) in enumerate(zip(balls, truths, strict=True)):
        if np.linalg.norm(truth - np.asarray(ball.center)) > ball.radius:
            raise ConfigError(f"true peak {j} at {truth.tolist()} lies outside its search ball")
    return balls


@dataclass
class _Outcome:
    """One coverage replicate: per-method marginal hits, joint hit and identification."""

    hits: dict[RegionMethod, list[bool]] = field(default_factory=dict)
    joint: dict[RegionMethod, bool] = field(default_factory=dict)
    identified: bool | None = None
    failure: str | None = None


def _coverage_replicate(
    config: ExperimentConfig, search: SearchSpec, n: int, replicate: int, truths: np.ndarray
) -> _Outcome:
    cohort = generate_cohort(
        config.signal, config.noise, n, replicate=replicate, seed=config.master_seed
    )
    field_ = cohort.field(_field_kind(config.target))
    outcome = _Outcome()

    if config.track_identifiability:
        try:
            outcome.identified = ball_census(field_, search.balls, search).identified
        except NumericError:
            outcome.identified = False

    try:
        peaks = [argmax_in_ball(field_, ball, search, j) for j, ball in enumerate(search.balls)]
        pooled = config.covariance_mode == CovarianceMode.STATIONARY_POOLED
        refinement = search.grid_refinement
        grad_cov = hess_cov = None
        if pooled:
            grad_cov = estimate_grad_cov(
                cohort, None, config.covariance_mode, refinement=refinement
            )
        if pooled and RegionMethod.MONTE_CARLO in config.methods:
            hess_cov = estimate_hess_cov(
                cohort, config.covariance_mode, refinement=refinement, check_singular=False
            )
        mc = config.mc.model_copy(update={"seed": config.master_seed})

        for method in config.methods:
            marginal = [
                region_for_peak(
                    cohort,
                    peak,
                    method,
                    config.target,
                    config.alpha,
                    covariance_mode=config.covariance_mode,
                    mc=mc,
                    refinement=refinement,
                    grad_cov=grad_cov,
                    hess_cov=hess_cov,
                    stream_key=(replicate, j),
                )
                for j, peak in enumerate(peaks)
            ]
            joint = bonferroni_joint(marginal, config.alpha)
            if config.threshold_override is not None:
                override = {"threshold": config.threshold_override}
                marginal = [region.model_copy(update=override) for region in marginal]
                joint = [region.model_copy(update=override) for region in joint]
            outcome.hits[method] = [
                contains(region, truth) for region, truth in zip(marginal, truths, strict=True)
            ]
            outcome.joint[method] = all(
                contains(region, truth) for region, truth in zip(joint, truths, strict=True)
            )
    except NumericError as e:
        logger.debug(f"Replicate {replicate} (N={n}) failed: {e}")
        outcome.failure = str(e)
    return outcome


def run_coverage(config: ExperimentConfig) -> CoverageReport:
    """Empirical marginal and joint coverage for every (N, method) setting.

    Raises:
        ExperimentError: If more than config.failure_tolerance of the replicates at
            some N fail (degenerate peaks, singular covariances, dominant truncation).
    """
    truths = true_peaks(config.signal, config.noise, config.target)
    balls = _search_balls(config, truths)
    search = config.search.model_copy(update={"balls": balls})
    logger.info(
        f"Coverage experiment: N in {config.n_list}, {config.nsim} replicates, "
        f"methods {[m.value for m in config.methods]}, target {config.target.value}"
    )

    rows: list[CoverageRow] = []
    summaries: list[CoverageSummary] = []
    for position, n in enumerate(config.n_list):
        items = (
            (config, search, n, position * config.nsim + r, truths) for r in range(config.nsim)
        )
        outcomes: list[_Outcome] = _parallel(config.threads, _coverage_replicate, items)
        failures = sum(1 for o in outcomes if o.failure is not None)
        _check_failures(failures, config.nsim, config.failure_tolerance, f"N={n}")
        good = [o for o in outcomes if o.failure is None]
        trials = len(good)

        identifiability = None
        if config.track_identifiability:
            identifiability = sum(1 for o in outcomes if o.identified) / config.nsim

        for method in config.methods:
            rates = []
            for j in range(len(truths)):
                hits = sum(1 for o in good if o.hits[method][j])
                rate = hits / trials if trials else 0.0
                rates.append(rate)
                rows.append(
                    CoverageRow(
                        n=n,
                        method=method,
                        peak=j,
                        hits=hits,
                        trials=trials,
                        empirical_coverage=rate,
                        band=binomial_band(rate, trials),
                    )
                )
            joint_hits = sum(1 for o in good if o.joint[method])
            joint_rate = joint_hits / trials if trials else 0.0
            summaries.append(
                CoverageSummary(
                    n=n,
                    method=method,
                    trials=trials,
                    failures=failures,
                    average_empirical_coverage=float(np.mean(rates)),
                    joint_hits=joint_hits,
                    empirical_joint_coverage=joint_rate,
                    joint_band=binomial_band(joint_rate, trials),
                    identifiability_rate=identifiability,
                )
            )
            logger.info(
                f"N={n} {method.value}: average coverage {np.mean(rates):.3f}, "
                f"joint {joint_rate:.3f} over {trials} replicates"
            )

    return CoverageReport(
        target=config.target,
        alpha=config.alpha,
        nsim=config.nsim,
        master_seed=config.master_seed,
        rows=rows,
        summaries=summaries,
    )


def _census_replicate(
    config: ExperimentConfig, search: SearchSpec, n: int, replicate: int, kind: DerivedFieldKind
) -> tuple[bool, bool] | None:
    cohort = generate_cohort(
        config.signal, config.noise, n, replicate=replicate, seed=config.master_seed
    )
    try:
        census = ball_census(cohort.field(kind), search.balls, search)
    except NumericError as e:
        logger.debug(f"Replicate {replicate} (N={n}) failed: {e}")
        return None
    return census.identified, census.outside > 0


def _flatness(
    config: ExperimentConfig, balls: list[Ball], target: RegionTarget
) -> tuple[float, float]:
    """(smallest true gradient norm, flat fraction) over the grid outside every ball."""
    truth = TruthField(config.signal, config.noise, target)
    points = grid_points(seeding_grid(truth.domain, 1.0, config.search.grid_refinement))
    gradients = np.linalg.norm(truth.jet(points).gradient, axis=1)
    outside = np.ones(len(points), dtype=bool)
    for ball in balls:
        outside &= np.linalg.norm(points - np.asarray(ball.center), axis=1) > ball.radius
    if not np.any(outside):
        return math.inf, 0.0
    scale = float(np.max(gradients))
    if scale == 0:
        return 0.0, 1.0
    flat = gradients[outside] <= FLAT_GRADIENT * scale
    return float(np.min(gradients[outside])), float(np.mean(flat))


def run_identifiability(config: ExperimentConfig) -> IdentifiabilityReport:
    """Fraction of replicates with exactly one maximum per ball and none outside.

    The true field is also checked for flat stretches outside the balls: if the
    true gradient vanishes on more than a tenth of that region, spurious maxima
    need not become rare as N grows and the report flags the violation.
    """
    # Noiseless cohorts have no Cohen's d; their identifiability is that of the mean.
    noiseless = config.noise.scale.level <= 0
    target = RegionTarget.MEAN if noiseless else config.target
    kind = _field_kind(target)
    truths = true_peaks(config.signal, config.noise, target)
    balls = _search_balls(config, truths)
    search = config.search.model_copy(update={"balls": balls})

    rows = []
    for position, n in enumerate(config.n_list):
        items = ((config, search, n, position * config.nsim + r, kind) for r in range(config.nsim))
        results = _parallel(config.threads, _census_replicate, items)
        failures = sum(1 for result in results if result is None)
        _check_failures(failures, config.nsim, config.failure_tolerance, f"N={n}")
        identified = sum(1 for result in results if result is not None and result[0])
        outside = sum(1 for result in results if result is not None and result[1])
        rate = identified / config.nsim
        rows.append(
            IdentifiabilityRow(
                n=n,
                replicates=config.nsim,
                identified=identified,
                rate=rate,
                outside_rate=outside / config.nsim,
                band=binomial_band(rate, config.nsim),
            )
        )

    min_gradient, flat_fraction = _flatness(config, balls, target)
    violated = flat_fraction > FLAT_FRACTION_LIMIT
    if violated:
        logger.warning(
            f"True field is flat on {flat_fraction:.0%} of the region outside the balls; "
            "spurious maxima will not vanish as N grows"
        )
    return IdentifiabilityReport(
        rows=rows,
        min_outside_gradient=min_gradient,
        flat_fraction=flat_fraction,
        assumption_violated=violated,
    )


def _relative_deviation(empirical: np.ndarray, expected: np.ndarray, scale: float) -> float:
    return float(np.max(np.abs(empirical - expected)) / scale)


def _d_gradient_draw(
    signal: SignalSpec,
    noise: NoiseSpec,
    n: int,
    rep: int,
    seed: int,
    point: np.ndarray,
    d_gradient: np.ndarray,
    sigma: float,
) -> np.ndarray:
    cohort = generate_cohort(signal, noise, n, replicate=rep, seed=seed)
    d_grad = cohort.d_grad(point)
    sigma_hat = math.sqrt(cohort.var_eval(point))
    return math.sqrt(n) * (d_grad - sigma * d_gradient / sigma_hat)


def check_t_gradient_clt(
    noise: NoiseSpec,
    n_large: int = 200,
    reps: int = 5000,
    *,
    signal: SignalSpec | None = None,
    point: np.ndarray | None = None,
    seed: int = 0,
    threads: int = 1,
) -> MomentReport:
    """Covariance of sqrt(N) (grad d_N - sigma grad d / sigma_hat_N) at one point.

    The limit is (1 + d^2) Lambda', with Lambda' from lambda_prime applied to the
    exact Lambda, Gamma and grad sigma^2 of the model Y = mu + sigma eps, where eps
    is standardized smoothed white noise.

    Args:
        noise: Noise model; should be Gaussian with standardize on.
        n_large: Subjects per cohort.
        reps: Independent cohorts.
        signal: Mean signal (default: zero on [0, 40] as a flat quadratic).
        point: Evaluation point (default: the domain center).
        seed: Master seed.
        threads: Worker threads.
    """
    signal = signal or SignalSpec(
        shape=QuadraticSignal(theta=[20.0], curvature=0.0),
        domain={"lower": [0.0], "upper": [40.0]},
    )
    box = domain_box(signal)
    point = box.center if point is None else np.asarray(point, dtype=float).reshape(-1)

    kernel = kernel_for(noise)
    lambda_eps = analytic_noise_grad_cov(
        noise_lattice(signal, kernel), kernel, point, standardize=noise.standardize
    )
    truth = TruthField(signal, noise, RegionTarget.COHENS_D)
    d_jet = truth.jet(point)
    d_value = float(d_jet.value[0])
    scale = scale_term(noise, box)
    if scale is None:
        sigma, grad_sigma = 1.0, np.zeros(box.dim)
    else:
        scale_jet = scale.jet(point[None, :])
        sigma, grad_sigma = float(scale_jet.value[0]), scale_jet.gradient[0]

    gc = GradCov(
        lambda_=np.outer(grad_sigma, grad_sigma) + sigma**2 * lambda_eps,
        gamma=sigma * grad_sigma,
        sigma2=sigma**2,
        mode=CovarianceMode.POINTWISE,
    )
    expected = (1.0 + d_value**2) * lambda_prime(gc, 2.0 * sigma * grad_sigma)

    items = (
        (signal, noise, n_large, rep, seed, point, d_jet.gradient[0], sigma) for rep in range(reps)
    )
    draws = np.array(_parallel(threads, _d_gradient_draw, items))
    empirical = np.atleast_2d(np.cov(draws, rowvar=False))
    return MomentReport(
        name="t_gradient_clt",
        reps=reps,
        expected=expected,
        empirical=empirical,
        max_relative_deviation=_relative_deviation(
            empirical, expected, float(np.max(np.abs(expected)))
        ),
        extras={"d": d_value, "max_abs_mean": float(np.max(np.abs(draws.mean(axis=0))))},
    )


def check_chi2_gradient(
    params: GradCov, reps: int = 100_000, *, components: int = 1, seed: int = 0
) -> MomentReport:
    """Conditional law of grad U for U = sum_k Y_k^2 over iid Gaussian components.

    (Y_k, grad Y_k) are drawn jointly normal with variance sigma^2, cross moment
    Gamma and gradient covariance Lambda. The residual R = grad U - 2 Gamma U /
    sigma^2, scaled by 1 / sqrt(4 U), should have mean zero, covariance
    Lambda - Gamma Gamma^T / sigma^2 and no correlation with U. Deviations are
    relative to the largest entry of Lambda.
    """
    lam = np.atleast_2d(params.lambda_)
    gamma = np.asarray(params.gamma, dtype=float).reshape(-1)
    sigma2 = params.sigma2
    if sigma2 <= 0:
        raise ConfigError("the component variance must be positive")
    dim = len(gamma)

    joint = np.zeros((dim + 1, dim + 1))
    joint[0, 0] = sigma2
    joint[0, 1:] = joint[1:, 0] = gamma
    joint[1:, 1:] = lam
    rng = streams.generator(seed, streams.SIGNAL_DRAWS)
    draws = rng.multivariate_normal(
        np.zeros(dim + 1), joint, size=(reps, components), method="eigh"
    )

    y, grad_y = draws[..., 0], draws[..., 1:]
    u = np.sum(y * y, axis=1)
    grad_u = 2.0 * np.einsum("rk,rki->ri", y, grad_y)
    scaled = (grad_u - 2.0 * np.outer(u, gamma) / sigma2) / np.sqrt(4.0 * u)[:, None]

    expected = lam - np.outer(gamma, gamma) / sigma2
    empirical = np.atleast_2d(np.cov(scaled, rowvar=False))
    extras = {
        "max_abs_mean": float(np.max(np.abs(scaled.mean(axis=0)))),
        "max_abs_corr_with_u": float(
            np.max(np.abs(np.corrcoef(scaled.T, u)[-1, :-1]))
            if np.all(scaled.std(axis=0) > 0)
            else 0.0
        ),
    }
    if dim == 1 and expected[0, 0] > 0:
        ks = stats.kstest(scaled[:, 0] / math.sqrt(expected[0, 0]), "norm")
        extras["ks_statistic"] = float(ks.statistic)
        extras["ks_pvalue"] = float(ks.pvalue)

    return MomentReport(
        name="chi2_gradient",
        reps=reps,
        expected=expected,
        empirical=empirical,
        max_relative_deviation=_relative_deviation(
            empirical, expected, float(np.max(np.abs(lam)))
        ),
        extras=extras,
    )


def _sample(dist: Any, size: int, rng: np.random.Generator) -> np.ndarray:
    if np.isscalar(dist):
        return np.full(size, float(dist))
    return dist.rvs(size=size, random_state=rng)


def _exact_tails(dist_a: Any, dist_b: Any, x: float) -> tuple[float | None, float | None]:
    """P(A / E[B] > x) and P(A / B > x) by one-dimensional integration."""
    if np.isscalar(dist_a):
        return None, None
    if np.isscalar(dist_b):
        tail = float(dist_a.sf(x * float(dist_b)))
        return tail, tail
    lower, upper = dist_b.support()
    ratio, _ = integrate.quad(lambda b: dist_a.sf(x * b) * dist_b.pdf(b), lower, upper)
    return float(dist_a.sf(x * dist_b.mean())), float(ratio)


def check_ratio_dominance(
    dist_a: Any,
    dist_b: Any,
    x_grid: list[float],
    reps: int = 1_000_000,
    *,
    seed: int = 0,
) -> DominanceReport:
    """Check P(A / E[B] > x) <= P(A / B > x) for each x in x_grid.

    Args:
        dist_a: Frozen scipy distribution, symmetric and unimodal about its mean.
        dist_b: Frozen scipy distribution with positive support, or a positive constant.
        x_grid: Thresholds (x >= 0).
        reps: Monte Carlo draws; A and B draws are shared by both tails.
        seed: Master seed.

    Raises:
        ConfigError: If B can take non-positive values.
    """
    if np.isscalar(dist_b):
        if float(dist_b) <= 0:
            raise ConfigError(f"B must be positive, got the constant {dist_b}")
        mean_b = float(dist_b)
    else:
        lower, _ = dist_b.support()
        if lower < 0:
            raise ConfigError(f"B must have positive support, its support starts at {lower}")
        mean_b = float(dist_b.mean())

    rng = streams.generator(seed, streams.SIGNAL_DRAWS)
    a = _sample(dist_a, reps, rng)
    b = _sample(dist_b, reps, rng)
    mean_ratio = a / mean_b
    ratio = a / b

    rows = []
    for x in x_grid:
        p_mean = float(np.mean(mean_ratio > x))
        p_ratio = float(np.mean(ratio > x))
        band = 2.0 * math.sqrt((p_mean * (1 - p_mean) + p_ratio * (1 - p_ratio)) / reps)
        exact_mean, exact_ratio = _exact_tails(dist_a, dist_b, x)
        rows.append(
            DominanceRow(
                x=x,
                p_mean_ratio=p_mean,
                p_ratio=p_ratio,
                band=band,
                exact_mean_ratio=exact_mean,
                exact_ratio=exact_ratio,
                holds=p_mean <= p_ratio + band,
            )
        )
    return DominanceReport(reps=reps, rows=rows, holds=all(row.holds for row in rows))


def _spectrum_replicate(config: SpectrumExperimentConfig, replicate: int) -> _Outcome:
    cohort = spectrum_cohort(generate_series(config, replicate), config.welch)
    balls = [Ball(center=[f], radius=config.ball_radius) for f in config.frequencies]
    outcome = _Outcome()
    try:
        regions = spectrum_peak_regions(
            cohort,
            balls,
            config.alpha,
            config.target,
            config.method,
            mc=config.mc.model_copy(update={"seed": config.master_seed}),
            search=config.search,
            stream_key=(replicate,),
        )
    except NumericError as e:
        logger.debug(f"Spectrum replicate {replicate} failed: {e}")
        outcome.failure = str(e)
        return outcome
    truths = [np.array([f]) for f in config.frequencies]
    outcome.hits[config.method] = [
        contains(region, truth) for region, truth in zip(regions.marginal, truths, strict=True)
    ]
    outcome.joint[config.method] = all(
        contains(region, truth) for region, truth in zip(regions.joint, truths, strict=True)
    )
    return outcome


def run_spectrum_coverage(config: SpectrumExperimentConfig) -> CoverageReport:
    """Coverage of spectrum peak regions on synthetic sine-plus-noise cohorts."""
    logger.info(
        f"Spectrum coverage: {config.n_subjects} subjects, {config.nsim} replicates, "
        f"frequencies {config.frequencies}"
    )
    items = ((config, r) for r in range(config.nsim))
    outcomes: list[_Outcome] = _parallel(config.threads, _spectrum_replicate, items)
    failures = sum(1 for o in outcomes if o.failure is not None)
    _check_failures(failures, config.nsim, config.failure_tolerance, "spectrum")
    good = [o for o in outcomes if o.failure is None]
    trials = len(good)
    method = config.method

    rows = []
    for j in range(len(config.frequencies)):
        hits = sum(1 for o in good if o.hits[method][j])
        rate = hits / trials if trials else 0.0
        rows.append(
            CoverageRow(
                n=config.n_subjects,
                method=method,
                peak=j,
                hits=hits,
                trials=trials,
                empirical_coverage=rate,
                band=binomial_band(rate, trials),
            )
        )
    joint_hits = sum(1 for o in good if o.joint[method])
    joint_rate = joint_hits / trials if trials else 0.0
    summary = CoverageSummary(
        n=config.n_subjects,
        method=method,
        trials=trials,
        failures=failures,
        average_empirical_coverage=float(np.mean([row.empirical_coverage for row in rows])),
        joint_hits=joint_hits,
        empirical_joint_coverage=joint_rate,
        joint_band=binomial_band(joint_rate, trials),
    )
    return CoverageReport(
        target=config.target,
        alpha=config.alpha,
        nsim=config.nsim,
        master_seed=config.master_seed,
        rows=rows,
        summaries=[summary],
    )


def plot_series(report: CoverageReport) -> dict[str, Any]:
    """Coverage-vs-N curves per method, with the nominal level and its binomial band."""
    nominal = 1.0 - report.alpha
    band = binomial_band(nominal, report.nsim)
    methods = []
    for method in dict.fromkeys(summary.method for summary in report.summaries):
        summaries = sorted(
            (s for s in report.summaries if s.method == method), key=lambda s: s.n
        )
        methods.append(
            {
                "method": method.value,
                "n": [s.n for s in summaries],
                "average_coverage": [s.average_empirical_coverage for s in summaries],
                "joint_coverage": [s.empirical_joint_coverage for s in summaries],
            }
        )
    return {
        "target": report.target.value,
        "nominal": nominal,
        "band_lower": nominal - band,
        "band_upper": nominal + band,
        "series": methods,
    }
