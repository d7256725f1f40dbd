"""Confidence ellipsoids for peak locations.

A region is {theta : n (c - theta)^T S^-1 (c - theta) < threshold} with c the
estimated peak location. Asymptotic regions use S = H^-1 Lambda H^-1 (times
(1 + d^2) with Lambda' for Cohen's d) and a chi-square threshold. Monte Carlo
regions keep the same S but take the threshold from the simulated distribution
of n delta^T S^-1 delta with delta = (vech^-1 B)^-1 A, A ~ N(0, Lambda / n) and
B ~ N(vech H, Omega / n), which accounts for noise in the Hessian estimate.
"""

import numpy as np
from scipy.stats import chi2

from peakcr import streams
from peakcr.config import McConfig
from peakcr.covariance import estimate_grad_cov, estimate_hess_cov, lambda_prime, vech, vech_inv
from peakcr.exceptions import (
    ConfigError,
    SingularCovarianceError,
    SingularHessianError,
    TruncationDominatesError,
    UnsupportedOperationError,
)
from peakcr.logging_config import get_logger
from peakcr.models import (
    ConfidenceEllipsoid,
    CovarianceMode,
    GradCov,
    HessCov,
    PeakEstimate,
    PeakKind,
    RegionMethod,
    RegionTarget,
)
from peakcr.sample_fields import FieldCohort

logger = get_logger("regions")

UNSUPPORTED_MC_COHENS_D = "unsupported: Monte Carlo for Cohen's d"


def chi2_threshold(alpha: float, dim: int) -> float:
    """Upper-alpha chi-square quantile with `dim` degrees of freedom."""
    _check_alpha(alpha)
    return float(chi2.ppf(1.0 - alpha, dim))


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")


def _peak_sign(peak: PeakEstimate) -> int:
    if peak.kind == PeakKind.MAX:
        return 1
    if peak.kind == PeakKind.MIN:
        return -1
    raise SingularHessianError(
        f"regions need a non-degenerate maximum or minimum, got a {peak.kind.value} point"
    )


def _sandwich(hessian: np.ndarray, middle: np.ndarray) -> np.ndarray:
    """H^-1 M H^-1, symmetric and positive definite."""
    try:
        inverse = np.linalg.inv(hessian)
    except np.linalg.LinAlgError as e:
        raise SingularHessianError("peak Hessian is singular") from e
    shape = inverse @ middle @ inverse
    shape = 0.5 * (shape + shape.T)
    if np.linalg.eigvalsh(shape)[0] <= 0:
        raise SingularCovarianceError("region shape matrix is not positive definite")
    return shape


def asymptotic_region_mean(
    peak: PeakEstimate, gc: GradCov, n: int, alpha: float
) -> ConfidenceEllipsoid:
    """Chi-square region for a peak of the mean field."""
    _peak_sign(peak)
    return ConfidenceEllipsoid(
        center=peak.location,
        shape=_sandwich(peak.hessian, gc.lambda_),
        threshold=chi2_threshold(alpha, peak.dim),
        n=n,
        alpha=alpha,
        method=RegionMethod.ASYMPTOTIC,
        target=RegionTarget.MEAN,
    )


def asymptotic_region_cohensd(
    peak: PeakEstimate,
    gc: GradCov,
    grad_sigma2: np.ndarray,
    d_value: float,
    n: int,
    alpha: float,
) -> ConfidenceEllipsoid:
    """Chi-square region for a peak of the Cohen's d field.

    The shape is (1 + d^2) H^-1 Lambda' H^-1 with H the Hessian of d at the peak.
    """
    _peak_sign(peak)
    shape = (1.0 + d_value**2) * _sandwich(peak.hessian, lambda_prime(gc, grad_sigma2))
    return ConfidenceEllipsoid(
        center=peak.location,
        shape=shape,
        threshold=chi2_threshold(alpha, peak.dim),
        n=n,
        alpha=alpha,
        method=RegionMethod.ASYMPTOTIC,
        target=RegionTarget.COHENS_D,
    )


def _compliant(matrices: np.ndarray, floor: float) -> np.ndarray:
    return np.linalg.eigvalsh(matrices)[..., 0] >= floor


def _eigen_floor(observed_h: np.ndarray, sign: int, eps: float) -> float:
    return eps * float(np.linalg.eigvalsh(-sign * np.asarray(observed_h))[0])


def truncate_hessian_draw(
    b: np.ndarray, mean: np.ndarray, observed_h: np.ndarray, sign: int, eps: float
) -> np.ndarray | None:
    """Keep a Hessian draw, replace it by its mirror about the mean, or discard it.

    A draw is compliant when -sign * vech^-1(b) is positive definite with smallest
    eigenvalue at least eps times that of -sign * observed_h. Returns None when
    neither b nor 2 * mean - b is compliant.
    """
    kept, keep = truncate_hessian_draws(np.atleast_2d(b), mean, observed_h, sign, eps)
    return kept[0] if keep[0] else None


def truncate_hessian_draws(
    draws: np.ndarray, mean: np.ndarray, observed_h: np.ndarray, sign: int, eps: float
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized truncate_hessian_draw; returns (draws with mirrors applied, keep mask)."""
    floor = _eigen_floor(observed_h, sign, eps)
    draws = np.array(draws, dtype=float)
    keep = _compliant(-sign * vech_inv(draws), floor)
    replaced = np.flatnonzero(~keep)
    if replaced.size:
        mirrors = 2.0 * np.asarray(mean, dtype=float) - draws[replaced]
        mirror_ok = _compliant(-sign * vech_inv(mirrors), floor)
        draws[replaced[mirror_ok]] = mirrors[mirror_ok]
        keep[replaced[mirror_ok]] = True
    return draws, keep


def mc_threshold(statistics: np.ndarray, alpha: float) -> float:
    """The ceil((1 - alpha) K)-th order statistic of K sorted statistics."""
    _check_alpha(alpha)
    count = len(statistics)
    index = count - int(np.floor(alpha * count + 1e-9)) - 1
    return float(statistics[max(index, 0)])


def monte_carlo_region_mean(
    peak: PeakEstimate,
    gc: GradCov,
    hc: HessCov,
    n: int,
    alpha: float,
    cfg: McConfig,
    stream_key: tuple[int, ...] = (),
) -> ConfidenceEllipsoid:
    """Monte Carlo region for a peak of the mean field.

    Args:
        peak: Peak of the mean field (Max or Min).
        gc: Gradient covariance (Lambda).
        hc: Hessian covariance (Omega).
        n: Number of subjects.
        alpha: Nominal level.
        cfg: Draw count, eigenvalue floor, seed and discard limit.
        stream_key: Extra keys selecting the random substream (e.g. replicate, peak).

    Raises:
        TruncationDominatesError: If more than cfg.max_discard_fraction of the draws
            are discarded.
    """
    sign = _peak_sign(peak)
    _check_alpha(alpha)
    hessian = peak.hessian
    dim = peak.dim
    shape = _sandwich(hessian, gc.lambda_)
    center_b = vech(0.5 * (hessian + hessian.T))

    rng = streams.generator(cfg.seed, *stream_key, streams.MONTE_CARLO)
    a = rng.multivariate_normal(np.zeros(dim), gc.lambda_ / n, size=cfg.draws, method="eigh")
    b = rng.multivariate_normal(center_b, hc.omega / n, size=cfg.draws, method="eigh")

    b, keep = truncate_hessian_draws(b, center_b, hessian, sign, cfg.eigen_floor)
    discarded = int(np.sum(~keep))
    if discarded > cfg.max_discard_fraction * cfg.draws:
        raise TruncationDominatesError(
            f"{discarded} of {cfg.draws} Hessian draws discarded; the Hessian estimate is "
            "too noisy for the Monte Carlo method"
        )
    if discarded:
        logger.debug(f"Discarded {discarded} of {cfg.draws} Hessian draws")

    delta = np.linalg.solve(vech_inv(b[keep]), a[keep][..., None])[..., 0]
    statistics = n * np.einsum("ki,ki->k", delta, np.linalg.solve(shape, delta.T).T)
    statistics.sort()
    return ConfidenceEllipsoid(
        center=peak.location,
        shape=shape,
        threshold=mc_threshold(statistics, alpha),
        n=n,
        alpha=alpha,
        method=RegionMethod.MONTE_CARLO,
        target=RegionTarget.MEAN,
        draws_discarded=discarded,
        draw_statistics=statistics,
    )


def bonferroni_joint(regions: list[ConfidenceEllipsoid], alpha: float) -> list[ConfidenceEllipsoid]:
    """Rebuild every region at level alpha / J for familywise coverage 1 - alpha.

    Monte Carlo regions reuse their own draw statistics.
    """
    if not regions:
        raise ConfigError("Bonferroni correction needs at least one region")
    if len({(r.n, r.target) for r in regions}) != 1:
        raise ConfigError("joint regions must share the sample size and target")
    level = alpha / len(regions)

    joint = []
    for region in regions:
        if region.method == RegionMethod.MONTE_CARLO:
            if region.draw_statistics is None:
                raise ConfigError("Monte Carlo region carries no draw statistics")
            threshold = mc_threshold(region.draw_statistics, level)
        else:
            threshold = chi2_threshold(level, region.dim)
        joint.append(region.model_copy(update={"threshold": threshold, "alpha": level}))
    return joint


def quadratic_form(region: ConfidenceEllipsoid, thetas: np.ndarray) -> np.ndarray:
    """n (c - theta)^T S^-1 (c - theta) for each row of an (M, D) array."""
    diff = region.center - np.asarray(thetas, dtype=float).reshape(-1, region.dim)
    return region.n * np.einsum("mi,mi->m", diff, np.linalg.solve(region.shape, diff.T).T)


def contains(region: ConfidenceEllipsoid, theta: np.ndarray | float) -> bool:
    """Strict membership: the boundary itself is outside."""
    return bool(quadratic_form(region, theta)[0] < region.threshold)


def rasterize(region: ConfidenceEllipsoid, axes: list[np.ndarray]) -> np.ndarray:
    """Boolean membership mask over the grid spanned by `axes` (ij indexing)."""
    grids = np.meshgrid(*axes, indexing="ij")
    points = np.stack([g.reshape(-1) for g in grids], axis=-1)
    return (quadratic_form(region, points) < region.threshold).reshape(grids[0].shape)


def region_for_peak(
    cohort: FieldCohort,
    peak: PeakEstimate,
    method: RegionMethod,
    target: RegionTarget,
    alpha: float,
    *,
    covariance_mode: CovarianceMode = CovarianceMode.STATIONARY_POOLED,
    mc: McConfig | None = None,
    refinement: int = 11,
    grad_cov: GradCov | None = None,
    hess_cov: HessCov | None = None,
    stream_key: tuple[int, ...] = (),
) -> ConfidenceEllipsoid:
    """Estimate the covariances a region needs and build it.

    `peak` must be a peak of the target field. Pooled covariance estimates do not
    depend on the peak, so callers handling several peaks can pass them in.

    Raises:
        UnsupportedOperationError: For the Monte Carlo method with Cohen's d.
    """
    if method == RegionMethod.MONTE_CARLO and target == RegionTarget.COHENS_D:
        raise UnsupportedOperationError(UNSUPPORTED_MC_COHENS_D)

    location = peak.location
    gc = grad_cov or estimate_grad_cov(cohort, location, covariance_mode, refinement=refinement)

    if target == RegionTarget.COHENS_D:
        if covariance_mode == CovarianceMode.POINTWISE:
            grad_sigma2 = cohort.var_grad(location)
        else:
            grad_sigma2 = np.zeros(cohort.dim)
        return asymptotic_region_cohensd(peak, gc, grad_sigma2, peak.value, cohort.n, alpha)

    if method == RegionMethod.ASYMPTOTIC:
        return asymptotic_region_mean(peak, gc, cohort.n, alpha)

    hc = hess_cov or estimate_hess_cov(
        cohort, covariance_mode, location, refinement=refinement, check_singular=False
    )
    return monte_carlo_region_mean(peak, gc, hc, cohort.n, alpha, mc or McConfig(), stream_key)
