"""Gradient and Hessian covariance estimates from a cohort.

Lambda is the covariance of the gradient of one component field, Gamma the
cross-moment E[(Y - mu) grad Y] (a D-vector) and Omega the covariance of the
half-vectorized Hessian. Pointwise estimates use the subjects' jets at one
location; pooled estimates average the same sample moments over the seeding
grid of the domain, which is appropriate for stationary noise.
"""

import numpy as np

from peakcr.exceptions import DataError, DegenerateVarianceError, SingularCovarianceError
from peakcr.grid_field import FieldJet, as_points
from peakcr.models import MAX_CONDITION, CovarianceMode, GradCov, HessCov
from peakcr.peaks import grid_points, seeding_grid
from peakcr.sample_fields import FieldCohort

PSD_TOLERANCE = 1e-10
SYMMETRY_TOLERANCE = 1e-9
# Upper bound on (location, subject, D, D) entries per pooling block.
_POOL_ENTRIES = 2_000_000


def vech(matrix: np.ndarray) -> np.ndarray:
    """Stack the lower triangle column by column: [[a, b], [b, c]] -> (a, b, c)."""
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DataError(f"vech needs a square matrix, got shape {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOLERANCE:
        raise DataError("vech needs a symmetric matrix")
    return a.T[np.triu_indices(a.shape[0])]


def vech_dim(length: int) -> int:
    dim = int(round((np.sqrt(8 * length + 1) - 1) / 2))
    if dim * (dim + 1) // 2 != length:
        raise DataError(f"{length} is not a half-vectorized length D(D+1)/2")
    return dim


def vech_inv(vector: np.ndarray) -> np.ndarray:
    """Inverse of vech; leading axes are kept, so (K, D(D+1)/2) gives (K, D, D)."""
    v = np.asarray(vector, dtype=float)
    dim = vech_dim(v.shape[-1])
    rows, cols = np.triu_indices(dim)
    out = np.zeros((*v.shape[:-1], dim, dim))
    out[..., cols, rows] = v
    out[..., rows, cols] = v
    return out


def repair_psd(matrix: np.ndarray, name: str) -> np.ndarray:
    """Symmetrize and clip eigenvalues within -1e-10 * trace up to zero.

    Raises:
        SingularCovarianceError: If an eigenvalue is more negative than that.
    """
    sym = 0.5 * (matrix + matrix.T)
    eigenvalues, vectors = np.linalg.eigh(sym)
    floor = -PSD_TOLERANCE * max(float(np.trace(sym)), 0.0)
    if eigenvalues[0] < floor:
        raise SingularCovarianceError(
            f"{name} is not positive semidefinite (smallest eigenvalue {eigenvalues[0]:.3g})"
        )
    if eigenvalues[0] >= 0:
        return sym
    clipped = (vectors * np.clip(eigenvalues, 0.0, None)) @ vectors.T
    return 0.5 * (clipped + clipped.T)


def _require_conditioned(matrix: np.ndarray, name: str) -> None:
    eigenvalues = np.linalg.eigvalsh(matrix)
    if eigenvalues[0] <= 0 or eigenvalues[-1] / eigenvalues[0] > MAX_CONDITION:
        raise SingularCovarianceError(
            f"{name} is singular or ill-conditioned (eigenvalues {eigenvalues.tolist()})"
        )


def pooling_points(cohort: FieldCohort, refinement: int) -> np.ndarray:
    """The seeding grid of the cohort's domain."""
    return grid_points(seeding_grid(cohort.domain, cohort.resolution, refinement))


def _locations(
    cohort: FieldCohort, s: np.ndarray | None, mode: CovarianceMode, refinement: int
) -> np.ndarray:
    if mode == CovarianceMode.POINTWISE:
        if s is None:
            raise DataError("pointwise covariance needs a location")
        return as_points(s, cohort.dim)
    return pooling_points(cohort, refinement)


def _pooled(cohort: FieldCohort, points: np.ndarray, moments) -> tuple[np.ndarray, ...]:
    """Average per-location moments over points, evaluated block by block."""
    block = max(1, _POOL_ENTRIES // (cohort.n * cohort.dim * cohort.dim))
    totals: list[np.ndarray] | None = None
    for start in range(0, len(points), block):
        chunk = points[start : start + block]
        parts = moments(cohort.subject_jets(chunk, order=2))
        sums = [np.sum(part, axis=0) for part in parts]
        totals = sums if totals is None else [t + p for t, p in zip(totals, sums, strict=True)]
    return tuple(total / len(points) for total in totals)


def _gradient_moments(jets: FieldJet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = jets.value.shape[1]
    r = jets.value - jets.value.mean(axis=1, keepdims=True)
    rg = jets.gradient - jets.gradient.mean(axis=1, keepdims=True)
    lam = np.einsum("mni,mnj->mij", rg, rg) / (n - 1)
    gamma = np.einsum("mn,mni->mi", r, rg) / (n - 1)
    sigma2 = np.sum(r * r, axis=1) / (n - 1)
    return lam, gamma, sigma2


def _hessian_moments(jets: FieldJet) -> tuple[np.ndarray]:
    n = jets.value.shape[1]
    dim = jets.gradient.shape[-1]
    rows, cols = np.triu_indices(dim)
    h = jets.hessian[..., cols, rows]
    rh = h - h.mean(axis=1, keepdims=True)
    return (np.einsum("mnk,mnl->mkl", rh, rh) / (n - 1),)


def estimate_grad_cov(
    cohort: FieldCohort,
    s: np.ndarray | None = None,
    mode: CovarianceMode = CovarianceMode.STATIONARY_POOLED,
    *,
    refinement: int = 11,
    check_singular: bool = True,
) -> GradCov:
    """Sample Lambda, Gamma and sigma^2 (N - 1 denominators).

    Args:
        cohort: Component fields.
        s: Location for pointwise estimates (ignored when pooled).
        mode: Pointwise or pooled over the domain.
        refinement: Pooling grid points per voxel per axis.
        check_singular: Raise on a singular or ill-conditioned Lambda.

    Raises:
        SingularCovarianceError: If Lambda has condition number above 1e12.
    """
    points = _locations(cohort, s, mode, refinement)
    lam, gamma, sigma2 = _pooled(cohort, points, _gradient_moments)
    lam = repair_psd(lam, "gradient covariance")
    if check_singular:
        _require_conditioned(lam, "gradient covariance")
    return GradCov(lambda_=lam, gamma=gamma, sigma2=max(float(sigma2), 0.0), mode=mode)


def estimate_hess_cov(
    cohort: FieldCohort,
    mode: CovarianceMode = CovarianceMode.STATIONARY_POOLED,
    s: np.ndarray | None = None,
    *,
    refinement: int = 11,
    check_singular: bool = True,
) -> HessCov:
    """Sample covariance of vech(Hessian) of the component fields."""
    points = _locations(cohort, s, mode, refinement)
    (omega,) = _pooled(cohort, points, _hessian_moments)
    omega = repair_psd(omega, "Hessian covariance")
    if check_singular:
        _require_conditioned(omega, "Hessian covariance")
    return HessCov(omega=omega, mode=mode)


def lambda_prime(gc: GradCov, grad_sigma2: np.ndarray) -> np.ndarray:
    """Covariance of the gradient of Y / sigma from Lambda, Gamma and grad sigma^2.

    Lambda' = Lambda / s2 - (g Gamma^T + Gamma g^T) / (2 s2^2) + g g^T / (4 s2^2),
    with g = grad sigma^2 and s2 = sigma^2.
    """
    if gc.sigma2 <= 0:
        raise DegenerateVarianceError("lambda_prime needs a positive variance")
    g = np.asarray(grad_sigma2, dtype=float).reshape(-1)
    s2 = gc.sigma2
    cross = np.outer(g, gc.gamma)
    result = gc.lambda_ / s2 - (cross + cross.T) / (2.0 * s2**2) + np.outer(g, g) / (4.0 * s2**2)
    return 0.5 * (result + result.T)
