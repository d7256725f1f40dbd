"""Critical points of smooth fields.

Seeds are the local extrema of the field sampled on a fine grid over the domain.
Each seed is refined by Newton's method on +f (maxima seeds) or -f (minima
seeds); where the Hessian of the signed field is not negative definite the
iteration takes a backtracking gradient-ascent step instead. Seeds are refined
together, one batched field evaluation per iteration.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from peakcr.config import Ball, SearchSpec
from peakcr.exceptions import DomainError
from peakcr.grid_field import Box, Field, as_points
from peakcr.logging_config import get_logger
from peakcr.models import PeakEstimate, PeakKind

logger = get_logger("peaks")

EIG_RELATIVE_EPS = 1e-10
ARMIJO = 1e-4
MAX_HALVINGS = 40
BOUNDARY_SAMPLES_MIN = 64

_ACTIVE, _CONVERGED, _OUTSIDE, _STALLED = 0, 1, 2, 3


def seeding_grid(domain: Box, resolution: float, refinement: int) -> list[np.ndarray]:
    """Per-axis coordinates spaced at most resolution / refinement apart."""
    step = resolution / refinement
    axes = []
    for lo, hi in zip(domain.lower, domain.upper, strict=True):
        count = max(2, int(np.ceil((hi - lo) / step - 1e-9)) + 1)
        axes.append(np.linspace(lo, hi, count))
    return axes


def grid_points(axes: list[np.ndarray]) -> np.ndarray:
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=-1)


def classify(hessian: np.ndarray) -> PeakKind:
    """Max/Min/Saddle by Hessian eigenvalue signs, Degenerate within 1e-10 |H|."""
    eigenvalues = np.linalg.eigvalsh(hessian)
    eps = EIG_RELATIVE_EPS * np.max(np.abs(eigenvalues))
    if np.any(np.abs(eigenvalues) <= eps):
        return PeakKind.DEGENERATE
    if np.all(eigenvalues < 0):
        return PeakKind.MAX
    if np.all(eigenvalues > 0):
        return PeakKind.MIN
    return PeakKind.SADDLE


def _ball_index(location: np.ndarray, balls: list[Ball] | None) -> int | None:
    for j, ball in enumerate(balls or []):
        if np.linalg.norm(location - np.asarray(ball.center)) <= ball.radius:
            return j
    return None


@dataclass
class _Refinement:
    """Outcome of batched Newton refinement."""

    locations: np.ndarray
    values: np.ndarray
    gradients: np.ndarray
    hessians: np.ndarray
    converged: np.ndarray
    dropped_outside: int
    stalled: int


def _ascent_step(
    field: Field,
    x: np.ndarray,
    signs: np.ndarray,
    f0: np.ndarray,
    g: np.ndarray,
    step_length: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Backtracking (Armijo) ascent along g on the signed field; returns (x, stalled)."""
    direction = g * (step_length / np.linalg.norm(g, axis=1))[:, None]
    slope = np.sum(g * direction, axis=1)
    t = np.ones(len(x))
    new_x = x.copy()
    pending = np.ones(len(x), dtype=bool)
    for _ in range(MAX_HALVINGS):
        idx = np.flatnonzero(pending)
        if idx.size == 0:
            break
        trial = x[idx] + t[idx, None] * direction[idx]
        inside = field.domain.contains(trial)
        values = np.full(idx.size, -np.inf)
        if np.any(inside):
            values[inside] = signs[idx[inside]] * field.jet(trial[inside], order=0).value
        accept = values >= f0[idx] + ARMIJO * t[idx] * slope[idx]
        new_x[idx[accept]] = trial[accept]
        pending[idx[accept]] = False
        t[idx[~accept]] *= 0.5
    return new_x, pending


def refine(
    field: Field, seeds: np.ndarray, signs: np.ndarray, tol: float, max_iters: int
) -> _Refinement:
    """Newton refinement of every seed toward a critical point of signs * field."""
    x = np.array(seeds, dtype=float)
    count, dim = x.shape
    status = np.full(count, _ACTIVE)
    values = np.zeros(count)
    gradients = np.zeros((count, dim))
    hessians = np.zeros((count, dim, dim))
    step_length = field.resolution

    for iteration in range(max_iters + 1):
        idx = np.flatnonzero(status == _ACTIVE)
        if idx.size == 0:
            break
        jet = field.jet(x[idx])
        values[idx], gradients[idx], hessians[idx] = jet.value, jet.gradient, jet.hessian

        s = signs[idx]
        g = s[:, None] * jet.gradient
        done = np.linalg.norm(g, axis=1) <= tol
        status[idx[done]] = _CONVERGED
        if iteration == max_iters:
            status[idx[~done]] = _STALLED
            break

        work = idx[~done]
        g = g[~done]
        h = s[~done, None, None] * jet.hessian[~done]
        newton = np.linalg.eigvalsh(h)[:, -1] < 0

        n_idx = work[newton]
        if n_idx.size:
            step = -np.linalg.solve(h[newton], g[newton][..., None])[..., 0]
            lengths = np.linalg.norm(step, axis=1)
            scale = np.minimum(1.0, step_length / np.maximum(lengths, np.finfo(float).tiny))
            trial = x[n_idx] + step * scale[:, None]
            inside = field.domain.contains(trial)
            x[n_idx[inside]] = trial[inside]
            status[n_idx[~inside]] = _OUTSIDE

        a_idx = work[~newton]
        if a_idx.size:
            f0 = signs[a_idx] * values[a_idx]
            x[a_idx], stalled = _ascent_step(
                field, x[a_idx], signs[a_idx], f0, g[~newton], step_length
            )
            status[a_idx[stalled]] = _STALLED

    converged = status == _CONVERGED
    return _Refinement(
        locations=x,
        values=values,
        gradients=gradients,
        hessians=hessians,
        converged=converged,
        dropped_outside=int(np.sum(status == _OUTSIDE)),
        stalled=int(np.sum(status == _STALLED)),
    )


def _grid_extrema(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices of grid-local maxima and minima (3-point neighbourhoods)."""
    maxima = values == ndimage.maximum_filter(values, size=3, mode="nearest")
    minima = values == ndimage.minimum_filter(values, size=3, mode="nearest")
    return np.flatnonzero(maxima), np.flatnonzero(minima)


def _deduplicate(order: np.ndarray, locations: np.ndarray, radius: float) -> list[int]:
    """Greedy pass in `order`, dropping points within radius of a kept one."""
    tree = cKDTree(locations)
    removed = np.zeros(len(locations), dtype=bool)
    kept = []
    for i in order:
        if removed[i]:
            continue
        kept.append(int(i))
        removed[tree.query_ball_point(locations[i], radius)] = True
    return kept


def _tolerance(newton_tol: float, grid_values: np.ndarray) -> float:
    scale = float(np.max(np.abs(grid_values))) if grid_values.size else 0.0
    return newton_tol * (scale if scale > 0 else 1.0)


def find_critical_points(field: Field, spec: SearchSpec) -> list[PeakEstimate]:
    """All critical points reachable from grid-local extrema, sorted by location.

    Args:
        field: Field to search.
        spec: Grid refinement, Newton tolerance and optional search balls.

    Returns:
        Deduplicated, classified critical points; ball_index set for those inside
        a search ball.
    """
    axes = seeding_grid(field.domain, field.resolution, spec.grid_refinement)
    points = grid_points(axes)
    grid_values = field.jet(points, order=0).value
    tol = _tolerance(spec.newton_tol, grid_values)

    max_idx, min_idx = _grid_extrema(grid_values.reshape([len(a) for a in axes]))
    seeds = np.concatenate([points[max_idx], points[min_idx]])
    signs = np.concatenate([np.ones(max_idx.size), -np.ones(min_idx.size)])
    result = refine(field, seeds, signs, tol, spec.max_iters)
    if result.dropped_outside or result.stalled:
        logger.debug(
            f"{result.dropped_outside} seeds left the domain and {result.stalled} did not "
            f"converge (of {len(seeds)})"
        )

    good = np.flatnonzero(result.converged)
    if good.size == 0:
        return []
    locations = result.locations[good]
    order = np.lexsort((*locations.T[::-1], -result.values[good]))
    kept = good[_deduplicate(order, locations, spec.dedup_radius)]

    peaks = [
        PeakEstimate(
            location=result.locations[i],
            value=float(result.values[i]),
            gradient_norm=float(np.linalg.norm(result.gradients[i])),
            hessian=result.hessians[i],
            kind=classify(result.hessians[i]),
            ball_index=_ball_index(result.locations[i], spec.balls),
        )
        for i in kept
    ]
    return sorted(peaks, key=lambda peak: tuple(peak.location))


def _ball_boundary(ball: Ball, step: float) -> np.ndarray:
    center = np.asarray(ball.center, dtype=float)
    if center.size == 1:
        return np.array([[center[0] - ball.radius], [center[0] + ball.radius]])
    count = max(BOUNDARY_SAMPLES_MIN, int(np.ceil(2 * np.pi * ball.radius / step)))
    angles = np.linspace(0.0, 2 * np.pi, count, endpoint=False)
    return center + ball.radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def require_ball_inside(field: Field, ball: Ball) -> None:
    center = as_points(ball.center, field.dim)
    clearance = field.domain.distance_to_boundary(center)[0]
    if not field.domain.contains(center)[0] or clearance < ball.radius - 1e-9:
        raise DomainError(f"ball at {ball.center} with radius {ball.radius} leaves the domain")


def argmax_in_ball(
    field: Field, ball: Ball, spec: SearchSpec | None = None, ball_index: int | None = None
) -> PeakEstimate:
    """Global maximizer of the field over a closed ball.

    The maximizer is the best interior non-degenerate maximum found from grid
    seeds. If the field is higher somewhere on the ball's boundary, or no interior
    maximum exists, the best boundary/grid point comes back flagged Degenerate.
    """
    spec = spec or SearchSpec()
    require_ball_inside(field, ball)
    center = np.asarray(ball.center, dtype=float)
    box = Box(tuple(center - ball.radius), tuple(center + ball.radius))
    axes = seeding_grid(box, field.resolution, spec.grid_refinement)
    points = grid_points(axes)
    in_ball = np.linalg.norm(points - center, axis=1) <= ball.radius

    grid_values = np.full(len(points), -np.inf)
    grid_values[in_ball] = field.jet(points[in_ball], order=0).value
    tol = _tolerance(spec.newton_tol, grid_values[in_ball])

    max_idx, _ = _grid_extrema(grid_values.reshape([len(a) for a in axes]))
    best_grid = int(np.argmax(grid_values))
    seed_idx = np.union1d(max_idx[in_ball[max_idx]], [best_grid])
    result = refine(field, points[seed_idx], np.ones(seed_idx.size), tol, spec.max_iters)

    best: int | None = None
    for i in np.flatnonzero(result.converged):
        location = result.locations[i]
        if np.linalg.norm(location - center) > ball.radius:
            continue
        if classify(result.hessians[i]) != PeakKind.MAX:
            continue
        if best is None or result.values[i] > result.values[best]:
            best = int(i)

    boundary = _ball_boundary(ball, field.resolution / spec.grid_refinement)
    boundary_jet = field.jet(boundary)
    top = int(np.argmax(boundary_jet.value))

    if best is not None and result.values[best] >= boundary_jet.value[top]:
        return PeakEstimate(
            location=result.locations[best],
            value=float(result.values[best]),
            gradient_norm=float(np.linalg.norm(result.gradients[best])),
            hessian=result.hessians[best],
            kind=PeakKind.MAX,
            ball_index=ball_index,
        )

    logger.debug(f"no interior maximum dominates the boundary of the ball at {ball.center}")
    return PeakEstimate(
        location=boundary[top],
        value=float(boundary_jet.value[top]),
        gradient_norm=float(np.linalg.norm(boundary_jet.gradient[top])),
        hessian=boundary_jet.hessian[top],
        kind=PeakKind.DEGENERATE,
        ball_index=ball_index,
    )


def default_balls(centers: np.ndarray, domain: Box, shrink: float = 0.95) -> list[Ball]:
    """Search balls around known peaks.

    Every radius is `shrink` times the smaller of half the minimum inter-peak
    distance and the peak's distance to the domain boundary.
    """
    centers = as_points(centers, domain.dim)
    half_gap = np.inf
    if len(centers) > 1:
        gaps = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
        half_gap = float(np.min(gaps[np.triu_indices(len(centers), k=1)])) / 2.0
    edge = domain.distance_to_boundary(centers)
    return [
        Ball(center=center.tolist(), radius=shrink * float(min(half_gap, gap)))
        for center, gap in zip(centers, edge, strict=True)
    ]


@dataclass(frozen=True)
class BallCensus:
    """Non-degenerate maxima per ball and outside every ball."""

    per_ball: tuple[int, ...]
    outside: int

    @property
    def identified(self) -> bool:
        return all(count == 1 for count in self.per_ball) and self.outside == 0


def ball_census(field: Field, balls: list[Ball], spec: SearchSpec | None = None) -> BallCensus:
    """Count the field's non-degenerate maxima inside each ball and outside all of them.

    Only maxima count: the identifiability event asks for exactly one local
    maximum per ball and none elsewhere, so minima and saddles outside the balls
    leave the census unchanged.
    """
    spec = (spec or SearchSpec()).model_copy(update={"balls": balls})
    maxima = [peak for peak in find_critical_points(field, spec) if peak.kind == PeakKind.MAX]
    per_ball = tuple(sum(1 for peak in maxima if peak.ball_index == j) for j in range(len(balls)))
    outside = sum(1 for peak in maxima if peak.ball_index is None)
    return BallCensus(per_ball, outside)
