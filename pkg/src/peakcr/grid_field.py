"""Lattice observations and their smooth convolution-field extension.

A SmoothField sends a location s to sum_l K(s - l) X(l), summed over the lattice
points l within the kernel's truncation radius of s, with value, gradient and
Hessian evaluated from analytic kernel derivatives. Evaluation is batched: the
kernel weights for a block of locations are assembled as sparse operators and
applied to one or many lattice value columns at once.
"""

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Protocol, runtime_checkable

import numpy as np
from scipy import sparse

from peakcr.exceptions import ConfigError, DataError, DomainError

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
DOMAIN_TOL = 1e-9
# Upper bound on candidate (location, lattice point, column) entries per block.
_BLOCK_ENTRIES = 4_000_000


@dataclass(frozen=True)
class Box:
    """Axis-aligned box {s : lower <= s <= upper}."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self) -> None:
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        if not lower or len(lower) != len(upper):
            raise DataError("box corners must be non-empty and of equal dimension")
        if any(lo > hi for lo, hi in zip(lower, upper, strict=True)):
            raise DataError(f"empty box: lower {lower} exceeds upper {upper}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def center(self) -> np.ndarray:
        return (np.array(self.lower) + np.array(self.upper)) / 2.0

    @property
    def widths(self) -> np.ndarray:
        return np.array(self.upper) - np.array(self.lower)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Membership of each row of an (M, D) array (or a single D-vector)."""
        pts = np.asarray(points, dtype=float)
        lower = np.array(self.lower) - DOMAIN_TOL
        upper = np.array(self.upper) + DOMAIN_TOL
        return np.all((pts >= lower) & (pts <= upper), axis=-1)

    def distance_to_boundary(self, points: np.ndarray) -> np.ndarray:
        """Distance from interior points to the nearest face."""
        pts = np.asarray(points, dtype=float)
        gaps = np.minimum(pts - np.array(self.lower), np.array(self.upper) - pts)
        return np.min(gaps, axis=-1)

    def inset(self, margin: float) -> "Box":
        lower = np.array(self.lower) + margin
        upper = np.array(self.upper) - margin
        if np.any(lower >= upper):
            raise DataError(f"box {self} is too small for an inset of {margin:g}")
        return Box(tuple(lower), tuple(upper))


@dataclass(frozen=True)
class Lattice:
    """Full regular grid with per-axis spacing, D in {1, 2}."""

    shape: tuple[int, ...]
    spacing: tuple[float, ...] | None = None
    origin: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        shape = tuple(int(n) for n in np.atleast_1d(self.shape))
        if len(shape) not in (1, 2):
            raise DataError(f"only 1D and 2D lattices are supported, got shape {shape}")
        if any(n < 1 for n in shape):
            raise DataError(f"lattice shape must be positive, got {shape}")
        spacing = (1.0,) * len(shape) if self.spacing is None else self.spacing
        origin = (0.0,) * len(shape) if self.origin is None else self.origin
        spacing = tuple(float(v) for v in np.atleast_1d(spacing))
        origin = tuple(float(v) for v in np.atleast_1d(origin))
        if len(spacing) != len(shape) or len(origin) != len(shape):
            raise DataError("spacing and origin must match the lattice dimension")
        if any(h <= 0 for h in spacing):
            raise DataError(f"lattice spacing must be positive, got {spacing}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def covering(cls, box: Box, margin: float, spacing: float = 1.0) -> "Lattice":
        """Smallest grid on multiples of `spacing` covering box grown by margin."""
        lower = np.floor((np.array(box.lower) - margin) / spacing) * spacing
        upper = np.ceil((np.array(box.upper) + margin) / spacing) * spacing
        shape = np.rint((upper - lower) / spacing).astype(int) + 1
        return cls(tuple(shape), (spacing,) * box.dim, tuple(lower))

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def axes(self) -> list[np.ndarray]:
        return [o + h * np.arange(n) for n, h, o in zip(self.shape, self.spacing, self.origin)]

    @cached_property
    def points(self) -> np.ndarray:
        """(size, D) coordinates in row-major order."""
        grids = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=-1)

    @property
    def hull(self) -> Box:
        upper = np.array(self.origin) + np.array(self.spacing) * (np.array(self.shape) - 1)
        return Box(self.origin, tuple(upper))

    def translated(self, shift: np.ndarray) -> "Lattice":
        origin = np.array(self.origin) + np.asarray(shift, dtype=float)
        return Lattice(self.shape, self.spacing, tuple(origin))


@dataclass(frozen=True, eq=False)
class LatticeSample:
    """Observed values X(l), one per lattice point."""

    lattice: Lattice
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.size != self.lattice.size:
            raise DataError(
                f"{values.size} values do not fit a lattice of {self.lattice.size} points"
            )
        if not np.all(np.isfinite(values)):
            raise DataError("lattice values must be finite")
        values = values.reshape(self.lattice.shape)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def translated(self, shift: np.ndarray) -> "LatticeSample":
        return LatticeSample(self.lattice.translated(shift), self.values)


def average_samples(samples: list[LatticeSample]) -> LatticeSample:
    """Pointwise average of samples sharing one lattice."""
    lattice = samples[0].lattice
    if any(sample.lattice != lattice for sample in samples):
        raise DataError("samples must share one lattice")
    return LatticeSample(lattice, np.mean([sample.values for sample in samples], axis=0))


class Kernel(Protocol):
    """A C^2 kernel with compact (truncated) support."""

    @property
    def radius(self) -> float: ...

    def evaluate(
        self, offsets: np.ndarray, order: int = 2
    ) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]: ...


@dataclass(frozen=True)
class GaussianKernel:
    """Unnormalized isotropic Gaussian K(x) = exp(-|x|^2 / (2 sigma^2)).

    `truncation` is the support radius in units of sigma.
    """

    fwhm: float
    truncation: float = 4.0

    def __post_init__(self) -> None:
        if not self.fwhm > 0:
            raise ConfigError(f"kernel FWHM must be positive, got {self.fwhm}")
        if not self.truncation > 0:
            raise ConfigError(f"kernel truncation must be positive, got {self.truncation}")

    @property
    def sigma(self) -> float:
        return self.fwhm * FWHM_TO_SIGMA

    @property
    def radius(self) -> float:
        return self.truncation * self.sigma

    def value(self, offsets: np.ndarray) -> np.ndarray:
        x = np.asarray(offsets, dtype=float)
        return np.exp(-np.sum(x * x, axis=-1) / (2.0 * self.sigma**2))

    def evaluate(
        self, offsets: np.ndarray, order: int = 2
    ) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
        """K, grad K and Hessian of K at each row of an (..., D) offset array."""
        x = np.asarray(offsets, dtype=float)
        s2 = self.sigma**2
        k = self.value(x)
        if order == 0:
            return k, None, None
        grad = -(x / s2) * k[..., None]
        outer = x[..., :, None] * x[..., None, :] / s2**2
        hess = (outer - np.eye(x.shape[-1]) / s2) * k[..., None, None]
        return k, grad, hess


@dataclass(frozen=True)
class FieldJet:
    """Value, gradient and Hessian of a field at a batch of locations.

    Leading axes index locations (and optionally subjects); gradient adds one
    trailing axis of length D and the Hessian two. Order-0 jets carry values only.
    """

    value: np.ndarray
    gradient: np.ndarray | None = None
    hessian: np.ndarray | None = None

    @property
    def order(self) -> int:
        return 0 if self.gradient is None else 2

    def take(self, index: int | slice | np.ndarray) -> "FieldJet":
        if self.gradient is None:
            return FieldJet(self.value[index])
        return FieldJet(self.value[index], self.gradient[index], self.hessian[index])

    def column(self, n: int) -> "FieldJet":
        """Subject n of a stacked (locations, subjects) jet."""
        if self.gradient is None:
            return FieldJet(self.value[:, n])
        return FieldJet(self.value[:, n], self.gradient[:, n], self.hessian[:, n])


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., :, None] * b[..., None, :]


def _align(jet: FieldJet, ndim: int) -> FieldJet:
    """Insert subject axes after the location axis so values have `ndim` axes."""
    extra = ndim - jet.value.ndim
    if extra <= 0:
        return jet
    m = jet.value.shape[0]
    pad = (1,) * extra
    value = jet.value.reshape(m, *pad, *jet.value.shape[1:])
    if jet.gradient is None:
        return FieldJet(value)
    gradient = jet.gradient.reshape(m, *pad, *jet.gradient.shape[1:])
    hessian = jet.hessian.reshape(m, *pad, *jet.hessian.shape[1:])
    return FieldJet(value, gradient, hessian)


def jet_add(a: FieldJet, b: FieldJet) -> FieldJet:
    ndim = max(a.value.ndim, b.value.ndim)
    a, b = _align(a, ndim), _align(b, ndim)
    if a.gradient is None or b.gradient is None:
        return FieldJet(a.value + b.value)
    return FieldJet(a.value + b.value, a.gradient + b.gradient, a.hessian + b.hessian)


def jet_product(a: FieldJet, b: FieldJet) -> FieldJet:
    """Jet of a*b by the product rule."""
    ndim = max(a.value.ndim, b.value.ndim)
    a, b = _align(a, ndim), _align(b, ndim)
    value = a.value * b.value
    if a.gradient is None or b.gradient is None:
        return FieldJet(value)
    av, bv = a.value[..., None], b.value[..., None]
    gradient = a.gradient * bv + av * b.gradient
    hessian = (
        a.hessian * bv[..., None]
        + _outer(a.gradient, b.gradient)
        + _outer(b.gradient, a.gradient)
        + av[..., None] * b.hessian
    )
    return FieldJet(value, gradient, hessian)


def jet_quotient(a: FieldJet, b: FieldJet) -> FieldJet:
    """Jet of a/b by the quotient rule, assembled symmetric."""
    ndim = max(a.value.ndim, b.value.ndim)
    a, b = _align(a, ndim), _align(b, ndim)
    value = a.value / b.value
    if a.gradient is None or b.gradient is None:
        return FieldJet(value)
    av, bv = a.value[..., None], b.value[..., None]
    gradient = a.gradient / bv - av * b.gradient / bv**2
    cross = _outer(a.gradient, b.gradient)
    hessian = (
        a.hessian / bv[..., None]
        - (cross + np.swapaxes(cross, -1, -2)) / bv[..., None] ** 2
        - av[..., None] * b.hessian / bv[..., None] ** 2
        + 2.0 * av[..., None] * _outer(b.gradient, b.gradient) / bv[..., None] ** 3
    )
    return FieldJet(value, gradient, hessian)


def jet_sqrt(a: FieldJet) -> FieldJet:
    root = np.sqrt(a.value)
    if a.gradient is None:
        return FieldJet(root)
    rv = root[..., None]
    gradient = a.gradient / (2.0 * rv)
    hessian = a.hessian / (2.0 * rv[..., None]) - _outer(a.gradient, a.gradient) / (
        4.0 * rv[..., None] ** 3
    )
    return FieldJet(root, gradient, hessian)


def jet_scale(a: FieldJet, factor: float) -> FieldJet:
    if a.gradient is None:
        return FieldJet(a.value * factor)
    return FieldJet(a.value * factor, a.gradient * factor, a.hessian * factor)


class AnalyticTerm(Protocol):
    """Closed-form C^2 function of location (signal offset or noise modulation)."""

    def jet(self, points: np.ndarray, order: int = 2) -> FieldJet: ...


@dataclass(frozen=True)
class KernelWeights:
    """Sparse kernel operators from lattice values to jets at fixed locations.

    value is K(s_m - l) as an (M, L) matrix; gradient[i] and hessian[i][j] hold the
    matching kernel derivatives, with hessian[i][j] and hessian[j][i] the same
    object. norm_jet is the jet of q(s) = sum_l K(s - l)^2.
    """

    value: sparse.csr_array
    gradient: tuple[sparse.csr_array, ...] | None
    hessian: tuple[tuple[sparse.csr_array, ...], ...] | None
    norm_jet: FieldJet

    @classmethod
    def build(
        cls, lattice: Lattice, kernel: Kernel, points: np.ndarray, order: int = 2
    ) -> "KernelWeights":
        pts = np.asarray(points, dtype=float)
        m, dim = pts.shape
        spacing = np.array(lattice.spacing)
        origin = np.array(lattice.origin)
        radius = kernel.radius

        stencil = _stencil(radius, spacing)
        base = np.floor((pts - origin) / spacing).astype(int)
        index = base[:, None, :] + stencil[None, :, :]
        valid = np.all((index >= 0) & (index < np.array(lattice.shape)), axis=-1)
        offsets = pts[:, None, :] - (origin + index * spacing)
        valid &= np.sum(offsets * offsets, axis=-1) <= radius * radius

        rows, cand = np.nonzero(valid)
        cols = np.ravel_multi_index(tuple(index[rows, cand].T), lattice.shape)
        k, dk, d2k = kernel.evaluate(offsets[rows, cand], order)

        def operator(data: np.ndarray) -> sparse.csr_array:
            return sparse.csr_array((data, (rows, cols)), shape=(m, lattice.size))

        def rowsum(data: np.ndarray) -> np.ndarray:
            return np.bincount(rows, weights=data, minlength=m)

        q = rowsum(k * k)
        if order == 0:
            return cls(operator(k), None, None, FieldJet(q))

        gradient = tuple(operator(dk[:, i]) for i in range(dim))
        hess_ops: dict[tuple[int, int], sparse.csr_array] = {}
        for i, j in itertools.combinations_with_replacement(range(dim), 2):
            hess_ops[(i, j)] = operator(d2k[:, i, j])
        hessian = tuple(
            tuple(hess_ops[min(i, j), max(i, j)] for j in range(dim)) for i in range(dim)
        )

        dq = np.stack([rowsum(2.0 * k * dk[:, i]) for i in range(dim)], axis=-1)
        d2q = np.empty((m, dim, dim))
        for i, j in itertools.combinations_with_replacement(range(dim), 2):
            entry = rowsum(2.0 * (dk[:, i] * dk[:, j] + k * d2k[:, i, j]))
            d2q[:, i, j] = entry
            d2q[:, j, i] = entry
        return cls(operator(k), gradient, hessian, FieldJet(q, dq, d2q))

    def apply(self, values: np.ndarray) -> FieldJet:
        """Jet of sum_l K(s - l) X(l) for X of shape (L,) or (L, N)."""
        value = self.value @ values
        if self.gradient is None:
            return FieldJet(value)
        gradient = np.stack([op @ values for op in self.gradient], axis=-1)
        hessian = np.stack(
            [np.stack([op @ values for op in row], axis=-1) for row in self.hessian], axis=-2
        )
        return FieldJet(value, gradient, hessian)


def _stencil(radius: float, spacing: np.ndarray) -> np.ndarray:
    reach = np.ceil(radius / spacing).astype(int)
    steps = [np.arange(-w, w + 2) for w in reach]
    return np.array(list(itertools.product(*steps)), dtype=int)


def as_points(points: np.ndarray | float, dim: int) -> np.ndarray:
    """Coerce a scalar, a D-vector or an (M, D) array to an (M, D) array."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts.reshape(-1, 1) if dim == 1 else pts.reshape(1, -1)
    if pts.ndim != 2 or pts.shape[1] != dim:
        raise DataError(f"expected locations of dimension {dim}, got array of shape {pts.shape}")
    return pts


def require_inside(domain: Box, points: np.ndarray) -> None:
    inside = domain.contains(points)
    if not np.all(inside):
        first = points[np.argmin(inside)]
        raise DomainError(
            f"{int(np.sum(~inside))} location(s) outside domain "
            f"{domain.lower}..{domain.upper}, e.g. {first.tolist()}"
        )


def convolution_jet(
    lattice: Lattice,
    kernel: Kernel,
    values: np.ndarray,
    points: np.ndarray,
    order: int = 2,
    standardize: bool = False,
    offset: AnalyticTerm | None = None,
    modulation: AnalyticTerm | None = None,
) -> FieldJet:
    """offset(s) + modulation(s) * Z(s), Z the (optionally standardized) kernel sum.

    Args:
        lattice: Lattice the values live on.
        kernel: Smoothing kernel.
        values: (L,) values, or (L, N) for N fields sharing everything else.
        points: (M, D) evaluation locations.
        order: 0 for values only, 2 for values, gradients and Hessians.
        standardize: Divide by the kernel-weight norm sqrt(sum_l K(s - l)^2).
        offset: Additive analytic term.
        modulation: Multiplicative analytic term.

    Returns:
        FieldJet with leading axes (M,) or (M, N).
    """
    columns = 1 if values.ndim == 1 else values.shape[1]
    stencil_size = len(_stencil(kernel.radius, np.array(lattice.spacing)))
    block = max(1, _BLOCK_ENTRIES // (stencil_size * max(columns, 4)))

    parts = []
    for start in range(0, max(len(points), 1), block):
        chunk = points[start : start + block]
        weights = KernelWeights.build(lattice, kernel, chunk, order)
        jet = weights.apply(values)
        if standardize:
            if np.any(weights.norm_jet.value <= 0):
                raise DataError("no lattice point lies within the kernel radius of a location")
            jet = jet_quotient(jet, jet_sqrt(weights.norm_jet))
        if modulation is not None:
            jet = jet_product(jet, modulation.jet(chunk, order))
        if offset is not None:
            jet = jet_add(jet, offset.jet(chunk, order))
        parts.append(jet)
    return _concatenate(parts)


def _concatenate(parts: list[FieldJet]) -> FieldJet:
    value = np.concatenate([p.value for p in parts])
    if parts[0].gradient is None:
        return FieldJet(value)
    return FieldJet(
        value,
        np.concatenate([p.gradient for p in parts]),
        np.concatenate([p.hessian for p in parts]),
    )


@runtime_checkable
class Field(Protocol):
    """A C^2 field on a box: anything peaks and regions can work with."""

    @property
    def domain(self) -> Box: ...

    @property
    def dim(self) -> int: ...

    @property
    def resolution(self) -> float: ...

    def jet(self, points: np.ndarray, order: int = 2) -> FieldJet: ...

    def eval(self, s: np.ndarray | float) -> float: ...

    def grad(self, s: np.ndarray | float) -> np.ndarray: ...

    def hessian(self, s: np.ndarray | float) -> np.ndarray: ...


class PointwiseMixin:
    """Single-location eval/grad/hessian on top of a batched `jet`."""

    def eval(self, s: np.ndarray | float) -> float:
        return float(self.jet(as_points(s, self.dim), order=0).value[0])

    def grad(self, s: np.ndarray | float) -> np.ndarray:
        return self.jet(as_points(s, self.dim)).gradient[0]

    def hessian(self, s: np.ndarray | float) -> np.ndarray:
        return self.jet(as_points(s, self.dim)).hessian[0]


@dataclass(frozen=True, eq=False)
class SmoothField(PointwiseMixin):
    """Convolution field of one lattice sample.

    The domain defaults to the lattice hull inset by the kernel radius; an explicit
    domain must keep that inset.
    """

    sample: LatticeSample
    kernel: Kernel
    domain: Box | None = None
    standardize: bool = False
    offset: AnalyticTerm | None = None
    modulation: AnalyticTerm | None = None

    def __post_init__(self) -> None:
        allowed = self.sample.lattice.hull.inset(self.kernel.radius)
        if self.domain is None:
            object.__setattr__(self, "domain", allowed)
            return
        if self.domain.dim != self.sample.lattice.dim:
            raise DataError("domain and lattice dimensions differ")
        lower_ok = np.all(np.array(self.domain.lower) >= np.array(allowed.lower) - DOMAIN_TOL)
        upper_ok = np.all(np.array(self.domain.upper) <= np.array(allowed.upper) + DOMAIN_TOL)
        if not (lower_ok and upper_ok):
            raise DomainError(
                f"domain {self.domain.lower}..{self.domain.upper} is closer than the kernel "
                f"radius {self.kernel.radius:g} to the lattice hull"
            )

    @property
    def lattice(self) -> Lattice:
        return self.sample.lattice

    @property
    def dim(self) -> int:
        return self.lattice.dim

    @property
    def resolution(self) -> float:
        return min(self.lattice.spacing)

    def jet(self, points: np.ndarray, order: int = 2) -> FieldJet:
        pts = as_points(points, self.dim)
        require_inside(self.domain, pts)
        return convolution_jet(
            self.lattice,
            self.kernel,
            self.sample.flat,
            pts,
            order,
            self.standardize,
            self.offset,
            self.modulation,
        )

    def shares_operators_with(self, other: "SmoothField") -> bool:
        """True if both fields differ only in their lattice values."""
        return (
            self.lattice == other.lattice
            and self.kernel == other.kernel
            and self.domain == other.domain
            and self.standardize == other.standardize
            and self.offset is other.offset
            and self.modulation is other.modulation
        )
