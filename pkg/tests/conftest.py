"""Pytest configuration and fixtures."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from peakcr.config import (  # noqa: E402
    BoxSpec,
    GaussBumps2DSignal,
    NoiseSpec,
    QuadraticSignal,
    SignalSpec,
)
from peakcr.grid_field import (  # noqa: E402
    GaussianKernel,
    Lattice,
    LatticeSample,
    SmoothField,
)


@pytest.fixture
def quadratic_signal() -> SignalSpec:
    """1D quadratic peak at 15 on [0, 30]."""
    return SignalSpec(
        shape=QuadraticSignal(theta=[15.0], curvature=0.01),
        domain=BoxSpec(lower=[0.0], upper=[30.0]),
    )


@pytest.fixture
def bumps_signal() -> SignalSpec:
    """Two well separated 2D bumps on [0, 30]^2."""
    return SignalSpec(
        shape=GaussBumps2DSignal(
            centers=[[9.0, 9.0], [21.0, 21.0]], widths=[3.0, 3.0], amplitudes=[2.0, 2.0]
        ),
        domain=BoxSpec(lower=[0.0, 0.0], upper=[30.0, 30.0]),
    )


@pytest.fixture
def noise() -> NoiseSpec:
    return NoiseSpec(fwhm=4.0, seed=3)


@pytest.fixture
def wide_kernel() -> GaussianKernel:
    """Kernel truncated far out, so the truncation jump is below rounding."""
    return GaussianKernel(4.0, truncation=8.0)


@pytest.fixture
def field_1d(wide_kernel: GaussianKernel) -> SmoothField:
    rng = np.random.default_rng(11)
    sample = LatticeSample(Lattice((60,)), rng.standard_normal(60))
    return SmoothField(sample, wide_kernel)


@pytest.fixture
def field_2d(wide_kernel: GaussianKernel) -> SmoothField:
    rng = np.random.default_rng(12)
    sample = LatticeSample(Lattice((40, 40)), rng.standard_normal(1600))
    return SmoothField(sample, wide_kernel, standardize=True)
