"""Reading and writing lattice samples, time series and reports.

Lattice samples travel as CSV (1D: one value per row; 2D: a dense row-major
matrix) or as a PKCR container holding any number of samples on one lattice:

    magic   b"PKCR"
    version u32 (= 1)
    dim     u32 (D)
    count   u32 (number of samples)
    shape   u32 x D
    spacing f64 x D
    origin  f64 x D
    payload f64 x (count * prod(shape)), row-major per sample

All integers and floats are little-endian.
"""

import json
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from peakcr.exceptions import ContainerFormatError, DataError
from peakcr.grid_field import Lattice, LatticeSample
from peakcr.logging_config import get_logger

logger = get_logger("storage")

MAGIC = b"PKCR"
CONTAINER_VERSION = 1
_U32 = np.dtype("<u4")
_F64 = np.dtype("<f8")


def write_container(path: Path, samples: list[LatticeSample]) -> None:
    """Write samples sharing one lattice to a PKCR container."""
    if not samples:
        raise DataError("nothing to write: no samples")
    lattice = samples[0].lattice
    if any(sample.lattice != lattice for sample in samples):
        raise DataError("all samples in a container must share one lattice")

    header = np.array([CONTAINER_VERSION, lattice.dim, len(samples), *lattice.shape], dtype=_U32)
    geometry = np.array([*lattice.spacing, *lattice.origin], dtype=_F64)
    payload = np.stack([sample.flat for sample in samples]).astype(_F64)

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(header.tobytes())
        f.write(geometry.tobytes())
        f.write(payload.tobytes())
    logger.info(f"Wrote {len(samples)} samples on lattice {lattice.shape} to {path}")


def read_container(path: Path) -> list[LatticeSample]:
    """Read every sample from a PKCR container.

    Raises:
        ContainerFormatError: If the magic, version or sizes don't check out.
    """
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ContainerFormatError(f"{path}: not a PKCR container")

    cursor = 4
    if len(data) < cursor + 3 * _U32.itemsize:
        raise ContainerFormatError(f"{path}: truncated header")
    head = np.frombuffer(data, dtype=_U32, count=3, offset=cursor)
    version, dim, count = (int(v) for v in head)
    if version != CONTAINER_VERSION:
        raise ContainerFormatError(f"{path}: unsupported container version {version}")
    if dim not in (1, 2):
        raise ContainerFormatError(f"{path}: unsupported dimension {dim}")
    cursor += 3 * _U32.itemsize

    try:
        shape = tuple(int(n) for n in np.frombuffer(data, _U32, count=dim, offset=cursor))
        cursor += dim * _U32.itemsize
        geometry = np.frombuffer(data, _F64, count=2 * dim, offset=cursor)
        cursor += 2 * dim * _F64.itemsize
    except ValueError as e:
        raise ContainerFormatError(f"{path}: truncated header") from e

    lattice = Lattice(shape, tuple(geometry[:dim]), tuple(geometry[dim:]))
    expected = count * lattice.size * _F64.itemsize
    if len(data) - cursor != expected:
        raise ContainerFormatError(
            f"{path}: payload holds {len(data) - cursor} bytes, expected {expected}"
        )
    payload = np.frombuffer(data, _F64, offset=cursor).reshape(count, lattice.size)
    return [LatticeSample(lattice, row) for row in payload]


def read_lattice_csv(path: Path, dim: int = 1) -> LatticeSample:
    """Read a unit-spaced lattice sample from CSV."""
    frame = pd.read_csv(path, header=None)
    try:
        values = frame.to_numpy(dtype=float)
    except ValueError as e:
        raise DataError(f"{path}: non-numeric lattice values") from e
    if dim == 1:
        if values.shape[1] != 1:
            raise DataError(f"{path}: a 1D lattice needs one value per row")
        values = values[:, 0]
    return LatticeSample(Lattice(values.shape), values)


def write_lattice_csv(sample: LatticeSample, path: Path) -> None:
    values = sample.values if sample.lattice.dim == 2 else sample.values[:, None]
    pd.DataFrame(values).to_csv(path, header=False, index=False)


def load_samples(path: Path, dim: int = 1) -> list[LatticeSample]:
    """Samples from a PKCR container, or a single sample from CSV."""
    if Path(path).suffix.lower() == ".csv":
        return [read_lattice_csv(path, dim)]
    return read_container(path)


def read_series_csv(path: Path) -> np.ndarray:
    """Time series as a (subjects, samples) array, one CSV column per subject."""
    frame = pd.read_csv(path)
    if frame.isna().any().any():
        raise DataError(f"{path}: time series contain missing values")
    try:
        return frame.to_numpy(dtype=float).T
    except ValueError as e:
        raise DataError(f"{path}: non-numeric time series") from e


def write_series_csv(series: np.ndarray, path: Path) -> None:
    columns = [f"subject_{n}" for n in range(series.shape[0])]
    pd.DataFrame(series.T, columns=columns).to_csv(path, index=False)


def write_mask_csv(mask: np.ndarray, path: Path) -> None:
    """Boolean mask as 0/1 CSV (one row for 1D)."""
    pd.DataFrame(np.atleast_2d(mask).astype(int)).to_csv(path, header=False, index=False)


def write_records_csv(records: list[dict[str, Any]], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame.from_records(records).to_csv(path, index=False)


def dump_json(payload: Any) -> str:
    """Canonical JSON text (sorted keys) so repeated runs are byte-identical."""
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_json(payload: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(payload))
