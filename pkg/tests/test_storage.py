"""Tests for containers, CSV files and JSON reports."""

from pathlib import Path

import numpy as np
import pytest

from peakcr.exceptions import ContainerFormatError, DataError
from peakcr.grid_field import Lattice, LatticeSample
from peakcr.storage import (
    MAGIC,
    dump_json,
    load_samples,
    read_container,
    read_lattice_csv,
    read_series_csv,
    write_container,
    write_lattice_csv,
    write_mask_csv,
    write_series_csv,
)


def make_samples(count: int, lattice: Lattice) -> list[LatticeSample]:
    rng = np.random.default_rng(0)
    return [LatticeSample(lattice, rng.standard_normal(lattice.size)) for _ in range(count)]


class TestContainer:
    """Tests for the PKCR container."""

    def test_write_read(self, tmp_path: Path) -> None:
        lattice = Lattice((4, 5), (0.5, 2.0), (-1.0, 3.0))
        samples = make_samples(3, lattice)
        path = tmp_path / "cohort.pkcr"
        write_container(path, samples)

        loaded = read_container(path)
        assert len(loaded) == 3
        assert loaded[0].lattice == lattice
        for original, copy in zip(samples, loaded, strict=True):
            np.testing.assert_array_equal(original.values, copy.values)

    def test_header_layout(self, tmp_path: Path) -> None:
        path = tmp_path / "cohort.pkcr"
        write_container(path, make_samples(2, Lattice((6,))))
        data = path.read_bytes()
        assert data[:4] == MAGIC
        assert np.frombuffer(data, "<u4", count=4, offset=4).tolist() == [1, 1, 2, 6]
        assert len(data) == 4 + 4 * 4 + 2 * 8 + 2 * 6 * 8

    def test_bad_magic(self, tmp_path: Path) -> None:
        path = tmp_path / "bad.pkcr"
        path.write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(ContainerFormatError):
            read_container(path)

    def test_truncated_payload(self, tmp_path: Path) -> None:
        path = tmp_path / "cohort.pkcr"
        write_container(path, make_samples(2, Lattice((6,))))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ContainerFormatError):
            read_container(path)

    def test_unsupported_version(self, tmp_path: Path) -> None:
        path = tmp_path / "cohort.pkcr"
        write_container(path, make_samples(1, Lattice((3,))))
        data = bytearray(path.read_bytes())
        data[4:8] = np.array([9], dtype="<u4").tobytes()
        path.write_bytes(bytes(data))
        with pytest.raises(ContainerFormatError, match="version"):
            read_container(path)

    def test_mixed_lattices_rejected(self, tmp_path: Path) -> None:
        samples = make_samples(1, Lattice((3,))) + make_samples(1, Lattice((4,)))
        with pytest.raises(DataError):
            write_container(tmp_path / "mixed.pkcr", samples)

    def test_empty_rejected(self, tmp_path: Path) -> None:
        with pytest.raises(DataError):
            write_container(tmp_path / "empty.pkcr", [])


class TestLatticeCsv:
    """Tests for CSV lattice samples."""

    def test_one_dimensional(self, tmp_path: Path) -> None:
        sample = make_samples(1, Lattice((7,)))[0]
        path = tmp_path / "sample.csv"
        write_lattice_csv(sample, path)
        loaded = read_lattice_csv(path)
        assert loaded.lattice == Lattice((7,))
        np.testing.assert_allclose(loaded.values, sample.values, rtol=1e-15)

    def test_two_dimensional(self, tmp_path: Path) -> None:
        sample = make_samples(1, Lattice((3, 4)))[0]
        path = tmp_path / "sample.csv"
        write_lattice_csv(sample, path)
        loaded = read_lattice_csv(path, dim=2)
        assert loaded.values.shape == (3, 4)
        np.testing.assert_allclose(loaded.values, sample.values, rtol=1e-15)

    def test_one_dimensional_needs_one_column(self, tmp_path: Path) -> None:
        path = tmp_path / "wide.csv"
        path.write_text("1,2\n3,4\n")
        with pytest.raises(DataError):
            read_lattice_csv(path, dim=1)

    def test_non_numeric(self, tmp_path: Path) -> None:
        path = tmp_path / "text.csv"
        path.write_text("1\nabc\n")
        with pytest.raises(DataError):
            read_lattice_csv(path)

    def test_load_samples_dispatch(self, tmp_path: Path) -> None:
        csv_path = tmp_path / "one.csv"
        csv_path.write_text("1.0\n2.0\n3.0\n")
        assert len(load_samples(csv_path)) == 1

        container = tmp_path / "many.pkcr"
        write_container(container, make_samples(4, Lattice((3,))))
        assert len(load_samples(container)) == 4


class TestSeriesAndReports:
    """Tests for time series, masks and JSON output."""

    def test_series_round_trip(self, tmp_path: Path) -> None:
        series = np.random.default_rng(3).standard_normal((3, 50))
        path = tmp_path / "series.csv"
        write_series_csv(series, path)
        np.testing.assert_allclose(read_series_csv(path), series, rtol=1e-15)

    def test_series_missing_values(self, tmp_path: Path) -> None:
        path = tmp_path / "series.csv"
        path.write_text("a,b\n1.0,2.0\n3.0,\n")
        with pytest.raises(DataError):
            read_series_csv(path)

    def test_mask_csv(self, tmp_path: Path) -> None:
        path = tmp_path / "mask.csv"
        write_mask_csv(np.array([True, False, True]), path)
        assert path.read_text() == "1,0,1\n"

    def test_dump_json_is_canonical(self) -> None:
        assert dump_json({"b": 1, "a": [1.5]}) == dump_json({"a": [1.5], "b": 1})
        assert dump_json({"b": 1, "a": 2}).index('"a"') < dump_json({"b": 1, "a": 2}).index('"b"')
