"""Tests for fields.py module."""

import json
from pathlib import Path

import numpy as np
import pytest

from dsre.fields import (
    FORMAT_VERSION,
    FieldDump,
    content_hash,
    file_hash,
    read_field_dump,
    write_field_dump,
)


@pytest.fixture
def dump() -> FieldDump:
    rng = np.random.default_rng(0)
    return FieldDump(
        d=2,
        N=4,
        components={"a": rng.normal(size=(4, 4)), "b": np.arange(16.0).reshape(4, 4)},
        metadata={"seed": 3},
    )


class TestWriteFieldDump:
    """Tests for writing field dumps."""

    def test_writes_raw_and_sidecar(self, tmp_path: Path, dump: FieldDump):
        """Should write little-endian f64 data plus a JSON sidecar."""
        raw, side = write_field_dump(dump, tmp_path / "fields")
        assert raw.name == "fields.f64"
        assert raw.stat().st_size == 2 * 16 * 8
        meta = json.loads(side.read_text())
        assert meta["format_version"] == FORMAT_VERSION
        assert meta["components"] == ["a", "b"]
        assert meta["dtype"] == "f64le"
        assert meta["seed"] == 3

    def test_rejects_wrong_shape(self, tmp_path: Path):
        """Should refuse components that are not (N,)*d."""
        bad = FieldDump(d=2, N=4, components={"a": np.zeros((4, 5))})
        with pytest.raises(ValueError, match="shape"):
            write_field_dump(bad, tmp_path / "bad")


class TestReadFieldDump:
    """Tests for reading field dumps."""

    def test_restores_values_bit_for_bit(self, tmp_path: Path, dump: FieldDump):
        """Should return the stored components unchanged."""
        write_field_dump(dump, tmp_path / "fields")
        loaded = read_field_dump(tmp_path / "fields")
        assert (loaded.d, loaded.N) == (2, 4)
        assert loaded.metadata == {"seed": 3}
        for name, values in dump.components.items():
            np.testing.assert_array_equal(loaded.components[name], values)

    def test_missing_sidecar(self, tmp_path: Path):
        """Should raise FileNotFoundError without a sidecar."""
        with pytest.raises(FileNotFoundError):
            read_field_dump(tmp_path / "absent")

    def test_rejects_other_format_version(self, tmp_path: Path, dump: FieldDump):
        """Should refuse sidecars of another format version."""
        _, side = write_field_dump(dump, tmp_path / "fields")
        meta = json.loads(side.read_text())
        meta["format_version"] = FORMAT_VERSION + 1
        side.write_text(json.dumps(meta))
        with pytest.raises(ValueError, match="format_version"):
            read_field_dump(tmp_path / "fields")

    def test_rejects_truncated_data(self, tmp_path: Path, dump: FieldDump):
        """Should detect a raw file with the wrong number of values."""
        raw, _ = write_field_dump(dump, tmp_path / "fields")
        raw.write_bytes(raw.read_bytes()[:-8])
        with pytest.raises(ValueError, match="expected"):
            read_field_dump(tmp_path / "fields")


class TestHashes:
    """Tests for content and file hashes."""

    def test_content_hash_is_deterministic(self):
        """Should hash equal arrays and tags equally."""
        a = np.arange(6.0)
        assert content_hash(a, extra="x") == content_hash(a.copy(), extra="x")
        assert content_hash(a, extra="x") != content_hash(a, extra="y")
        assert content_hash(a) != content_hash(a + 1)

    def test_file_hash(self, tmp_path: Path):
        """Should return the sha256 of the file contents."""
        path = tmp_path / "f.txt"
        path.write_bytes(b"abc")
        expected = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        assert file_hash(path) == expected
