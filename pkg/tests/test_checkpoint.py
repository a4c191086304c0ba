import struct

import numpy as np
import pytest

from vita.checkpoint import (FormatError, VersionError, load_tensors,
                             save_tensors, MAGIC)


def test_round_trip(tmp_path):
    path = tmp_path / "w.vitc"
    arrays = {
        "a.w": np.arange(6, dtype=np.float64).reshape(2, 3),
        "b": np.array([1.5, -2.25]),
    }
    save_tensors(path, arrays, meta=b"hello")
    loaded, meta = load_tensors(path)
    assert meta == b"hello"
    assert list(loaded) == ["a.w", "b"]
    for k in arrays:
        np.testing.assert_allclose(loaded[k], arrays[k], rtol=1e-6)


def test_f32_round_trip_precision(tmp_path):
    path = tmp_path / "w.vitc"
    x = np.random.default_rng(0).normal(size=(4, 4))
    save_tensors(path, {"x": x})
    loaded, _ = load_tensors(path)
    assert np.abs(loaded["x"] - x).max() < 1e-6


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.vitc"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError):
        load_tensors(path)


def test_bad_version(tmp_path):
    path = tmp_path / "bad.vitc"
    path.write_bytes(MAGIC + struct.pack("<II", 99, 0))
    with pytest.raises(VersionError):
        load_tensors(path)


def test_truncated(tmp_path):
    path = tmp_path / "full.vitc"
    save_tensors(path, {"x": np.zeros((8, 8))})
    raw = path.read_bytes()
    trunc = tmp_path / "trunc.vitc"
    trunc.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        load_tensors(trunc)
