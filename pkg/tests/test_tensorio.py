"""SATN tensor file format tests."""

import struct

import numpy as np
import pytest

from sparseattn.tensorio import FORMAT_VERSION, TensorFormatError, read_tensor, write_tensor


def test_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(80)
    arr = rng.uniform(-1, 1, (3, 5, 7)).astype(np.float32)
    path = tmp_path / "t.satn"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, arr)
    assert back.tobytes() == arr.tobytes()


def test_rank_two_and_float64_input(tmp_path):
    arr = np.arange(6, dtype=np.float64).reshape(2, 3)
    path = tmp_path / "t.satn"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.shape == (2, 3)
    np.testing.assert_array_equal(back, arr.astype(np.float32))


def test_wrong_magic(tmp_path):
    path = tmp_path / "bad.satn"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(TensorFormatError, match="not a SATN tensor file"):
        read_tensor(path)


def test_wrong_version(tmp_path):
    path = tmp_path / "bad.satn"
    path.write_bytes(b"SATN" + struct.pack("<HH", FORMAT_VERSION + 1, 1) + struct.pack("<Q", 0))
    with pytest.raises(TensorFormatError, match="version"):
        read_tensor(path)


def test_truncated_payload_names_byte_counts(tmp_path):
    arr = np.ones((4, 4), dtype=np.float32)
    path = tmp_path / "t.satn"
    write_tensor(path, arr)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(TensorFormatError) as exc:
        read_tensor(path)
    assert f"expected {len(data)} bytes" in str(exc.value)
    assert f"got {len(data) - 8}" in str(exc.value)


def test_truncated_header(tmp_path):
    path = tmp_path / "t.satn"
    path.write_bytes(b"SATN\x01")
    with pytest.raises(TensorFormatError, match="truncated header"):
        read_tensor(path)


def test_truncated_dims(tmp_path):
    path = tmp_path / "t.satn"
    path.write_bytes(b"SATN" + struct.pack("<HH", FORMAT_VERSION, 3) + b"\x00" * 4)
    with pytest.raises(TensorFormatError, match="truncated dims"):
        read_tensor(path)


def test_implausible_dims(tmp_path):
    path = tmp_path / "t.satn"
    path.write_bytes(
        b"SATN" + struct.pack("<HH", FORMAT_VERSION, 1) + struct.pack("<Q", 1 << 60)
    )
    with pytest.raises(TensorFormatError, match="implausible"):
        read_tensor(path)


def test_error_carries_offset(tmp_path):
    path = tmp_path / "bad.satn"
    path.write_bytes(b"XXXX")
    with pytest.raises(TensorFormatError) as exc:
        read_tensor(path)
    assert exc.value.offset == 0
    assert "byte 0" in str(exc.value)
