import struct

import numpy as np
import pytest

from cvp.tensorfile import TensorFormatError, decode_tensor, encode_tensor, read_tensor, write_tensor


@pytest.mark.parametrize("dtype,code", [(np.float32, 1), (np.float64, 2)])
def test_header_layout(dtype, code):
    arr = np.arange(6, dtype=dtype).reshape(2, 3)
    data = encode_tensor(arr)
    assert data[:4] == b"CVPT"
    assert struct.unpack_from("<IBB", data, 4) == (1, code, 2)
    assert struct.unpack_from("<2Q", data, 10) == (2, 3)
    assert data[26:] == arr.astype(np.dtype(dtype).newbyteorder("<")).tobytes()


def test_round_trip_preserves_dtype_and_values(tmp_path, rng):
    for dtype in (np.float32, np.float64):
        arr = rng.standard_normal((3, 4, 5)).astype(dtype)
        write_tensor(tmp_path / "t.cvpt", arr)
        back = read_tensor(tmp_path / "t.cvpt")
        assert back.dtype == dtype
        assert np.array_equal(back, arr)


def test_zero_sized_tensor():
    arr = np.zeros((0, 3))
    assert decode_tensor(encode_tensor(arr)).shape == (0, 3)


def test_bad_magic():
    data = bytearray(encode_tensor(np.zeros(2)))
    data[:4] = b"NOPE"
    with pytest.raises(TensorFormatError, match="magic"):
        decode_tensor(bytes(data))


def test_unknown_dtype_code():
    data = bytearray(encode_tensor(np.zeros(2)))
    data[8] = 7
    with pytest.raises(TensorFormatError, match="dtype"):
        decode_tensor(bytes(data))


def test_truncated_payload():
    with pytest.raises(TensorFormatError, match="payload"):
        decode_tensor(encode_tensor(np.zeros((2, 2)))[:-1])


def test_integer_arrays_rejected():
    with pytest.raises(TensorFormatError):
        encode_tensor(np.zeros(3, dtype=np.int32))


def test_expected_ndim(tmp_path):
    write_tensor(tmp_path / "t.cvpt", np.zeros((2, 2)))
    with pytest.raises(TensorFormatError, match="ndim"):
        read_tensor(tmp_path / "t.cvpt", expected_ndim=3)
