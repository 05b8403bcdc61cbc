import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from gsgen import checkpoint


@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(width=32, allow_nan=True, allow_infinity=True)),
       arrays(np.int64, array_shapes(max_dims=2, max_side=6)), st.text(max_size=50))
def test_sections_round_trip_bit_exact(f, i, text):
    data = checkpoint.dump_sections({"f": f, "i": i, "t": text})
    back = checkpoint.load_sections(data)
    assert back["f"].tobytes() == f.tobytes() and back["f"].shape == f.shape
    np.testing.assert_array_equal(back["i"], i)
    assert back["t"] == text
    assert checkpoint.dump_sections(back) == data


def test_header_layout():
    data = checkpoint.dump_sections({"x": np.ones(3, np.float32)})
    assert data[:8] == b"GSGENCKP"
    assert int.from_bytes(data[8:12], "little") == checkpoint.VERSION
    assert int.from_bytes(data[12:16], "little") == 1
    assert data[-12:] == np.ones(3, "<f4").tobytes()


def test_rejects_foreign_and_future_files(tmp_path):
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_sections(b"PK\x03\x04" + bytes(20))
    data = bytearray(checkpoint.dump_sections({}))
    data[8] = 99
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_sections(bytes(data))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.dump_sections({"x" * 40: np.zeros(1)})


def test_atomic_save(tmp_path):
    checkpoint.save(tmp_path / "a.gsck", {"x": np.arange(4)})
    assert list(tmp_path.iterdir()) == [tmp_path / "a.gsck"]
    np.testing.assert_array_equal(checkpoint.load(tmp_path / "a.gsck")["x"], np.arange(4))
