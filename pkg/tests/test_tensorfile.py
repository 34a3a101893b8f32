import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sefvc.exceptions import TensorFileError
from sefvc.tensorfile import from_bytes, pack_tensors, read_tensor, to_bytes, unpack_tensors, write_tensor


def test_header_and_payload_layout():
    blob = to_bytes(np.arange(6, dtype=np.float32).reshape(2, 3), {"hop_ms": 20})
    header, payload = blob.split(b"\n", 1)
    assert json.loads(header) == {"dtype": "f32", "meta": {"hop_ms": 20}, "shape": [2, 3]}
    assert len(payload) == 4 * 6
    assert np.frombuffer(payload, "<f4").tolist() == [0, 1, 2, 3, 4, 5]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 5), st.integers(1, 7)), elements=st.floats(-1e6, 1e6, width=32)))
def test_write_read_write_is_byte_identical(values):
    blob = to_bytes(values, {"k": 3, "name": "x"})
    tf = from_bytes(blob)
    assert to_bytes(tf.values, tf.meta) == blob
    np.testing.assert_array_equal(tf.values, values)


def test_file_round_trip(tmp_path):
    x = np.random.default_rng(0).standard_normal((4, 5)).astype(np.float32)
    write_tensor(tmp_path / "a.tensor", x, {"a": 1})
    first = (tmp_path / "a.tensor").read_bytes()
    tf = read_tensor(tmp_path / "a.tensor")
    write_tensor(tmp_path / "b.tensor", tf.values, tf.meta)
    assert (tmp_path / "b.tensor").read_bytes() == first


@pytest.mark.parametrize(
    "blob",
    [b"no newline", b'{"dtype": "f64", "shape": [1], "meta": {}}\n\x00\x00\x00\x00\x00\x00\x00\x00',
     b'{"dtype": "f32", "shape": [2], "meta": {}}\n\x00\x00\x00\x00', b"{not json\n"],
)
def test_corrupt_inputs_rejected(blob):
    with pytest.raises(TensorFileError):
        from_bytes(blob)


def test_missing_file(tmp_path):
    with pytest.raises(TensorFileError):
        read_tensor(tmp_path / "nope.tensor")


def test_pack_unpack():
    tensors = {"b": np.ones((2, 2)), "a": np.arange(3.0), "s": np.array(5.0)}
    tf = from_bytes(pack_tensors(tensors, {"step": 7}))
    out = unpack_tensors(tf)
    assert tf.meta["step"] == 7
    for k, v in tensors.items():
        np.testing.assert_array_equal(out[k], v)
        assert out[k].shape == np.shape(v)
