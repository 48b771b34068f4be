import json
import struct

import numpy as np
import pytest

from birkhoff.errors import RejectedInputError
from birkhoff.safetensors_io import TensorData, emit_safetensors, ingest_safetensors


def raw_file(path, header: dict, payload: bytes):
    raw = json.dumps(header).encode()
    path.write_bytes(struct.pack("<Q", len(raw)) + raw + payload)
    return path


def test_constructed_header_parses(tmp_path):
    values = np.arange(4, dtype="<f4")
    f = raw_file(tmp_path / "a.safetensors",
                 {"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}},
                 values.tobytes())
    tensors = ingest_safetensors(f)
    assert list(tensors) == ["w"]
    np.testing.assert_array_equal(tensors["w"].array(), values.reshape(2, 2))


def test_round_trip_bit_identical(tmp_path, rng):
    tensors = {
        "a.weight": rng.normal(size=(5, 7)).astype(np.float32),
        "a.bias": rng.normal(size=7).astype(np.float16),
        "steps": np.arange(3, dtype=np.int64),
    }
    f = tmp_path / "m.safetensors"
    emit_safetensors(tensors, f, metadata={"format": "pt"})
    loaded, meta = ingest_safetensors(f, with_metadata=True)
    assert meta == {"format": "pt"}
    assert list(loaded) == list(tensors)
    for name, arr in tensors.items():
        assert loaded[name].data == arr.tobytes()
        assert loaded[name].array().dtype == arr.dtype
    f2 = tmp_path / "m2.safetensors"
    emit_safetensors(loaded, f2, metadata=meta)
    assert f2.read_bytes() == f.read_bytes()


def test_opaque_dtype_kept_as_bytes(tmp_path):
    payload = bytes(range(8))
    f = raw_file(tmp_path / "b.safetensors",
                 {"x": {"dtype": "BF16", "shape": [4], "data_offsets": [0, 8]}}, payload)
    td = ingest_safetensors(f)["x"]
    assert not td.supported
    assert td.data == payload
    with pytest.raises(RejectedInputError):
        td.array()


@pytest.mark.parametrize("header,payload", [
    ({"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
      "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]}}, bytes(12)),
    ({"a": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}, bytes(8)),
    ({"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, bytes(4)),
    ({"a": {"dtype": "F32", "shape": [2]}}, bytes(8)),
    ({"a": {"dtype": "F32", "shape": [-2], "data_offsets": [0, 8]}}, bytes(8)),
])
def test_invalid_headers_rejected(tmp_path, header, payload):
    with pytest.raises(RejectedInputError):
        ingest_safetensors(raw_file(tmp_path / "bad.safetensors", header, payload))


def test_malformed_json_rejected(tmp_path):
    f = tmp_path / "bad.safetensors"
    f.write_bytes(struct.pack("<Q", 5) + b"{nope")
    with pytest.raises(RejectedInputError):
        ingest_safetensors(f)


def test_header_length_past_eof(tmp_path):
    f = tmp_path / "bad.safetensors"
    f.write_bytes(struct.pack("<Q", 1000) + b"{}")
    with pytest.raises(RejectedInputError):
        ingest_safetensors(f)


def test_interop_with_reference_library(tmp_path, rng):
    st_numpy = pytest.importorskip("safetensors.numpy")
    tensors = {"w": rng.normal(size=(3, 4)).astype(np.float32),
               "h": rng.normal(size=(6,)).astype(np.float16)}
    theirs = tmp_path / "theirs.safetensors"
    st_numpy.save_file(tensors, str(theirs))
    loaded = ingest_safetensors(theirs)
    for name, arr in tensors.items():
        np.testing.assert_array_equal(loaded[name].array(), arr)
    ours = tmp_path / "ours.safetensors"
    emit_safetensors(loaded, ours)
    back = st_numpy.load_file(str(ours))
    for name, arr in tensors.items():
        assert back[name].tobytes() == arr.tobytes()


def test_from_array_dtype_names():
    assert TensorData.from_array(np.zeros(2, np.float32)).dtype == "F32"
    assert TensorData.from_array(np.zeros(2, np.float16)).dtype == "F16"
    assert TensorData.from_array(np.zeros(2, np.uint8)).dtype == "U8"
    assert TensorData.from_array(np.zeros(2, bool)).dtype == "BOOL"
