import json
import struct

import numpy as np
import pytest

from birkhoff import codec
from birkhoff.container import (
    AUX_RECORD_SIZE,
    EligibilityPolicy,
    EntryKind,
    TensorEntry,
    aux_from_bytes,
    aux_to_bytes,
    eligibility,
    read_container,
    write_container,
)
from birkhoff.errors import CorruptDataError
from birkhoff.packing import packed_size


def compressed_entry(name, W, U=1600, M=3, l=0.1):
    aux = codec.make_aux(W, l, U, M)
    cm = codec.encode_tensor(W, aux)
    err = codec.mae(W, codec.decode_tensor(cm, aux, W.shape))
    return TensorEntry.compressed(name, W.shape, "F32", cm, aux, mae=err), cm, aux


def test_empty_container(tmp_path):
    f = tmp_path / "empty.bhc"
    written = write_container([], f)
    back = read_container(f)
    assert back.entries == []
    assert back.stored_bytes == f.stat().st_size == written.stored_bytes
    assert back.original_bytes == 0


def test_compressed_round_trip(tmp_path, rng):
    W = rng.normal(0, 0.02, size=(64, 64))
    entry, cm, aux = compressed_entry("layer.weight", W)
    f = tmp_path / "one.bhc"
    write_container([entry], f)
    back = read_container(f)["layer.weight"]
    assert back.kind is EntryKind.COMPRESSED
    assert back.aux == aux
    assert back.shape == (64, 64)
    assert back.mae == entry.mae
    np.testing.assert_array_equal(back.code_matrix().codes, cm.codes)


def test_mixed_round_trip_and_alignment(tmp_path, rng):
    W = rng.normal(0, 0.02, size=(33, 17))
    entry, cm, _ = compressed_entry("odd", W, U=400, M=2)
    bias = rng.normal(size=17).astype(np.float32)
    pt = TensorEntry.passthrough("bias", (17,), "F32", bias.tobytes())
    f = tmp_path / "mix.bhc"
    write_container([pt, entry], f)
    back = read_container(f)
    assert back.names() == ["bias", "odd"]
    assert back["bias"].payload == bias.tobytes()
    assert back["odd"].pad_applied
    np.testing.assert_array_equal(back["odd"].code_matrix().codes, cm.codes)
    blob = f.read_bytes()
    _, _, mlen = struct.unpack_from("<4sIQ", blob)
    assert (16 + mlen) % 64 == 0
    assert all(rec["offset"] % 64 == 0 for rec in back.manifest["entries"])


def test_size_arithmetic(rng):
    K, N = 48, 80
    entry, _, aux = compressed_entry("w", rng.normal(0, 0.02, size=(K, N)))
    b = aux.bit_width
    assert entry.stored_bytes == AUX_RECORD_SIZE + packed_size(K * N // 2, b)
    assert AUX_RECORD_SIZE < 128
    assert entry.stored_bytes == pytest.approx(K * N * b / 16, abs=128)


def test_totals_are_whole_file(tmp_path, rng):
    entries = [compressed_entry(f"w{i}", rng.normal(0, 0.02, size=(64, 128)))[0] for i in range(3)]
    entries.append(TensorEntry.passthrough("b", (128,), "F32", bytes(512)))
    f = tmp_path / "t.bhc"
    c = write_container(entries, f)
    assert c.stored_bytes == f.stat().st_size
    assert c.original_bytes == 3 * 64 * 128 * 4 + 512
    back = read_container(f)
    assert back.ratio == pytest.approx(c.original_bytes / f.stat().st_size)
    assert back.manifest["totals"]["ratio"] == back.ratio


def test_aux_record_round_trip():
    aux = codec.AuxParams.create(codec.BoxStats((0.1234567891, -2e-5), 0.321), 0.07, 1225, 3)
    assert aux_from_bytes(aux_to_bytes(aux)) == aux
    traj = codec.AuxParams.create(codec.BoxStats((0.0, 0.0), 0.1), 0.1, 50, 1, "trajectory")
    assert aux_from_bytes(aux_to_bytes(traj)) == traj


@pytest.fixture
def container_file(tmp_path, rng):
    entry, _, _ = compressed_entry("w", rng.normal(0, 0.02, size=(16, 16)))
    f = tmp_path / "c.bhc"
    write_container([entry], f)
    return f


def test_bad_magic(container_file):
    blob = bytearray(container_file.read_bytes())
    blob[:4] = b"NOPE"
    container_file.write_bytes(blob)
    with pytest.raises(CorruptDataError, match="magic"):
        read_container(container_file)


def test_bad_version(container_file):
    blob = bytearray(container_file.read_bytes())
    blob[4:8] = struct.pack("<I", 99)
    container_file.write_bytes(blob)
    with pytest.raises(CorruptDataError, match="version"):
        read_container(container_file)


def test_tampered_payload(container_file):
    blob = bytearray(container_file.read_bytes())
    blob[-3] ^= 0x40
    container_file.write_bytes(blob)
    with pytest.raises(CorruptDataError, match="checksum"):
        read_container(container_file)


def test_truncated_file(container_file):
    container_file.write_bytes(container_file.read_bytes()[:-5])
    with pytest.raises(CorruptDataError):
        read_container(container_file)


def test_index_out_of_bounds(container_file):
    blob = container_file.read_bytes()
    _, _, mlen = struct.unpack_from("<4sIQ", blob)
    manifest = json.loads(blob[16:16 + mlen])
    manifest["entries"][0]["offset"] = 10**6
    raw = json.dumps(manifest).encode()
    raw += b" " * (mlen - len(raw))
    assert len(raw) == mlen
    container_file.write_bytes(blob[:16] + raw + blob[16 + mlen:])
    with pytest.raises(CorruptDataError, match="out of bounds"):
        read_container(container_file)


@pytest.mark.parametrize("name,shape,dtype,expected", [
    ("blocks.0.mlp.fc1.weight", (768, 3072), "F32", EntryKind.COMPRESSED),
    ("blocks.0.mlp.fc1.bias", (768,), "F32", EntryKind.PASSTHROUGH),
    ("tiny.weight", (8, 8), "F32", EntryKind.PASSTHROUGH),
    ("conv.weight", (64, 3, 16, 16), "F32", EntryKind.PASSTHROUGH),
    ("half.weight", (128, 64), "F16", EntryKind.COMPRESSED),
    ("ids", (128, 64), "I64", EntryKind.PASSTHROUGH),
])
def test_eligibility_defaults(name, shape, dtype, expected):
    assert eligibility(name, shape, dtype) is expected


def test_eligibility_patterns_and_threshold():
    policy = EligibilityPolicy(min_elems=16, include=("*.weight",), exclude=("head.*",))
    assert eligibility("a.weight", (8, 8), policy=policy) is EntryKind.COMPRESSED
    assert eligibility("a.scale", (8, 8), policy=policy) is EntryKind.PASSTHROUGH
    assert eligibility("head.weight", (8, 8), policy=policy) is EntryKind.PASSTHROUGH
