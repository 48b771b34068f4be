"""The ``.bhc`` container: compressed and pass-through tensors in one file.

Layout (all integers little-endian)::

    b"BHC1" | u32 version | u64 manifest length | UTF-8 JSON manifest
    | zero padding to a 64-byte boundary | payload blobs, each 64-byte aligned

Blob offsets in the manifest are relative to the start of the payload
region.  A compressed blob is a fixed 49-byte aux record followed by the
bit-packed codes; a pass-through blob is the tensor's raw bytes.
"""

from __future__ import annotations

import enum
import fnmatch
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .codec import AuxParams, CodebookKind, CodeMatrix
from .errors import CorruptDataError, RejectedInputError
from .packing import PackedPayload, pack_codes, packed_size, unpack_codes
from .safetensors_io import itemsize

MAGIC = b"BHC1"
VERSION = 1
ALIGN = 64
COMPRESSIBLE_DTYPES = ("F32", "F16")

_PREFIX = struct.Struct("<4sIQ")
# l, U, M, centroid x, centroid y, l_f, codebook kind, trajectory step
_AUX = struct.Struct("<dIIdddBd")
_KIND_CODES = {CodebookKind.GRID: 0, CodebookKind.TRAJECTORY: 1}


class EntryKind(str, enum.Enum):
    COMPRESSED = "compressed"
    PASSTHROUGH = "passthrough"


def aux_to_bytes(aux: AuxParams) -> bytes:
    return _AUX.pack(aux.l, aux.U, aux.M, *aux.centroid, aux.l_f, _KIND_CODES[aux.kind], aux.step)


def aux_from_bytes(raw: bytes) -> AuxParams:
    if len(raw) != _AUX.size:
        raise CorruptDataError(f"aux record is {len(raw)} bytes, expected {_AUX.size}")
    l, U, M, cx, cy, l_f, kind, step = _AUX.unpack(raw)
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if kind not in kinds:
        raise CorruptDataError(f"unknown codebook kind {kind}")
    try:
        return AuxParams(l=l, U=U, M=M, centroid=(cx, cy), l_f=l_f, kind=kinds[kind], step=step)
    except ValueError as exc:
        raise CorruptDataError(f"invalid aux record: {exc}") from exc


AUX_RECORD_SIZE = _AUX.size


@dataclass
class TensorEntry:
    name: str
    kind: EntryKind
    shape: tuple[int, ...]
    dtype: str
    payload: PackedPayload | bytes
    aux: AuxParams | None = None
    pad_applied: bool = False
    mae: float | None = None

    @classmethod
    def compressed(cls, name, shape, dtype, codes: CodeMatrix, aux: AuxParams, mae=None):
        K, N = shape
        if codes.codes.shape != (K, (N + 1) // 2):
            raise RejectedInputError(f"{name}: code shape {codes.codes.shape} does not fit {shape}")
        payload = pack_codes(codes.codes, aux.bit_width)
        return cls(name, EntryKind.COMPRESSED, (K, N), dtype, payload, aux, bool(N % 2), mae)

    @classmethod
    def passthrough(cls, name, shape, dtype, data: bytes):
        return cls(name, EntryKind.PASSTHROUGH, tuple(shape), dtype, bytes(data))

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def original_bytes(self) -> int:
        if self.kind is EntryKind.PASSTHROUGH:
            return len(self.payload)
        return self.numel * itemsize(self.dtype)

    def blob(self) -> bytes:
        if self.kind is EntryKind.PASSTHROUGH:
            return self.payload
        return aux_to_bytes(self.aux) + self.payload.data

    @property
    def stored_bytes(self) -> int:
        return len(self.blob())

    @property
    def bits_per_param(self) -> float:
        return 8 * self.stored_bytes / max(1, self.numel)

    def code_matrix(self) -> CodeMatrix:
        if self.kind is not EntryKind.COMPRESSED:
            raise RejectedInputError(f"{self.name} is not a compressed entry")
        K, N = self.shape
        codes = unpack_codes(self.payload).reshape(K, (N + 1) // 2)
        return CodeMatrix(codes=codes, max_code_bound=self.aux.code_bound)


@dataclass
class Container:
    entries: list[TensorEntry]
    original_bytes: int
    stored_bytes: int
    version: int = VERSION
    manifest: dict = field(default_factory=dict, repr=False)

    @property
    def ratio(self) -> float:
        return self.original_bytes / self.stored_bytes if self.stored_bytes else 0.0

    def __getitem__(self, name: str) -> TensorEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def _entry_record(entry: TensorEntry, offset: int, blob: bytes) -> dict:
    rec = {
        "name": entry.name,
        "kind": entry.kind.value,
        "shape": list(entry.shape),
        "dtype": entry.dtype,
        "offset": offset,
        "length": len(blob),
        "crc32": zlib.crc32(blob),
    }
    if entry.kind is EntryKind.COMPRESSED:
        rec.update(
            pad_applied=entry.pad_applied,
            bit_width=entry.payload.bit_width,
            code_count=entry.payload.code_count,
            mae=entry.mae,
        )
    return rec


def write_container(entries, path) -> Container:
    """Write ``entries`` to ``path`` and return the container as written."""
    entries = list(entries)
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise RejectedInputError("duplicate tensor names")
    blobs = [e.blob() for e in entries]
    records = []
    end = 0
    for entry, blob in zip(entries, blobs):
        offset = _align(end)
        records.append(_entry_record(entry, offset, blob))
        end = offset + len(blob)
    original = sum(e.original_bytes for e in entries)

    # Totals count the manifest itself; grow the payload start until the
    # manifest that mentions the resulting file size fits in front of it.
    data_start = _align(_PREFIX.size)
    while True:
        stored = data_start + end
        manifest = {
            "format": "bhc",
            "version": VERSION,
            "entries": records,
            "totals": {
                "original_bytes": original,
                "stored_bytes": stored,
                "ratio": original / stored,
            },
        }
        raw = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
        if _PREFIX.size + len(raw) <= data_start:
            break
        data_start = _align(_PREFIX.size + len(raw))
    # Trailing JSON whitespace fills the gap so the reader finds the payload
    # region right after the declared manifest length.
    raw += b" " * (data_start - _PREFIX.size - len(raw))

    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(raw)))
        fh.write(raw)
        pos = 0
        for rec, blob in zip(records, blobs):
            fh.write(b"\0" * (rec["offset"] - pos))
            fh.write(blob)
            pos = rec["offset"] + len(blob)
    return Container(entries, original, stored, VERSION, manifest)


def read_manifest(path) -> tuple[dict, memoryview, int]:
    """Parse the fixed prefix and manifest; return it with the payload region."""
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CorruptDataError(f"{path}: too short to be a BHC container")
    magic, version, mlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptDataError(f"{path}: bad magic {magic!r}, not a BHC container")
    if version != VERSION:
        raise CorruptDataError(f"{path}: unsupported container version {version}")
    if _PREFIX.size + mlen > len(blob):
        raise CorruptDataError(f"{path}: manifest length {mlen} exceeds file size")
    try:
        manifest = json.loads(blob[_PREFIX.size:_PREFIX.size + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptDataError(f"{path}: unreadable manifest: {exc}") from exc
    if not isinstance(manifest, dict):
        raise CorruptDataError(f"{path}: manifest is not a JSON object")
    data = memoryview(blob)[_align(_PREFIX.size + mlen):]
    return manifest, data, len(blob)


def _load_entry(rec: dict, data: memoryview) -> TensorEntry:
    name = rec.get("name", "?")
    try:
        offset, length = int(rec["offset"]), int(rec["length"])
        kind = EntryKind(rec["kind"])
        shape = tuple(int(d) for d in rec["shape"])
        dtype = rec["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptDataError(f"bad manifest record for {name!r}: {exc}") from exc
    if offset < 0 or length < 0 or offset + length > len(data):
        raise CorruptDataError(f"{name!r}: index [{offset}, {offset + length}) out of bounds")
    blob = bytes(data[offset:offset + length])
    if zlib.crc32(blob) != rec.get("crc32"):
        raise CorruptDataError(f"{name!r}: checksum mismatch")
    if kind is EntryKind.PASSTHROUGH:
        return TensorEntry.passthrough(name, shape, dtype, blob)

    if len(shape) != 2:
        raise CorruptDataError(f"{name!r}: compressed entry must be 2-D, got {shape}")
    K, N = shape
    aux = aux_from_bytes(blob[:AUX_RECORD_SIZE])
    count = int(rec["code_count"])
    b = int(rec["bit_width"])
    if count != K * ((N + 1) // 2):
        raise CorruptDataError(f"{name!r}: {count} codes cannot fill shape {shape}")
    if b != aux.bit_width:
        raise CorruptDataError(f"{name!r}: bit width {b} disagrees with aux ({aux.bit_width})")
    packed = blob[AUX_RECORD_SIZE:]
    if len(packed) != packed_size(count, b):
        raise CorruptDataError(f"{name!r}: truncated code payload")
    entry = TensorEntry(
        name, EntryKind.COMPRESSED, shape, dtype, PackedPayload(b, count, packed), aux,
        bool(rec.get("pad_applied", N % 2)), rec.get("mae"),
    )
    if entry.pad_applied != bool(N % 2):
        raise CorruptDataError(f"{name!r}: pad flag inconsistent with width {N}")
    return entry


def read_container(path) -> Container:
    manifest, data, size = read_manifest(path)
    try:
        records = manifest["entries"]
        totals = manifest["totals"]
        original, stored = int(totals["original_bytes"]), int(totals["stored_bytes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptDataError(f"{path}: incomplete manifest: {exc}") from exc
    if stored != size:
        raise CorruptDataError(f"{path}: file is {size} bytes, manifest says {stored}")
    entries = [_load_entry(rec, data) for rec in records]
    return Container(entries, original, stored, manifest.get("version", VERSION), manifest)


@dataclass(frozen=True)
class EligibilityPolicy:
    """Decides which tensors are compressed.

    A tensor is compressed when it is 2-D, has a float dtype the codec
    accepts, holds at least ``min_elems`` elements, matches one of
    ``include`` (if any are given) and matches none of ``exclude``.
    Patterns are shell-style globs on the tensor name.
    """

    min_elems: int = 4096
    include: tuple[str, ...] = ()
    exclude: tuple[str, ...] = ()

    def decide(self, name: str, shape, dtype: str) -> EntryKind:
        if len(shape) != 2 or dtype not in COMPRESSIBLE_DTYPES:
            return EntryKind.PASSTHROUGH
        if math.prod(shape) < self.min_elems:
            return EntryKind.PASSTHROUGH
        if self.include and not any(fnmatch.fnmatchcase(name, p) for p in self.include):
            return EntryKind.PASSTHROUGH
        if any(fnmatch.fnmatchcase(name, p) for p in self.exclude):
            return EntryKind.PASSTHROUGH
        return EntryKind.COMPRESSED


def eligibility(name: str, shape, dtype: str = "F32", policy: EligibilityPolicy | None = None) -> EntryKind:
    return (policy or EligibilityPolicy()).decide(name, tuple(shape), dtype)

