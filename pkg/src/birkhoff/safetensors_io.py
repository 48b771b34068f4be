"""Reader and writer for the safetensors checkpoint layout.

File layout: ``u64`` little-endian header length, a JSON header mapping each
tensor name to ``{"dtype", "shape", "data_offsets": [begin, end]}`` (offsets
relative to the end of the header), then the raw row-major tensor bytes.
An optional ``"__metadata__"`` entry maps strings to strings.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import RejectedInputError

log = logging.getLogger(__name__)

NUMPY_DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
    "I16": np.dtype("<i2"),
    "I8": np.dtype("i1"),
    "U64": np.dtype("<u8"),
    "U32": np.dtype("<u4"),
    "U16": np.dtype("<u2"),
    "U8": np.dtype("u1"),
    "BOOL": np.dtype("?"),
}

# Formats numpy cannot represent; their bytes are carried through untouched.
OPAQUE_ITEMSIZE = {"BF16": 2, "F8_E4M3": 1, "F8_E5M2": 1}

METADATA_KEY = "__metadata__"


def itemsize(dtype: str) -> int | None:
    if dtype in NUMPY_DTYPES:
        return NUMPY_DTYPES[dtype].itemsize
    return OPAQUE_ITEMSIZE.get(dtype)


def dtype_name(dtype) -> str:
    dtype = np.dtype(dtype)
    for name, dt in NUMPY_DTYPES.items():
        if dt.kind == dtype.kind and dt.itemsize == dtype.itemsize:
            return name
    raise RejectedInputError(f"no safetensors dtype for numpy {dtype}")


@dataclass(frozen=True)
class TensorData:
    """Raw bytes of one tensor plus its declared dtype and shape."""

    dtype: str
    shape: tuple[int, ...]
    data: bytes

    @property
    def supported(self) -> bool:
        return self.dtype in NUMPY_DTYPES

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return len(self.data)

    def array(self) -> np.ndarray:
        if not self.supported:
            raise RejectedInputError(f"dtype {self.dtype} has no numpy equivalent")
        return np.frombuffer(self.data, dtype=NUMPY_DTYPES[self.dtype]).reshape(self.shape)

    @classmethod
    def from_array(cls, arr, dtype: str | None = None) -> TensorData:
        arr = np.asarray(arr)
        name = dtype or dtype_name(arr.dtype)
        if name not in NUMPY_DTYPES:
            raise RejectedInputError(f"cannot build {name} tensors from arrays")
        arr = np.ascontiguousarray(arr, dtype=NUMPY_DTYPES[name])
        return cls(name, tuple(int(d) for d in arr.shape), arr.tobytes())


def _parse_header(raw: bytes, data_len: int) -> tuple[dict, dict | None]:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RejectedInputError(f"malformed safetensors header: {exc}") from exc
    if not isinstance(header, dict):
        raise RejectedInputError("safetensors header is not a JSON object")
    metadata = header.pop(METADATA_KEY, None)
    if metadata is not None and not (
        isinstance(metadata, dict) and all(isinstance(v, str) for v in metadata.values())
    ):
        raise RejectedInputError("__metadata__ must map strings to strings")
    spans = []
    for name, info in header.items():
        try:
            dtype = info["dtype"]
            shape = tuple(info["shape"])
            begin, end = info["data_offsets"]
        except (TypeError, KeyError, ValueError) as exc:
            raise RejectedInputError(f"bad header entry for {name!r}: {exc}") from exc
        if not isinstance(dtype, str) or not all(isinstance(d, int) and d >= 0 for d in shape):
            raise RejectedInputError(f"bad dtype/shape for {name!r}")
        if not (isinstance(begin, int) and isinstance(end, int) and 0 <= begin <= end <= data_len):
            raise RejectedInputError(f"offsets {begin, end} of {name!r} outside data section")
        size = itemsize(dtype)
        if size is not None and end - begin != size * math.prod(shape):
            raise RejectedInputError(
                f"{name!r}: {end - begin} bytes do not match {dtype} shape {list(shape)}"
            )
        spans.append((begin, end, name))
    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise RejectedInputError(f"tensors {n0!r} and {n1!r} overlap")
    return header, metadata


def ingest_safetensors(path, with_metadata: bool = False):
    """Load every tensor of a safetensors file as :class:`TensorData`.

    Tensors keep file order.  Dtypes numpy cannot hold are loaded as raw
    bytes and logged; callers store them as pass-through entries.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise RejectedInputError(f"{path}: file too short for a safetensors header")
    (hlen,) = struct.unpack("<Q", blob[:8])
    if hlen > len(blob) - 8:
        raise RejectedInputError(f"{path}: header length {hlen} exceeds file size")
    data = memoryview(blob)[8 + hlen:]
    header, metadata = _parse_header(blob[8:8 + hlen], len(data))
    tensors = {}
    for name, info in header.items():
        begin, end = info["data_offsets"]
        td = TensorData(info["dtype"], tuple(info["shape"]), bytes(data[begin:end]))
        if not td.supported:
            log.warning("tensor %s has unsupported dtype %s; kept as raw bytes", name, td.dtype)
        tensors[name] = td
    if with_metadata:
        return tensors, metadata
    return tensors


def emit_safetensors(tensors: dict, path, metadata: dict | None = None) -> None:
    tensors = {
        name: td if isinstance(td, TensorData) else TensorData.from_array(td)
        for name, td in tensors.items()
    }
    header = {}
    if metadata:
        header[METADATA_KEY] = dict(metadata)
    offset = 0
    for name, td in tensors.items():
        header[name] = {
            "dtype": td.dtype,
            "shape": list(td.shape),
            "data_offsets": [offset, offset + td.nbytes],
        }
        offset += td.nbytes
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    raw += b" " * (-len(raw) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for td in tensors.values():
            fh.write(td.data)
