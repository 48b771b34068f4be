"""Fixed-width bit packing of non-negative integer codes.

Code ``i`` occupies bits ``[i*b, (i+1)*b)`` of a little-endian bit stream:
bit 0 of the stream is the least significant bit of byte 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CorruptDataError, ParameterError

# Codes per chunk; a multiple of 8 keeps every chunk byte-aligned.
_CHUNK = 1 << 20


@dataclass(frozen=True)
class PackedPayload:
    bit_width: int
    code_count: int
    data: bytes

    @property
    def nbytes(self) -> int:
        return len(self.data)


def bit_width_for(bound: int) -> int:
    """Bits needed to store every integer in ``[0, bound)``."""
    if bound < 1:
        raise ParameterError(f"bound must be positive, got {bound}")
    return max(1, (bound - 1).bit_length())


def packed_size(count: int, b: int) -> int:
    return (count * b + 7) // 8


def pack_codes(codes, b: int) -> PackedPayload:
    if not 1 <= b <= 63:
        raise ParameterError(f"bit width must be in [1, 63], got {b}")
    codes = np.ascontiguousarray(codes, dtype=np.int64).ravel()
    if codes.size and (codes.min() < 0 or codes.max() >> b):
        raise ParameterError(f"code outside [0, 2**{b}); encoder produced an invalid code")
    shifts = np.arange(b, dtype=np.int64)
    parts = []
    for start in range(0, codes.size, _CHUNK):
        bits = ((codes[start:start + _CHUNK, None] >> shifts) & 1).astype(np.uint8)
        parts.append(np.packbits(bits.ravel(), bitorder="little"))
    data = b"".join(p.tobytes() for p in parts)
    return PackedPayload(bit_width=b, code_count=int(codes.size), data=data)


def unpack_codes(payload: PackedPayload) -> np.ndarray:
    b, n = payload.bit_width, payload.code_count
    if not 1 <= b <= 63:
        raise CorruptDataError(f"invalid bit width {b}")
    if len(payload.data) != packed_size(n, b):
        raise CorruptDataError(
            f"payload holds {len(payload.data)} bytes, expected {packed_size(n, b)} "
            f"for {n} codes of {b} bits"
        )
    raw = np.frombuffer(payload.data, dtype=np.uint8)
    tail = (n * b) % 8
    if tail and raw[-1] >> tail:
        raise CorruptDataError("non-zero padding bits after the last code")
    weights = np.left_shift(np.int64(1), np.arange(b, dtype=np.int64))
    out = np.empty(n, dtype=np.int64)
    chunk_bytes = _CHUNK * b // 8
    for i, start in enumerate(range(0, n, _CHUNK)):
        count = min(_CHUNK, n - start)
        byte_slice = raw[i * chunk_bytes:i * chunk_bytes + packed_size(count, b)]
        bits = np.unpackbits(byte_slice, count=count * b, bitorder="little")
        out[start:start + count] = bits.reshape(count, b).astype(np.int64) @ weights
    return out
