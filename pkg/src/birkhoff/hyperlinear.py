"""HyperLinear: blocked ``C = A @ W`` that decodes ``W`` from its codes on the fly.

The output is tiled into ``R x S`` blocks.  For each block the reduction runs
over ``T``-row slabs of the code matrix in ascending order; each slab's
``T x S/2`` codes are decoded into a scratch tile (one code fetch yields two
weights) and multiplied into the block accumulator.  The full weight matrix
is never built.  Blocks are independent, so they are spread over numba
worker threads; the fixed reduction order makes results bit-identical for
any worker count.
"""

from __future__ import annotations

import logging
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from . import codec
from .codec import AuxParams, CodeMatrix
from .errors import CorruptDataError, ParameterError, RejectedInputError

log = logging.getLogger(__name__)

# Try OpenMP before TBB unless the user chose a layer; old TBB builds only warn.
if "NUMBA_THREADING_LAYER" not in os.environ and "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]


@dataclass(frozen=True)
class BlockConfig:
    R: int = 64
    S: int = 64
    T: int = 64

    def __post_init__(self):
        if min(self.R, self.S, self.T) < 1:
            raise ParameterError(f"block sizes must be positive: {self}")
        if self.S % 2:
            raise ParameterError(f"S must be even so blocks hold whole pairs, got {self.S}")


@dataclass(frozen=True)
class FusedOperand:
    """Codes plus decoding tables for one compressed weight matrix.

    Codes are compacted and validated once here, so repeated products
    allocate nothing proportional to the weight size.
    """

    codes: CodeMatrix
    aux: AuxParams
    shape: tuple[int, int]
    _compact: np.ndarray = field(init=False, repr=False, compare=False)
    _points: np.ndarray = field(init=False, repr=False, compare=False)
    _scales: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        K, N = self.shape
        if self.codes.codes.shape != (K, (N + 1) // 2):
            raise RejectedInputError(
                f"codes of shape {self.codes.codes.shape} cannot hold a {K}x{N} matrix"
            )
        if self.codes.max_code_bound != self.aux.code_bound:
            raise CorruptDataError("code bound does not match aux parameters")
        bound = self.aux.code_bound
        dtype = np.uint16 if bound <= 1 << 16 else np.uint32
        raw = self.codes.codes
        if raw.size and (int(raw.min()) < 0 or int(raw.max()) >= bound):
            raise CorruptDataError(f"code outside [0, {bound})")
        compact = np.ascontiguousarray(raw, dtype=dtype)
        points = np.ascontiguousarray(codec.build_codebook(self.aux).points)
        scales = codec.scale_table(self.aux)
        used = np.unique(compact // np.asarray(self.aux.U, dtype=dtype))
        if np.isnan(scales[used.astype(np.int64)]).any():
            raise CorruptDataError("code refers to a category with no valid scale factor")
        object.__setattr__(self, "_compact", compact)
        object.__setattr__(self, "_points", points)
        object.__setattr__(self, "_scales", scales)

    @classmethod
    def from_entry(cls, entry) -> FusedOperand:
        """Build from a compressed container entry."""
        return cls(entry.code_matrix(), entry.aux, tuple(entry.shape))

    @classmethod
    def compress(cls, W, l: float = 0.1, U: int = 1600, M: int = 3) -> FusedOperand:
        W = np.asarray(W, dtype=np.float64)
        aux = codec.make_aux(W, l, U, M)
        return cls(codec.encode_tensor(W, aux), aux, W.shape)

    def compact_codes(self) -> np.ndarray:
        """Codes in the narrowest unsigned dtype that holds the code bound."""
        return self._compact

    def tables(self):
        """``(points, scales)`` arrays consumed by the kernel."""
        return self._points, self._scales

    def table_bytes(self) -> int:
        return self._points.nbytes + self._scales.nbytes

    def decode(self) -> np.ndarray:
        return codec.decode_tensor(self.codes, self.aux, self.shape)


def decode_block(op: FusedOperand, k_range: tuple[int, int], j_range: tuple[int, int]) -> np.ndarray:
    """Decode rows ``k_range`` and weight columns ``j_range`` (half-open)."""
    K, N = op.shape
    (k0, k1), (j0, j1) = k_range, j_range
    if not (0 <= k0 <= k1 <= K and 0 <= j0 <= j1 <= N):
        raise RejectedInputError(f"block {k_range} x {j_range} outside {op.shape}")
    p0, p1 = j0 // 2, (j1 + 1) // 2
    pairs = codec.decode_codes(op.codes.codes[k0:k1, p0:p1], op.aux)
    return pairs.reshape(k1 - k0, -1)[:, j0 - 2 * p0:j1 - 2 * p0]


@njit(parallel=True, cache=True)
def _fused_kernel(A, codes, points, scales, cx, cy, U, N, R, S, T, acc_buf, tile_buf, C):
    M, K = A.shape
    P = codes.shape[1]
    half = S // 2
    n_i = (M + R - 1) // R
    n_j = (P + half - 1) // half
    for blk in prange(n_i * n_j):
        tid = numba.get_thread_id()
        acc = acc_buf[tid]
        tile = tile_buf[tid]
        i0 = (blk // n_j) * R
        i1 = min(i0 + R, M)
        p0 = (blk % n_j) * half
        p1 = min(p0 + half, P)
        w = 2 * (p1 - p0)
        for i in range(i1 - i0):
            for j in range(w):
                acc[i, j] = 0
        for k0 in range(0, K, T):
            k1 = min(k0 + T, K)
            for kk in range(k1 - k0):
                for pp in range(p1 - p0):
                    c = np.int64(codes[k0 + kk, p0 + pp])
                    m = c // U
                    theta = c - m * U
                    x = points[theta, 0]
                    y = points[theta, 1]
                    if m != 0:
                        s = scales[m]
                        x = (x - cx) / s + cx
                        y = (y - cy) / s + cy
                    tile[kk, 2 * pp] = x
                    tile[kk, 2 * pp + 1] = y
            for i in range(i1 - i0):
                for kk in range(k1 - k0):
                    a = A[i0 + i, k0 + kk]
                    for j in range(w):
                        acc[i, j] += a * tile[kk, j]
        c0 = 2 * p0
        c1 = min(2 * p1, N)
        for i in range(i1 - i0):
            for j in range(c1 - c0):
                C[i0 + i, c0 + j] = acc[i, j]


@njit(parallel=True, cache=True)
def _blocked_kernel(A, W, R, S, T, acc_buf, tile_buf, C):
    M, K = A.shape
    N = W.shape[1]
    n_i = (M + R - 1) // R
    n_j = (N + S - 1) // S
    for blk in prange(n_i * n_j):
        tid = numba.get_thread_id()
        acc = acc_buf[tid]
        tile = tile_buf[tid]
        i0 = (blk // n_j) * R
        i1 = min(i0 + R, M)
        j0 = (blk % n_j) * S
        j1 = min(j0 + S, N)
        w = j1 - j0
        for i in range(i1 - i0):
            for j in range(w):
                acc[i, j] = 0
        for k0 in range(0, K, T):
            k1 = min(k0 + T, K)
            for kk in range(k1 - k0):
                for j in range(w):
                    tile[kk, j] = W[k0 + kk, j0 + j]
            for i in range(i1 - i0):
                for kk in range(k1 - k0):
                    a = A[i0 + i, k0 + kk]
                    for j in range(w):
                        acc[i, j] += a * tile[kk, j]
        for i in range(i1 - i0):
            for j in range(w):
                C[i0 + i, j0 + j] = acc[i, j]


@njit(parallel=True, cache=True)
def _naive_kernel(A, W, C):
    M, K = A.shape
    N = W.shape[1]
    for i in prange(M):
        for j in range(N):
            total = C.dtype.type(0)
            for k in range(K):
                total += A[i, k] * W[k, j]
            C[i, j] = total


def _accum_dtype(*arrays) -> np.dtype:
    # float32 only when every operand is float32; otherwise float64.
    if all(np.asarray(a).dtype == np.float32 for a in arrays):
        return np.dtype(np.float32)
    return np.dtype(np.float64)


def _resolve_workers(workers: int | None) -> int:
    limit = numba.config.NUMBA_NUM_THREADS
    if workers is None:
        return numba.get_num_threads()
    if workers < 1:
        raise ParameterError(f"worker count must be >= 1, got {workers}")
    if workers > limit:
        log.warning("requested %d workers, numba allows %d; using %d", workers, limit, limit)
        return limit
    return workers


@contextmanager
def _threads(n: int):
    previous = numba.get_num_threads()
    numba.set_num_threads(n)
    try:
        yield n
    finally:
        numba.set_num_threads(previous)


def scratch_bytes(cfg: BlockConfig, workers: int, dtype=np.float64) -> int:
    """Auxiliary memory used by :func:`fused_gemm`: one accumulator and one tile per worker."""
    return workers * (cfg.R * cfg.S + cfg.T * cfg.S) * np.dtype(dtype).itemsize


def fused_gemm(
    A, op: FusedOperand, cfg: BlockConfig | None = None, workers: int | None = None
) -> np.ndarray:
    """Compute ``A @ W`` where ``W`` is only available as codes in ``op``.

    Accumulates in float32 when ``A`` is float32 and in float64 otherwise.
    """
    cfg = cfg or BlockConfig()
    A = np.asarray(A)
    if A.dtype not in (np.float32, np.float64):
        A = A.astype(np.float64)
    A = np.ascontiguousarray(A)
    K, N = op.shape
    if A.ndim != 2 or A.shape[1] != K:
        raise RejectedInputError(f"cannot multiply {A.shape} by a {K}x{N} operand")
    codes = op.compact_codes()
    points, scales = op.tables()
    dtype = A.dtype
    n = _resolve_workers(workers)
    acc = np.empty((n, cfg.R, cfg.S), dtype=dtype)
    tile = np.empty((n, cfg.T, cfg.S), dtype=dtype)
    C = np.empty((A.shape[0], N), dtype=dtype)
    cx, cy = op.aux.centroid
    with _threads(n):
        _fused_kernel(A, codes, points, scales, cx, cy, op.aux.U, N,
                      cfg.R, cfg.S, cfg.T, acc, tile, C)
    return C


def reference_gemm(
    A, W, cfg: BlockConfig | None = None, workers: int | None = None
) -> np.ndarray:
    """Dense ``A @ W``: naive triple loop, or blocked like the fused kernel when ``cfg`` is given."""
    dtype = _accum_dtype(A, W)
    A = np.ascontiguousarray(A, dtype=dtype)
    W = np.ascontiguousarray(W, dtype=dtype)
    if A.ndim != 2 or W.ndim != 2 or A.shape[1] != W.shape[0]:
        raise RejectedInputError(f"cannot multiply {A.shape} by {W.shape}")
    C = np.empty((A.shape[0], W.shape[1]), dtype=dtype)
    n = _resolve_workers(workers)
    with _threads(n):
        if cfg is None:
            _naive_kernel(A, W, C)
        else:
            acc = np.empty((n, cfg.R, cfg.S), dtype=dtype)
            tile = np.empty((n, cfg.T, cfg.S), dtype=dtype)
            _blocked_kernel(A, W, cfg.R, cfg.S, cfg.T, acc, tile, C)
    return C


def hyperlinear(x, op: FusedOperand, bias=None, cfg: BlockConfig | None = None, workers=None):
    """Linear layer ``x @ W (+ bias)`` over a leading batch of any shape."""
    x = np.asarray(x)
    lead = x.shape[:-1]
    out = fused_gemm(x.reshape(math.prod(lead), x.shape[-1]), op, cfg, workers)
    if bias is not None:
        out += np.asarray(bias, dtype=out.dtype)
    return out.reshape(*lead, op.shape[1])
