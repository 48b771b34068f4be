import os
import subprocess
import sys
import textwrap
import tracemalloc

import numpy as np
import pytest

from birkhoff import codec
from birkhoff.codec import CodeMatrix
from birkhoff.errors import CorruptDataError, ParameterError, RejectedInputError
from birkhoff.hyperlinear import (
    BlockConfig,
    FusedOperand,
    decode_block,
    fused_gemm,
    hyperlinear,
    reference_gemm,
    scratch_bytes,
)

from oracles import naive_matmul


def operand(rng, K, N, U=1600, M=3, std=0.02):
    return FusedOperand.compress(rng.normal(0, std, size=(K, N)), U=U, M=M)


def rel_err(a, b):
    scale = np.abs(b).max()
    return np.abs(a - b).max() / (scale if scale else 1.0)


def test_block_config_validation():
    with pytest.raises(ParameterError):
        BlockConfig(R=0)
    with pytest.raises(ParameterError):
        BlockConfig(S=7)
    assert BlockConfig() == BlockConfig(64, 64, 64)


def test_identity_reproduces_decode(rng):
    op = operand(rng, 40, 26)
    C = fused_gemm(np.eye(40), op, BlockConfig(16, 8, 8))
    np.testing.assert_array_equal(C, op.decode())


def test_zeros_give_zeros(rng):
    op = operand(rng, 32, 20)
    C = fused_gemm(np.zeros((5, 32), dtype=np.float32), op)
    assert C.dtype == np.float32
    assert not C.any()


def test_matches_naive_decompress_then_multiply(rng):
    op = operand(rng, 64, 48)
    A = rng.normal(size=(32, 64)).astype(np.float32)
    reference = naive_matmul(A.astype(np.float64), op.decode())
    assert rel_err(fused_gemm(A, op), reference) <= 1e-5


@pytest.mark.parametrize("cfg", [BlockConfig(1, 2, 1), BlockConfig(7, 6, 5), BlockConfig(64, 64, 64)])
def test_ragged_shapes_float64(rng, cfg):
    op = operand(rng, 29, 35, U=100, M=2)
    A = rng.normal(size=(13, 29))
    np.testing.assert_allclose(fused_gemm(A, op, cfg), A @ op.decode(), rtol=1e-12, atol=1e-15)


def test_padding_neutrality(rng):
    # Odd width: the pad column is computed then dropped.
    W = rng.normal(0, 0.02, size=(24, 17))
    op = FusedOperand.compress(W)
    assert codec.pair_split(W).pad_applied
    A = rng.normal(size=(9, 24))
    C = fused_gemm(A, op, BlockConfig(4, 4, 4))
    assert C.shape == (9, 17)
    np.testing.assert_allclose(C, A @ op.decode(), rtol=1e-12)


def test_bit_identical_across_workers(rng):
    op = operand(rng, 130, 98)
    A = rng.normal(size=(70, 130)).astype(np.float32)
    cfg = BlockConfig(16, 16, 32)
    runs = [fused_gemm(A, op, cfg, workers=w) for w in (1, 4, 8)]
    for C in runs[1:]:
        assert C.tobytes() == runs[0].tobytes()


def test_shape_mismatch_rejected(rng):
    op = operand(rng, 16, 16)
    with pytest.raises(RejectedInputError):
        fused_gemm(np.ones((3, 15)), op)


def test_corrupt_codes_rejected(rng):
    op = operand(rng, 16, 16, U=25, M=1)
    bad = op.codes.codes.copy()
    bad[3, 2] = op.aux.code_bound
    with pytest.raises(CorruptDataError):
        FusedOperand(CodeMatrix(bad, op.aux.code_bound), op.aux, op.shape)


def test_hyperlinear_batched_with_bias(rng):
    op = operand(rng, 32, 12)
    x = rng.normal(size=(2, 3, 32))
    bias = rng.normal(size=12)
    out = hyperlinear(x, op, bias)
    assert out.shape == (2, 3, 12)
    np.testing.assert_allclose(out, x @ op.decode() + bias, rtol=1e-12)


def test_reference_one_by_one():
    assert reference_gemm(np.array([[3.0]]), np.array([[-2.5]])).tolist() == [[-7.5]]


def test_reference_blocked_matches_naive(rng):
    A = rng.normal(size=(128, 128))
    W = rng.normal(size=(128, 128))
    naive = reference_gemm(A, W)
    blocked = reference_gemm(A, W, BlockConfig())
    assert rel_err(blocked, naive) <= 1e-6
    np.testing.assert_allclose(naive[:4], naive_matmul(A[:4], W), rtol=1e-12)


def test_reference_ragged_matches_naive(rng):
    A = rng.normal(size=(33, 65))
    W = rng.normal(size=(65, 47))
    np.testing.assert_allclose(reference_gemm(A, W, BlockConfig(16, 16, 16)), naive_matmul(A, W),
                               rtol=1e-12, atol=1e-12)


def test_decode_block_full_range(rng):
    op = operand(rng, 20, 15)
    np.testing.assert_array_equal(decode_block(op, (0, 20), (0, 15)), op.decode())


def test_decode_block_tiles_reassemble(rng):
    op = operand(rng, 23, 31)
    full = op.decode()
    out = np.full(full.shape, np.nan)
    for k0 in range(0, 23, 7):
        for j0 in range(0, 31, 6):
            k1, j1 = min(k0 + 7, 23), min(j0 + 6, 31)
            out[k0:k1, j0:j1] = decode_block(op, (k0, k1), (j0, j1))
    np.testing.assert_array_equal(out, full)


def test_decode_block_single_pair(rng):
    op = operand(rng, 8, 8)
    tile = decode_block(op, (5, 6), (2, 4))
    assert tile.shape == (1, 2)
    expected = codec.decode_pair(int(op.codes.codes[5, 1]), op.aux)
    np.testing.assert_array_equal(tile[0], expected)


def test_decode_block_out_of_bounds(rng):
    op = operand(rng, 8, 8)
    with pytest.raises(RejectedInputError):
        decode_block(op, (0, 9), (0, 8))


def _peak_extra(A, op, cfg, workers):
    fused_gemm(A, op, cfg, workers)  # compile outside the measurement
    tracemalloc.start()
    try:
        C = fused_gemm(A, op, cfg, workers)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return peak - C.nbytes


@pytest.mark.parametrize("workers", [1, 4])
def test_auxiliary_memory_independent_of_weight_size(rng, workers):
    cfg = BlockConfig(32, 32, 32)
    A_small = rng.normal(size=(16, 64))
    A_big = rng.normal(size=(16, 512))
    small = operand(rng, 64, 64)
    big = operand(rng, 512, 1024)
    budget = scratch_bytes(cfg, workers) + 4096
    extra_small = _peak_extra(A_small, small, cfg, workers)
    extra_big = _peak_extra(A_big, big, cfg, workers)
    assert extra_small <= budget
    assert extra_big <= budget
    # Decoding the big weight would alone blow the budget many times over.
    assert 512 * 1024 * 8 > 50 * budget


def test_kernel_runtime_allocations_constant():
    # The compiled kernel's own allocation count must not grow with K*N.
    script = textwrap.dedent("""
        import numpy as np
        from numba.core.runtime import rtsys
        from birkhoff.hyperlinear import FusedOperand, fused_gemm
        rng = np.random.default_rng(0)
        counts = []
        for K, N in [(64, 64), (256, 512)]:
            op = FusedOperand.compress(rng.normal(0, 0.02, (K, N)))
            A = rng.normal(size=(32, K))
            fused_gemm(A, op)
            before = rtsys.get_allocation_stats().alloc
            fused_gemm(A, op)
            counts.append(rtsys.get_allocation_stats().alloc - before)
        print(counts[0], counts[1])
    """)
    env = {"NUMBA_NRT_STATS": "1", "NUMBA_THREADING_LAYER": "omp"}
    out = subprocess.run([sys.executable, "-c", script], env={**os.environ, **env},
                         capture_output=True, text=True, check=True)
    small, big = map(int, out.stdout.split())
    assert small == big
