"""Timing harness: dense vs decompress-then-GEMM vs fused, plus compression runs.

Every case is checked for correctness before it is timed; a case whose
fused output disagrees with the dense product never gets a timing row.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from . import codec
from .container import TensorEntry, write_container
from .errors import BirkhoffError, ParameterError
from .hyperlinear import BlockConfig, FusedOperand, fused_gemm, reference_gemm
from .pipeline import compress_tensors
from .search import SearchSpace

DEFAULT_SEED = 1234
DEFAULT_STD = 0.02
GATE_RTOL = 1e-5
CSV_COLUMNS = ("label", "strategy", "m", "k", "n", "median_ms", "min_ms", "workers", "checksum")


class Strategy(str, enum.Enum):
    DENSE = "dense"
    DECOMPRESS_THEN_GEMM = "decompress_then_gemm"
    FUSED = "fused"


class GateError(BirkhoffError):
    """Strategies disagree; the case is not timed."""


@dataclass(frozen=True)
class BenchCase:
    label: str
    shape: tuple[int, int, int]
    strategy: Strategy = Strategy.FUSED
    repeats: int = 5
    seed: int = DEFAULT_SEED
    workers: int = 1
    cfg: BlockConfig = field(default_factory=BlockConfig)
    l: float = 0.1
    U: int = 1600
    M: int = 3

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.repeats < 3:
            raise ParameterError(f"repeats must be >= 3, got {self.repeats}")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ParameterError(f"shape must be three positive sizes, got {self.shape}")
        if self.workers < 1:
            raise ParameterError(f"workers must be >= 1, got {self.workers}")


@dataclass
class BenchRow:
    label: str
    strategy: str
    m: int
    k: int
    n: int
    median_ms: float
    min_ms: float
    workers: int
    checksum: str
    ratio: float
    mae: float


@dataclass
class CompressionRow:
    label: str
    params: int
    ratio: float
    mae: float
    seconds: float
    workers: int


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    compression: list[CompressionRow] = field(default_factory=list)
    machine: str = ""
    gate_passed: bool = True

    def slowdown(self, label: str) -> float | None:
        """Fused median over dense median for ``label``, if both were timed."""
        t = {r.strategy: r.median_ms for r in self.rows if r.label == label}
        if Strategy.FUSED.value in t and t.get(Strategy.DENSE.value):
            return t[Strategy.FUSED.value] / t[Strategy.DENSE.value]
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow(asdict(row))
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "machine": self.machine,
            "gate_passed": self.gate_passed,
            "rows": [{k: asdict(r)[k] for k in CSV_COLUMNS} for r in self.rows],
            "details": [asdict(r) for r in self.rows],
            "slowdown": {label: self.slowdown(label) for label in dict.fromkeys(r.label for r in self.rows)},
            "compression": [asdict(c) for c in self.compression],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def machine_descriptor() -> str:
    return (
        f"{platform.system()} {platform.machine()}; python {platform.python_version()}; "
        f"numpy {np.__version__}; numba {numba.__version__}; cpus {os.cpu_count()}; "
        f"numba threads {numba.config.NUMBA_NUM_THREADS} ({numba.threading_layer() if _layer_ready() else 'unset'})"
    )


def _layer_ready() -> bool:
    try:
        numba.threading_layer()
    except ValueError:
        return False
    return True


def synthetic_weights(shape, std: float = DEFAULT_STD, seed: int = DEFAULT_SEED) -> np.ndarray:
    """Gaussian stand-in for trained weights."""
    return np.random.default_rng(seed).normal(0.0, std, size=shape)


def _problem(case: BenchCase):
    m, k, n = case.shape
    rng = np.random.default_rng(case.seed)
    A = rng.normal(size=(m, k)).astype(np.float32)
    W = rng.normal(0.0, DEFAULT_STD, size=(k, n))
    op = FusedOperand.compress(W, case.l, case.U, case.M)
    return A, W, op


def _runner(strategy: Strategy, A, op: FusedOperand, W_hat, case: BenchCase):
    if strategy is Strategy.DENSE:
        return lambda: reference_gemm(A, W_hat, case.cfg, case.workers)
    if strategy is Strategy.DECOMPRESS_THEN_GEMM:
        return lambda: reference_gemm(A, op.decode().astype(np.float32), case.cfg, case.workers)
    return lambda: fused_gemm(A, op, case.cfg, case.workers)


def _checksum(C: np.ndarray) -> str:
    return f"{float(np.sum(C, dtype=np.float64)):.9e}"


def time_call(fn, repeats: int) -> tuple[float, float]:
    """Median and min wall time in ms, after one discarded warm-up call."""
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times), min(times)


def run_case(case: BenchCase, problem=None) -> BenchRow:
    A, W, op = problem or _problem(case)
    W_hat = op.decode().astype(np.float32)
    dense = reference_gemm(A, W_hat, case.cfg, case.workers)
    fused = fused_gemm(A, op, case.cfg, case.workers)
    scale = float(np.abs(dense).max()) or 1.0
    err = float(np.abs(fused.astype(np.float64) - dense).max()) / scale
    if not np.isfinite(err) or err > GATE_RTOL:
        raise GateError(f"{case.label}: fused differs from dense by {err:.3g} relative")
    fn = _runner(case.strategy, A, op, W_hat, case)
    out = fn()
    median_ms, min_ms = time_call(fn, case.repeats)
    entry = TensorEntry.compressed("w", W.shape, "F32", op.codes, op.aux)
    m, k, n = case.shape
    return BenchRow(
        label=case.label, strategy=case.strategy.value, m=m, k=k, n=n,
        median_ms=median_ms, min_ms=min_ms, workers=case.workers, checksum=_checksum(out),
        ratio=entry.original_bytes / entry.stored_bytes,
        mae=codec.mae(W.astype(np.float32), W_hat),
    )


def run_suite(cases) -> BenchReport:
    """Run cases in order; problems with the same shape and seed are built once."""
    report = BenchReport()
    problems = {}
    for case in cases:
        key = (case.shape, case.seed, case.l, case.U, case.M)
        if key not in problems:
            problems[key] = _problem(case)
        try:
            report.rows.append(run_case(case, problems[key]))
        except GateError:
            report.gate_passed = False
            raise
    # Described afterwards: numba only picks its threading layer on first launch.
    report.machine = machine_descriptor()
    return report


def gemm_cases(label: str, shape, repeats: int = 5, seed: int = DEFAULT_SEED, workers: int = 1,
               cfg: BlockConfig | None = None, strategies=tuple(Strategy)) -> list[BenchCase]:
    """One case per strategy for a single (m, k, n) shape."""
    cfg = cfg or BlockConfig()
    return [BenchCase(label, tuple(shape), s, repeats, seed, workers, cfg) for s in strategies]


def synthetic_model(params: int, width: int = 1024, seed: int = DEFAULT_SEED,
                    std: float = DEFAULT_STD, dtype=np.float32) -> dict[str, np.ndarray]:
    """Stack of ``width``-wide Gaussian matrices holding about ``params`` weights, plus small biases."""
    rows_total = max(1, params // width)
    rng = np.random.default_rng(seed)
    tensors = {}
    block = max(1, min(rows_total, 4 * width))
    i = 0
    while rows_total > 0:
        rows = min(block, rows_total)
        tensors[f"layers.{i:03d}.weight"] = rng.normal(0.0, std, size=(rows, width)).astype(dtype)
        tensors[f"layers.{i:03d}.bias"] = rng.normal(0.0, std, size=(width,)).astype(dtype)
        rows_total -= rows
        i += 1
    return tensors


def compression_run(label: str, tensors, space: SearchSpace, path, workers: int = 1,
                    policy=None) -> CompressionRow:
    """Compress ``tensors`` into ``path``; report whole-file ratio, mean MAE and wall time."""
    t0 = time.perf_counter()
    entries, reports = compress_tensors(tensors, space, policy, workers)
    written = write_container(entries, path)
    seconds = time.perf_counter() - t0
    maes = [(r.mae, r.numel) for r in reports if r.mae is not None]
    total = sum(n for _, n in maes)
    mean_mae = sum(e * n for e, n in maes) / total if total else 0.0
    params = sum(int(np.asarray(t).size) for t in tensors.values())
    return CompressionRow(label, params, written.ratio, mean_mae, seconds, workers)
