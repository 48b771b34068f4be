"""Checkpoint-level compress, decompress and verify built on the codec and container."""

from __future__ import annotations

import logging
import time
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import codec
from .codec import CodebookKind
from .container import (
    Container,
    EligibilityPolicy,
    EntryKind,
    TensorEntry,
    read_container,
    write_container,
)
from .errors import RejectedInputError, SearchError
from .safetensors_io import NUMPY_DTYPES, TensorData, emit_safetensors, ingest_safetensors
from .search import SearchSpace, grid_search

log = logging.getLogger(__name__)


@dataclass
class TensorReport:
    name: str
    kind: str
    shape: list[int]
    dtype: str
    numel: int
    original_bytes: int
    stored_bytes: int
    bits_per_param: float
    mae: float | None = None
    l: float | None = None
    U: int | None = None
    M: int | None = None
    seconds: float = 0.0
    note: str = ""


@dataclass
class CompressionReport:
    tensors: list[TensorReport]
    original_bytes: int
    stored_bytes: int
    seconds: float = 0.0

    @property
    def ratio(self) -> float:
        return self.original_bytes / self.stored_bytes if self.stored_bytes else 0.0

    def to_dict(self) -> dict:
        return {
            "tensors": [asdict(t) for t in self.tensors],
            "original_bytes": self.original_bytes,
            "stored_bytes": self.stored_bytes,
            "ratio": self.ratio,
            "seconds": self.seconds,
        }


@dataclass
class VerifyRow:
    name: str
    kind: str
    mae: float
    max_abs_error: float
    reported_mae: float | None
    bits_per_param: float
    within_budget: bool = True

    @property
    def matches_report(self) -> bool:
        return self.reported_mae is None or self.reported_mae == self.mae


@dataclass
class VerifyReport:
    rows: list[VerifyRow]
    ratio: float
    budget: float | None = None
    missing: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return (
            not self.missing
            and all(r.within_budget and r.matches_report for r in self.rows)
        )

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "ratio": self.ratio,
            "budget": self.budget,
            "missing": self.missing,
            "rows": [dict(asdict(r), matches_report=r.matches_report) for r in self.rows],
        }


def _as_tensor_data(value) -> TensorData:
    return value if isinstance(value, TensorData) else TensorData.from_array(np.asarray(value))


def _restore(W64: np.ndarray, dtype: str) -> np.ndarray:
    """Decoded float64 weights in the tensor's stored dtype."""
    return W64.astype(NUMPY_DTYPES[dtype])


def _compress_one(name: str, td: TensorData, space: SearchSpace, kind) -> tuple[TensorEntry, TensorReport]:
    start = time.perf_counter()
    original = td.array()
    try:
        result = grid_search(original.astype(np.float64), space, kind=kind)
    except SearchError as exc:
        log.warning("%s: no candidate succeeded, storing uncompressed (%s)", name, exc)
        entry = TensorEntry.passthrough(name, td.shape, td.dtype, td.data)
        return entry, _report(entry, time.perf_counter() - start, note=f"search failed: {exc}")
    decoded = _restore(codec.decode_tensor(result.codes, result.aux, original.shape), td.dtype)
    err = codec.mae(original, decoded)
    entry = TensorEntry.compressed(name, td.shape, td.dtype, result.codes, result.aux, mae=err)
    return entry, _report(entry, time.perf_counter() - start)


def _report(entry: TensorEntry, seconds: float, note: str = "") -> TensorReport:
    rep = TensorReport(
        name=entry.name,
        kind=entry.kind.value,
        shape=list(entry.shape),
        dtype=entry.dtype,
        numel=entry.numel,
        original_bytes=entry.original_bytes,
        stored_bytes=entry.stored_bytes,
        bits_per_param=entry.bits_per_param,
        mae=entry.mae,
        seconds=seconds,
        note=note,
    )
    if entry.aux is not None:
        rep.l, rep.U, rep.M = entry.aux.l, entry.aux.U, entry.aux.M
    return rep


def compress_tensors(
    tensors: Mapping,
    space: SearchSpace,
    policy: EligibilityPolicy | None = None,
    workers: int = 1,
    kind=CodebookKind.GRID,
) -> tuple[list[TensorEntry], list[TensorReport]]:
    """Compress every eligible tensor; entries and reports come back sorted by name."""
    policy = policy or EligibilityPolicy()
    items = sorted((name, _as_tensor_data(v)) for name, v in tensors.items())

    def work(item):
        name, td = item
        if policy.decide(name, td.shape, td.dtype) is EntryKind.COMPRESSED:
            return _compress_one(name, td, space, kind)
        entry = TensorEntry.passthrough(name, td.shape, td.dtype, td.data)
        return entry, _report(entry, 0.0)

    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(work, items))
    else:
        done = [work(item) for item in items]
    return [e for e, _ in done], [r for _, r in done]


def compress_file(src, dst, space: SearchSpace, policy=None, workers: int = 1, kind=CodebookKind.GRID):
    """safetensors in, ``.bhc`` out."""
    start = time.perf_counter()
    entries, reports = compress_tensors(ingest_safetensors(src), space, policy, workers, kind)
    written = write_container(entries, dst)
    return CompressionReport(reports, written.original_bytes, written.stored_bytes,
                             time.perf_counter() - start)


def decode_entry(entry: TensorEntry) -> TensorData:
    if entry.kind is EntryKind.PASSTHROUGH:
        return TensorData(entry.dtype, tuple(entry.shape), entry.payload)
    W = codec.decode_tensor(entry.code_matrix(), entry.aux, tuple(entry.shape))
    return TensorData.from_array(_restore(W, entry.dtype), entry.dtype)


def decompress(container: Container) -> dict[str, TensorData]:
    return {e.name: decode_entry(e) for e in container.entries}


def decompress_file(src, dst) -> dict[str, TensorData]:
    tensors = decompress(read_container(src))
    emit_safetensors(tensors, dst)
    return tensors


def verify(original: Mapping, container: Container, budget: float | None = None) -> VerifyReport:
    """Compare every container entry with the original tensors."""
    rows, missing = [], []
    for entry in container.entries:
        if entry.name not in original:
            missing.append(entry.name)
            continue
        ref = _as_tensor_data(original[entry.name])
        if tuple(ref.shape) != tuple(entry.shape) or ref.dtype != entry.dtype:
            raise RejectedInputError(
                f"{entry.name}: container holds {entry.dtype}{list(entry.shape)}, "
                f"original is {ref.dtype}{list(ref.shape)}"
            )
        got = decode_entry(entry)
        if entry.kind is EntryKind.PASSTHROUGH:
            same = got.data == ref.data
            err = 0.0 if same else float("inf")
            rows.append(VerifyRow(entry.name, entry.kind.value, err, err, None, entry.bits_per_param,
                                  within_budget=same))
            continue
        a, b = ref.array().astype(np.float64), got.array().astype(np.float64)
        err = codec.mae(a, b)
        max_abs = float(np.abs(a - b).max()) if a.size else 0.0
        rows.append(VerifyRow(
            entry.name, entry.kind.value, err, max_abs, entry.mae, entry.bits_per_param,
            within_budget=budget is None or err <= budget,
        ))
    missing.extend(sorted(set(original) - set(container.names())))
    return VerifyReport(sorted(rows, key=lambda r: r.name), container.ratio, budget, missing)
