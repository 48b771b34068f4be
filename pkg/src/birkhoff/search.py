"""Per-tensor grid search over box length, codebook size and category count."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .codec import AuxParams, CodebookKind, CodeMatrix
from .errors import BirkhoffError, ParameterError, SearchError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchSpace:
    l_candidates: tuple[float, ...]
    U_candidates: tuple[int, ...]
    M_candidates: tuple[int, ...]

    def __post_init__(self):
        for name in ("l_candidates", "U_candidates", "M_candidates"):
            values = tuple(getattr(self, name))
            if not values:
                raise ParameterError(f"{name} must not be empty")
            object.__setattr__(self, name, values)
        if any(not (np.isfinite(l) and l > 0) for l in self.l_candidates):
            raise ParameterError(f"box lengths must be positive: {self.l_candidates}")
        if any(int(U) != U or U < 2 for U in self.U_candidates):
            raise ParameterError(f"codebook sizes must be integers >= 2: {self.U_candidates}")
        if any(int(M) != M or M < 1 for M in self.M_candidates):
            raise ParameterError(f"category counts must be integers >= 1: {self.M_candidates}")

    def triples(self):
        """``(M, U, l)`` in loop order: M outermost, l innermost."""
        return list(itertools.product(self.M_candidates, self.U_candidates, self.l_candidates))

    def __len__(self):
        return len(self.M_candidates) * len(self.U_candidates) * len(self.l_candidates)


@dataclass
class SearchResult:
    codes: CodeMatrix
    aux: AuxParams
    achieved_mae: float
    candidates_tried: int
    failures: list[tuple[tuple[int, int, float], str]] = field(default_factory=list)


def evaluate_candidate(W, aux: AuxParams, cb: codec.Codebook | None = None) -> float:
    """Encode, decode and return the reconstruction MAE of ``W`` under ``aux``."""
    W = np.asarray(W, dtype=np.float64)
    cm = codec.encode_tensor(W, aux, cb)
    return codec.mae(W, codec.decode_tensor(cm, aux, W.shape, cb))


def _preference(mae: float, aux: AuxParams):
    # Lowest MAE; on ties fewer codebook entries, fewer categories, larger box.
    return (mae, aux.U, aux.M, -aux.l)


def grid_search(
    W,
    space: SearchSpace,
    kind: CodebookKind | str = CodebookKind.GRID,
    workers: int = 1,
) -> SearchResult:
    """Try every ``(M, U, l)`` triple and keep the one with the lowest MAE.

    Box statistics are computed once for the tensor.  Candidates that raise a
    codec error are skipped and recorded in ``failures``; if none succeeds a
    :class:`SearchError` is raised.  The choice does not depend on
    ``workers``: results are reduced in candidate order with a total
    preference key.
    """
    W = np.asarray(W, dtype=np.float64)
    pf = codec.pair_split(W)
    stats = codec.compute_stats(pf)

    def run(triple):
        M, U, l = triple
        try:
            aux = AuxParams.create(stats, l, U, M, kind)
            cb = codec.build_codebook(aux)
            cm = codec.encode_tensor(pf, aux, cb)
            err = codec.mae(W, codec.decode_tensor(cm, aux, W.shape, cb))
        except BirkhoffError as exc:
            return triple, None, None, str(exc)
        return triple, cm, aux, err

    triples = space.triples()
    if workers > 1 and len(triples) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = pool.map(run, triples)
            return _reduce(outcomes, len(triples))
    return _reduce(map(run, triples), len(triples))


def _reduce(outcomes, total: int) -> SearchResult:
    best = None
    failures = []
    for triple, cm, aux, err in outcomes:
        if cm is None:
            log.warning("candidate %s failed: %s", triple, err)
            failures.append((triple, err))
            continue
        key = _preference(err, aux)
        if best is None or key < best[0]:
            best = (key, cm, aux, err)
    if best is None:
        raise SearchError(f"all {total} candidates failed: {failures}")
    _, cm, aux, err = best
    return SearchResult(cm, aux, err, total, failures)
