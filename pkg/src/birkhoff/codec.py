"""Pair codec: maps 1x2 slices of a weight matrix to single integer codes.

Every row of a ``K x N`` matrix is cut into consecutive pairs.  All pairs of
a tensor share one square box of side ``l`` centred on their centroid.  Pairs
outside the box are pulled towards the centroid by a per-category factor, the
scaled point is snapped to the nearest of ``U`` codebook points, and the code
``theta + m * U`` records both the codeword and the category ``m``.

Distances from the centroid are Chebyshev (L-infinity) distances, so
"distance <= l/2" is exactly "inside the box".
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptDataError, ParameterError, RejectedInputError

# Max number of (pair, codeword) distances materialised at once by the
# brute-force trajectory encoder.
_SCAN_CHUNK = 1 << 22


class CodebookKind(str, enum.Enum):
    GRID = "grid"
    TRAJECTORY = "trajectory"


@dataclass(frozen=True)
class PairField:
    """A ``K x N`` matrix viewed as ``K x N'/2`` pairs (``N'`` even)."""

    pairs: np.ndarray  # (K, N'/2, 2) float64
    original_cols: int

    @property
    def rows(self) -> int:
        return self.pairs.shape[0]

    @property
    def padded_cols(self) -> int:
        return 2 * self.pairs.shape[1]

    @property
    def pad_applied(self) -> bool:
        return self.padded_cols != self.original_cols

    @property
    def count(self) -> int:
        return self.pairs.shape[0] * self.pairs.shape[1]

    def flat(self) -> np.ndarray:
        """All pairs as a ``(G, 2)`` array in row-major ``(k, j)`` order."""
        return self.pairs.reshape(-1, 2)


@dataclass(frozen=True)
class BoxStats:
    centroid: tuple[float, float]
    l_f: float


@dataclass(frozen=True)
class AuxParams:
    """Per-tensor decoding sidecar.

    ``U`` is the effective codebook size.  Build instances with
    :meth:`create` so that grid codebooks get a perfect-square ``U``.
    """

    l: float
    U: int
    M: int
    centroid: tuple[float, float]
    l_f: float
    kind: CodebookKind = CodebookKind.GRID
    step: float = field(default=0.0)

    def __post_init__(self):
        object.__setattr__(self, "kind", CodebookKind(self.kind))
        values =(self.l, self.l_f, self.step, *self.centroid)
        if not all(math.isfinite(v) for v in values):
            raise ParameterError(f"non-finite auxiliary parameter in {self}")
        if not self.l > 0:
            raise ParameterError(f"box length must be positive, got {self.l}")
        if self.U < 2:
            raise ParameterError(f"codebook size must be >= 2, got {self.U}")
        if self.M < 1:
            raise ParameterError(f"category count must be >= 1, got {self.M}")
        if self.l_f < 0:
            raise ParameterError(f"farthest distance must be >= 0, got {self.l_f}")

    @classmethod
    def create(
        cls,
        stats: BoxStats,
        l: float,
        U: int,
        M: int,
        kind: CodebookKind | str = CodebookKind.GRID,
    ) -> AuxParams:
        kind = CodebookKind(kind)
        l, U, M = float(l), int(U), int(M)
        if not l > 0:
            raise ParameterError(f"box length must be positive, got {l}")
        u_eff = effective_size(U, kind)
        return cls(
            l=l,
            U=u_eff,
            M=M,
            centroid=(float(stats.centroid[0]), float(stats.centroid[1])),
            l_f=float(stats.l_f),
            kind=kind,
            step=trajectory_step(l, u_eff),
        )

    @property
    def stats(self) -> BoxStats:
        return BoxStats(self.centroid, self.l_f)

    @property
    def code_bound(self) -> int:
        """Exclusive upper bound of every code, ``(M + 1) * U``."""
        return (self.M + 1) * self.U

    @property
    def bit_width(self) -> int:
        return max(1, (self.code_bound - 1).bit_length())


@dataclass(frozen=True)
class Codebook:
    params: AuxParams
    points: np.ndarray  # (U, 2)
    # Per-axis lattice coordinates; only set for grid codebooks.
    xs: np.ndarray | None = None
    ys: np.ndarray | None = None


@dataclass(frozen=True)
class CodeMatrix:
    codes: np.ndarray  # (K, N'/2) int64
    max_code_bound: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape


def effective_size(U: int, kind: CodebookKind | str = CodebookKind.GRID) -> int:
    """Codebook size actually used: ``ceil(sqrt(U))**2`` for grids."""
    if U < 2:
        raise ParameterError(f"codebook size must be >= 2, got {U}")
    if CodebookKind(kind) is CodebookKind.GRID:
        side = math.isqrt(U - 1) + 1
        return side * side
    return U


def trajectory_step(l: float, U: int) -> float:
    # Makes the first trajectory coordinate advance by exactly l/U per index.
    return math.hypot(l / U, l)


def trajectory_direction(l: float, U: int) -> tuple[float, float]:
    norm = math.hypot(l / U, l)
    return (l / U) / norm, l / norm


def pair_split(W) -> PairField:
    """Cut each row of ``W`` into 1x2 pairs, padding odd-width rows.

    The pad element of row ``k`` is the mean of the row's second pair
    coordinates, ``2 * sum(W[k, 1::2]) / (N - 1)``; a single-column row
    pads with its only element.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] < 1 or W.shape[1] < 1:
        raise RejectedInputError(f"expected a non-empty 2-D matrix, got shape {W.shape}")
    bad = np.argwhere(~np.isfinite(W))
    if bad.size:
        k, n = (int(v) for v in bad[0])
        raise RejectedInputError(f"non-finite entry at ({k}, {n})")
    K, N = W.shape
    if N % 2:
        if N == 1:
            pad = W[:, 0]
        else:
            pad = 2.0 * W[:, 1:N - 1:2].sum(axis=1) / (N - 1)
        W = np.concatenate([W, pad[:, None]], axis=1)
    pairs = np.ascontiguousarray(W.reshape(K, -1, 2))
    return PairField(pairs=pairs, original_cols=N)


def distance(points: np.ndarray, centroid) -> np.ndarray:
    """Chebyshev distance of each ``(..., 2)`` point from ``centroid``."""
    points = np.asarray(points, dtype=np.float64)
    dx = np.abs(points[..., 0] - centroid[0])
    dy = np.abs(points[..., 1] - centroid[1])
    return np.maximum(dx, dy)


def compute_stats(pf: PairField | np.ndarray) -> BoxStats:
    pairs = pf.flat() if isinstance(pf, PairField) else np.asarray(pf, np.float64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise RejectedInputError("cannot compute statistics of an empty pair field")
    cx, cy = pairs.mean(axis=0)
    centroid = (float(cx), float(cy))
    return BoxStats(centroid=centroid, l_f=float(distance(pairs, centroid).max()))


def categories(dist: np.ndarray, l: float, l_f: float, M: int) -> np.ndarray:
    """Vectorised outlier category for an array of centroid distances."""
    dist = np.asarray(dist, dtype=np.float64)
    outer = dist > l / 2
    m = np.zeros(dist.shape, dtype=np.int64)
    if not outer.any():
        return m
    span = 2.0 * l_f - l
    # l_f is the max distance, so any outer point forces span > 0.
    assert span > 0, "outer point with 2*l_f - l <= 0"
    raw = np.ceil(M * (2.0 * dist[outer] - l) / span)
    m[outer] = np.clip(raw, 1, M).astype(np.int64)
    return m


def assign_category(pair, stats: BoxStats, l: float, M: int) -> int:
    if not l > 0:
        raise ParameterError(f"box length must be positive, got {l}")
    d = distance(np.asarray(pair, dtype=np.float64), stats.centroid)
    return int(categories(d, l, stats.l_f, M))


def scale_factor(m: int, M: int, l: float, l_f: float) -> float:
    if not l > 0:
        raise ParameterError(f"box length must be positive, got {l}")
    if not 0 <= m <= M:
        raise ParameterError(f"category {m} outside [0, {M}]")
    if m == 0:
        return 1.0
    denom = l + (m / M) * (2.0 * l_f - l)
    if not denom > 0:
        raise ParameterError(f"non-positive scale denominator for category {m}")
    return l / denom


def scale_table(aux: AuxParams) -> np.ndarray:
    """Scale factor of every category ``0..M``; NaN where undefined."""
    s = np.full(aux.M + 1, np.nan)
    for m in range(aux.M + 1):
        try:
            s[m] = scale_factor(m, aux.M, aux.l, aux.l_f)
        except ParameterError:
            pass
    return s


def build_codebook(aux: AuxParams) -> Codebook:
    if aux.U < 2:
        raise ParameterError(f"codebook size must be >= 2, got {aux.U}")
    cx, cy = aux.centroid
    x0, y0 = cx - aux.l / 2, cy - aux.l / 2
    if aux.kind is CodebookKind.GRID:
        side = math.isqrt(aux.U - 1) + 1
        if side * side != aux.U:
            raise ParameterError(f"grid codebook needs a perfect-square U, got {aux.U}")
        offsets = (np.arange(side, dtype=np.float64) + 0.5) * (aux.l / side)
        xs = x0 + offsets
        ys = y0 + offsets
        theta = np.arange(aux.U)
        points = np.stack([xs[theta % side], ys[theta // side]], axis=1)
        return Codebook(params=aux, points=points, xs=xs, ys=ys)
    ax, ay = trajectory_direction(aux.l, aux.U)
    t = aux.step * np.arange(aux.U, dtype=np.float64)
    points = np.stack(
        [x0 + np.mod(t * ax, aux.l), y0 + np.mod(t * ay, aux.l)], axis=1
    )
    return Codebook(params=aux, points=points)


def _nearest_axis(values: np.ndarray, coords: np.ndarray, origin: float, cell: float):
    # Nearest lattice coordinate per value; ties go to the lower index.
    n = coords.shape[0]
    guess = np.clip(np.floor((values - origin) / cell), 0, n - 1).astype(np.int64)
    best = np.maximum(guess - 1, 0)
    best_d = (values - coords[best]) ** 2
    for cand in (guess, np.minimum(guess + 1, n - 1)):
        d = (values - coords[cand]) ** 2
        better = d < best_d
        best = np.where(better, cand, best)
        best_d = np.where(better, d, best_d)
    return best


def nearest_codeword(points: np.ndarray, cb: Codebook) -> np.ndarray:
    """Index of the L2-nearest codeword for each ``(G, 2)`` point."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    aux = cb.params
    if cb.xs is not None:
        side = cb.xs.shape[0]
        cell = aux.l / side
        ix = _nearest_axis(points[:, 0], cb.xs, aux.centroid[0] - aux.l / 2, cell)
        iy = _nearest_axis(points[:, 1], cb.ys, aux.centroid[1] - aux.l / 2, cell)
        return ix + side * iy
    out = np.empty(points.shape[0], dtype=np.int64)
    step = max(1, _SCAN_CHUNK // cb.points.shape[0])
    for start in range(0, points.shape[0], step):
        chunk = points[start:start + step]
        d = ((chunk[:, None, :] - cb.points[None, :, :]) ** 2).sum(axis=-1)
        out[start:start + step] = np.argmin(d, axis=1)
    return out


def scale_points(pairs: np.ndarray, aux: AuxParams) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(scaled, m)``: pairs pulled into the box and their categories."""
    pairs = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    centre = np.asarray(aux.centroid)
    m = categories(distance(pairs, aux.centroid), aux.l, aux.l_f, aux.M)
    outer = m > 0
    scaled = pairs.copy()
    if outer.any():
        s = scale_table(aux)[m[outer]]
        scaled[outer] = (pairs[outer] - centre) * s[:, None] + centre
    return scaled, m


def encode_pairs(pairs: np.ndarray, aux: AuxParams, cb: Codebook | None = None) -> np.ndarray:
    if cb is None:
        cb = build_codebook(aux)
    scaled, m = scale_points(pairs, aux)
    return nearest_codeword(scaled, cb) + m * aux.U


def decode_codes(codes: np.ndarray, aux: AuxParams, cb: Codebook | None = None) -> np.ndarray:
    """Decode an integer array of codes into an array of pairs ``(..., 2)``."""
    if cb is None:
        cb = build_codebook(aux)
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= aux.code_bound):
        raise CorruptDataError(f"code outside [0, {aux.code_bound})")
    m, theta = np.divmod(codes.astype(np.int64), aux.U)
    s = scale_table(aux)[m]
    if np.isnan(s).any():
        raise CorruptDataError("code refers to a category with no valid scale factor")
    points = cb.points[theta]
    centre = np.asarray(aux.centroid)
    out = (points - centre) / s[..., None] + centre
    return np.where((m == 0)[..., None], points, out)


def encode_pair(pair, aux: AuxParams, cb: Codebook | None = None) -> int:
    return int(encode_pairs(np.asarray(pair, dtype=np.float64)[None, :], aux, cb)[0])


def decode_pair(code: int, aux: AuxParams, cb: Codebook | None = None) -> tuple[float, float]:
    x, y = decode_codes(np.array([code]), aux, cb)[0]
    return float(x), float(y)


def encode_tensor(W, aux: AuxParams, cb: Codebook | None = None) -> CodeMatrix:
    pf = W if isinstance(W, PairField) else pair_split(W)
    codes = encode_pairs(pf.flat(), aux, cb).reshape(pf.rows, -1)
    return CodeMatrix(codes=codes, max_code_bound=aux.code_bound)


def decode_tensor(
    cm: CodeMatrix, aux: AuxParams, shape: tuple[int, int], cb: Codebook | None = None
) -> np.ndarray:
    """Rebuild the ``shape`` matrix from its codes, dropping any pad column."""
    K, N = shape
    expected = (K, (N + 1) // 2)
    if tuple(cm.codes.shape) != expected:
        raise CorruptDataError(f"code matrix shape {cm.codes.shape} does not fit weight shape {shape}")
    if cm.max_code_bound != aux.code_bound:
        raise CorruptDataError(
            f"code bound {cm.max_code_bound} does not match aux bound {aux.code_bound}"
        )
    pairs = decode_codes(cm.codes, aux, cb)
    return pairs.reshape(K, -1)[:, :N]


def mae(W, W_hat) -> float:
    W = np.asarray(W, dtype=np.float64)
    W_hat = np.asarray(W_hat, dtype=np.float64)
    if W.shape != W_hat.shape:
        raise RejectedInputError(f"shape mismatch: {W.shape} vs {W_hat.shape}")
    if W.size == 0:
        return 0.0
    return float(np.mean(np.abs(W - W_hat)))


def inner_proportion(pf: PairField, stats: BoxStats, l: float) -> float:
    """Fraction of pairs lying inside the box of side ``l``."""
    pairs = pf.flat()
    if pairs.shape[0] == 0:
        raise RejectedInputError("empty pair field")
    return float(np.mean(distance(pairs, stats.centroid) <= l / 2))


def make_aux(W, l: float, U: int, M: int, kind=CodebookKind.GRID) -> AuxParams:
    """Convenience: split ``W``, compute its statistics and build AuxParams."""
    pf = W if isinstance(W, PairField) else pair_split(W)
    return AuxParams.create(compute_stats(pf), l, U, M, kind)
