"""Data-free compression of neural-network weights by pairwise codebook indexing.

Weight matrices are split into adjacent pairs; each pair becomes one integer
code naming a point of a small 2-D codebook plus an outlier category that
rescales it.  Codes are bit-packed into ``.bhc`` containers and can be
multiplied against directly with :func:`fused_gemm`.
"""

from .codec import (
    AuxParams,
    BoxStats,
    Codebook,
    CodebookKind,
    CodeMatrix,
    PairField,
    build_codebook,
    compute_stats,
    decode_pair,
    decode_tensor,
    encode_pair,
    encode_tensor,
    inner_proportion,
    mae,
    make_aux,
    pair_split,
)
from .container import (
    Container,
    EligibilityPolicy,
    EntryKind,
    TensorEntry,
    eligibility,
    read_container,
    write_container,
)
from .errors import BirkhoffError, CorruptDataError, ParameterError, RejectedInputError, SearchError
from .hyperlinear import BlockConfig, FusedOperand, decode_block, fused_gemm, hyperlinear, reference_gemm
from .packing import PackedPayload, pack_codes, unpack_codes
from .pipeline import compress_file, compress_tensors, decompress, decompress_file, verify
from .presets import get_preset, load_presets
from .safetensors_io import TensorData, emit_safetensors, ingest_safetensors
from .search import SearchResult, SearchSpace, grid_search

__version__ = "0.1.0"
