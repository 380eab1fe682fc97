"""Dynamic sparse attention kernels with a FLOPs-targeted pattern search.

Sparse attention restricted to triangular, vertical-slash, or block-sparse
index structures, a per-head search that sizes patterns to a compute budget
and picks the one closest to dense attention, a prefill/decode runtime, and
a benchmark harness that locates the latency crossover against dense.
"""

from .core import (
    AttnMatrices,
    DimensionError,
    EmptyRowError,
    MacCounter,
    NonFiniteError,
    SparseAttnError,
    dense_attention,
    frob_norm_diff,
    softmax_row,
)
from .patterns import (
    BlockSparse,
    PatternParamError,
    SparseIndex,
    SparsityPattern,
    Triangular,
    VerticalSlash,
    block_mean,
    block_sparse_attention,
    build_block_index,
    build_index,
    build_triangular_index,
    build_vertical_slash_index,
    pattern_label,
    realized_size,
    score_columns,
    score_diagonals,
    sparse_attention,
    vertical_slash_attention,
)
from .search import (
    DEFAULT_FAMILIES,
    DENSE_EVAL_CAP,
    FlopsEstimate,
    RefinedCandidate,
    SearchError,
    SearchResult,
    SearchSpace,
    default_search_space,
    estimate_flops,
    nominal_positions,
    refine_candidate,
    refine_search_space,
    select_pattern,
    select_pattern_windowed,
)
from .runtime import (
    CacheOverflowError,
    DecodeResult,
    HeadPlan,
    KvCache,
    ModelConfig,
    PrefillResult,
    decode_step,
    prefill,
)
from .bench import (
    BenchConfigError,
    BenchRecord,
    METHODS,
    MethodThreshold,
    ThresholdReport,
    attention_io_bytes,
    emit_report,
    estimate_attention_memory,
    find_threshold,
    fixed_pattern_for,
    parse_config,
    parse_report_csv,
    run_sweep,
    synth_qkv,
)
from .tensorio import FORMAT_VERSION, TensorFormatError, read_tensor, write_tensor

__version__ = "0.1.0"
