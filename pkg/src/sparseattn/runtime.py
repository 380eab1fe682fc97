"""Multi-head attention runtime: batched prefill and single-token decode.

The runtime consumes pre-projected per-head q/k/v tensors of shape
(batch, n_heads, length, d_head); projections, embeddings, and weights are
out of scope. Prefill runs one attention pass per (sequence, head) - dense,
a fixed sparse pattern, or a per-head pattern chosen at runtime - and fills
the key/value cache. Decode appends one token and computes a single dense
attention row per head against the cache (a lone row is already linear cost,
so sparsifying it would only add overhead).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .core import AttnMatrices, DimensionError, SparseAttnError, dense_attention
from .patterns import SparsityPattern, build_index, sparse_attention
from .search import DENSE_EVAL_CAP, SearchResult, SearchSpace, default_search_space, select_pattern_windowed

__all__ = [
    "CacheOverflowError",
    "ModelConfig",
    "KvCache",
    "HeadPlan",
    "PrefillResult",
    "DecodeResult",
    "prefill",
    "decode_step",
]


class CacheOverflowError(SparseAttnError):
    """Appending would exceed the configured maximum context."""


@dataclass(frozen=True)
class ModelConfig:
    """Head layout: d_model must equal n_heads * d_head exactly."""

    n_heads: int
    d_model: int
    d_head: int
    max_context: int

    def __post_init__(self) -> None:
        if min(self.n_heads, self.d_model, self.d_head, self.max_context) < 1:
            raise DimensionError("all ModelConfig fields must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise DimensionError(
                f"d_model={self.d_model} != n_heads*d_head={self.n_heads * self.d_head}"
            )


class KvCache:
    """Append-only per-head key/value rows for a batch of sequences."""

    def __init__(self, batch: int, n_heads: int, d_head: int, capacity: int, dtype=np.float32):
        self._k = np.zeros((batch, n_heads, capacity, d_head), dtype=dtype)
        self._v = np.zeros((batch, n_heads, capacity, d_head), dtype=dtype)
        self.length = 0

    @property
    def capacity(self) -> int:
        return self._k.shape[2]

    def append(self, k_rows: np.ndarray, v_rows: np.ndarray) -> None:
        """Append (batch, n_heads, t, d_head) rows to both caches."""
        if k_rows.shape != v_rows.shape:
            raise DimensionError(f"key/value shapes differ: {k_rows.shape} vs {v_rows.shape}")
        if k_rows.shape[:2] != self._k.shape[:2] or k_rows.shape[3] != self._k.shape[3]:
            raise DimensionError(
                f"rows shaped {k_rows.shape} do not fit cache {self._k.shape}"
            )
        t = k_rows.shape[2]
        if self.length + t > self.capacity:
            raise CacheOverflowError(
                f"cache of capacity {self.capacity} cannot hold {self.length + t} rows"
            )
        self._k[:, :, self.length : self.length + t] = k_rows
        self._v[:, :, self.length : self.length + t] = v_rows
        self.length += t

    def keys(self) -> np.ndarray:
        return self._k[:, :, : self.length]

    def values(self) -> np.ndarray:
        return self._v[:, :, : self.length]


@dataclass(frozen=True)
class HeadPlan:
    """Per-head execution choice: a sparse pattern or dense fallback (None)."""

    head: int
    pattern: SparsityPattern | None
    search: SearchResult | None = None


@dataclass
class PrefillResult:
    outputs: np.ndarray  # (batch, length, d_model)
    cache: KvCache
    plans: list[list[HeadPlan]]  # [batch][head]
    elapsed_s: float  # selection + index building + kernels
    select_s: float
    kernel_s: float


@dataclass
class DecodeResult:
    output: np.ndarray  # (batch, 1, d_model)
    cache: KvCache
    elapsed_s: float


def _check_qkv(q: np.ndarray, k: np.ndarray, v: np.ndarray, cfg: ModelConfig) -> tuple[int, int]:
    for name, x in (("q", q), ("k", k), ("v", v)):
        if x.ndim != 4:
            raise DimensionError(f"{name} must be (batch, n_heads, length, d_head), got {x.shape}")
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    batch, heads, length, d_head = q.shape
    if heads != cfg.n_heads or d_head != cfg.d_head:
        raise DimensionError(
            f"inputs have (heads, d_head)=({heads}, {d_head}), "
            f"config expects ({cfg.n_heads}, {cfg.d_head})"
        )
    return batch, length


def prefill(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    cfg: ModelConfig,
    search: SearchSpace | None = None,
    mode: str = "dense",
    *,
    fixed_pattern: SparsityPattern | None = None,
    cal_window: int = 64,
    q_est: int = 64,
    dense_cap: int = DENSE_EVAL_CAP,
) -> PrefillResult:
    """Process all prompt tokens at once; the TTFT analog is elapsed_s.

    mode "dense" runs the reference kernel per head; "fixed" realizes
    fixed_pattern on every head; "auto" picks a pattern per head with the
    windowed search (on the trailing cal_window tokens, exact scoring) and
    then runs that head's kernel. Sparse indices for fixed/auto are built
    with estimated scoring over the last min(q_est, L) query rows.
    """
    batch, length = _check_qkv(q, k, v, cfg)
    if length > cfg.max_context:
        raise DimensionError(f"length {length} exceeds max_context {cfg.max_context}")
    if mode not in ("dense", "auto", "fixed"):
        raise SparseAttnError(f"unknown prefill mode {mode!r}")
    if mode == "fixed" and fixed_pattern is None:
        raise SparseAttnError("mode 'fixed' requires fixed_pattern")

    t0 = time.perf_counter()
    outputs = np.empty((batch, length, cfg.d_model), dtype=q.dtype)
    cache = KvCache(batch, cfg.n_heads, cfg.d_head, cfg.max_context, dtype=q.dtype)
    plans: list[list[HeadPlan]] = []
    select_s = 0.0
    kernel_s = 0.0
    cal = min(cal_window, length)
    eff_q_est = min(q_est, length)
    if mode == "auto" and search is None:
        search = default_search_space(cal, cfg.d_head)

    for b in range(batch):
        row_plans: list[HeadPlan] = []
        for h in range(cfg.n_heads):
            m = AttnMatrices(q[b, h], k[b, h], v[b, h], causal=True)
            pattern: SparsityPattern | None = None
            result: SearchResult | None = None
            if mode == "auto":
                ts = time.perf_counter()
                result = select_pattern_windowed(m, search, cal, dense_cap=dense_cap)
                select_s += time.perf_counter() - ts
                pattern = result.chosen
            elif mode == "fixed":
                pattern = fixed_pattern
            tk = time.perf_counter()
            if pattern is None:
                _, y = dense_attention(m, need_weights=False)
            else:
                idx = build_index(m, pattern, mode="estimated", q_est=eff_q_est)
                _, y = sparse_attention(m, idx, need_weights=False)
            kernel_s += time.perf_counter() - tk
            outputs[b, :, h * cfg.d_head : (h + 1) * cfg.d_head] = y
            row_plans.append(HeadPlan(head=h, pattern=pattern, search=result))
        plans.append(row_plans)
    cache.append(k, v)
    elapsed = time.perf_counter() - t0
    return PrefillResult(
        outputs=outputs,
        cache=cache,
        plans=plans,
        elapsed_s=elapsed,
        select_s=select_s,
        kernel_s=kernel_s,
    )


def decode_step(
    q_new: np.ndarray,
    k_new: np.ndarray,
    v_new: np.ndarray,
    cache: KvCache,
    cfg: ModelConfig,
) -> DecodeResult:
    """Append one token's k/v and attend its query over the whole cache.

    The ITL analog is elapsed_s. The new token attends to itself plus every
    cached position; a single row needs no causal mask.
    """
    batch, length = _check_qkv(q_new, k_new, v_new, cfg)
    if length != 1:
        raise DimensionError(f"decode consumes exactly one token, got length {length}")
    if cache.length < 1:
        raise SparseAttnError("decode requires a non-empty cache; run prefill first")

    t0 = time.perf_counter()
    cache.append(k_new, v_new)
    keys = cache.keys()
    values = cache.values()
    scale = 1.0 / np.sqrt(cfg.d_head)
    output = np.empty((batch, 1, cfg.d_model), dtype=q_new.dtype)
    for b in range(batch):
        logits = np.einsum("hd,hld->hl", q_new[b, :, 0, :], keys[b])
        logits *= scale
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=1, keepdims=True)
        y = np.einsum("hl,hld->hd", logits, values[b])
        output[b, 0] = y.reshape(cfg.d_model)
    elapsed = time.perf_counter() - t0
    return DecodeResult(output=output, cache=cache, elapsed_s=elapsed)
