"""Sparsity pattern families, index construction, and sparse attention kernels.

Three families are supported:

* triangular     - a causal local band of fixed width plus optional global
                   sink columns; data-independent.
* vertical-slash - the top-k_v attention columns plus the top-k_s diagonals,
                   scored from (a tail estimate of) the dense weights.
* block-sparse   - top-k_b key blocks per query block, scored from block-mean
                   pooled attention.

An index realizes a pattern against a concrete input as a structural set of
causal (row, col) positions; kernels evaluate logits only at those positions.
The main diagonal is always forced in so every softmax row is non-empty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .core import (
    AttnMatrices,
    DimensionError,
    EmptyRowError,
    MacCounter,
    SparseAttnError,
    softmax_rows_inplace,
)

__all__ = [
    "PatternParamError",
    "Triangular",
    "VerticalSlash",
    "BlockSparse",
    "SparsityPattern",
    "SparseIndex",
    "pattern_label",
    "score_columns",
    "score_diagonals",
    "build_vertical_slash_index",
    "build_triangular_index",
    "build_block_index",
    "build_index",
    "block_mean",
    "vertical_slash_attention",
    "block_sparse_attention",
    "sparse_attention",
    "realized_size",
]


class PatternParamError(SparseAttnError):
    """A sparsity pattern or index parameter is out of its legal range."""


@dataclass(frozen=True)
class Triangular:
    """Causal band of width `window` plus `sinks` leading global columns."""

    window: int
    sinks: int = 0

    def __post_init__(self) -> None:
        if self.window < 1:
            raise PatternParamError(f"window must be >= 1, got {self.window}")
        if self.sinks < 0:
            raise PatternParamError(f"sinks must be >= 0, got {self.sinks}")


@dataclass(frozen=True)
class VerticalSlash:
    """Top k_v full attention columns plus top k_s diagonals."""

    k_v: int
    k_s: int

    def __post_init__(self) -> None:
        if self.k_v < 1 or self.k_s < 1:
            raise PatternParamError(f"k_v and k_s must be >= 1, got {self.k_v}, {self.k_s}")


@dataclass(frozen=True)
class BlockSparse:
    """Top k_b key blocks of side b per query block."""

    b: int
    k_b: int

    def __post_init__(self) -> None:
        if self.b < 1 or self.k_b < 1:
            raise PatternParamError(f"b and k_b must be >= 1, got {self.b}, {self.k_b}")


SparsityPattern = Union[Triangular, VerticalSlash, BlockSparse]


def pattern_label(p: SparsityPattern | None) -> str:
    """Compact, comma-free description for report cells."""
    if p is None:
        return "-"
    if isinstance(p, Triangular):
        return f"triangular(window={p.window} sinks={p.sinks})"
    if isinstance(p, VerticalSlash):
        return f"vertical-slash(kv={p.k_v} ks={p.k_s})"
    if isinstance(p, BlockSparse):
        return f"block-sparse(b={p.b} kb={p.k_b})"
    raise PatternParamError(f"unknown pattern {p!r}")


@dataclass(frozen=True)
class SparseIndex:
    """Realized causal attention positions, stored structurally.

    columns   - column ids j; position (i, j) for every row i >= j.
    diagonals - offsets o >= 0; position (i, i - o) for every row i >= o.
    blocks    - (query_block, key_block) pairs of side block_size, causal
                at block level (key_block <= query_block); token positions
                inside a block are intersected with j <= i.
    always_diagonal - the main diagonal (i, i) is forced in even when no
                column, diagonal, or block covers it.

    Column/diagonal structure and block structure are not mixed in one index.
    """

    n: int
    columns: tuple[int, ...] = ()
    diagonals: tuple[int, ...] = ()
    blocks: tuple[tuple[int, int], ...] = ()
    block_size: int = 0
    always_diagonal: bool = True

    def __post_init__(self) -> None:
        if self.n < 1:
            raise PatternParamError(f"index length must be >= 1, got {self.n}")
        if self.blocks and (self.columns or self.diagonals):
            raise PatternParamError("index mixes block and column/diagonal structure")
        for name, entries in (("columns", self.columns), ("diagonals", self.diagonals),
                              ("blocks", self.blocks)):
            if len(set(entries)) != len(entries):
                raise PatternParamError(f"duplicate entries in {name}")
        for c in self.columns:
            if not 0 <= c < self.n:
                raise PatternParamError(f"column {c} out of range for n={self.n}")
        for o in self.diagonals:
            if not 0 <= o < self.n:
                raise PatternParamError(f"diagonal offset {o} out of range for n={self.n}")
        if self.blocks:
            if self.block_size < 1:
                raise PatternParamError("block index requires block_size >= 1")
            nb = _num_blocks(self.n, self.block_size)
            for gq, gk in self.blocks:
                if not 0 <= gq < nb or not 0 <= gk < nb:
                    raise PatternParamError(f"block pair {(gq, gk)} out of range")
                if gk > gq:
                    raise PatternParamError(f"block pair {(gq, gk)} violates causality")


def _num_blocks(n: int, b: int) -> int:
    return -(-n // b)


def _tail_weights(m: AttnMatrices, rows: int, counter: MacCounter | None):
    """Dense causal softmax weights for the last `rows` query rows.

    Returns (weights, row_offset) with weights of shape (rows, n) and global
    row index = row_offset + local row.
    """
    n, d = m.n, m.d_head
    off = n - rows
    logits = m.q[off:] @ m.k.T
    logits *= m.scale
    cols = np.arange(n)
    logits[cols[None, :] > (off + np.arange(rows))[:, None]] = -np.inf
    if counter is not None:
        counter.scoring_macs += rows * n * d
    return softmax_rows_inplace(logits), off


def _check_scoring_args(m: AttnMatrices, mode: str, q_est: int) -> int:
    if mode not in ("exact", "estimated"):
        raise PatternParamError(f"scoring mode must be 'exact' or 'estimated', got {mode!r}")
    if mode == "estimated":
        if not 1 <= q_est <= m.n:
            raise PatternParamError(f"q_est must be in [1, {m.n}], got {q_est}")
        return q_est
    return m.n


def _column_scores(weights: np.ndarray) -> np.ndarray:
    return weights.sum(axis=0, dtype=np.float64)


def _diagonal_scores(weights: np.ndarray, off: int, n: int) -> np.ndarray:
    rows = weights.shape[0]
    offsets = (off + np.arange(rows))[:, None] - np.arange(n)[None, :]
    valid = offsets >= 0
    return np.bincount(
        offsets[valid].ravel(), weights=weights[valid].ravel().astype(np.float64), minlength=n
    )


def score_columns(
    m: AttnMatrices, mode: str = "exact", q_est: int = 64, counter: MacCounter | None = None
) -> np.ndarray:
    """Per-column attention mass: sum of dense causal weights over query rows.

    Estimated mode restricts the sum to the last q_est query rows, which keeps
    the scoring pass linear in n at large context.
    """
    rows = _check_scoring_args(m, mode, q_est)
    weights, _ = _tail_weights(m, rows, counter)
    return _column_scores(weights)


def score_diagonals(
    m: AttnMatrices, mode: str = "exact", q_est: int = 64, counter: MacCounter | None = None
) -> np.ndarray:
    """Per-offset attention mass: score[o] sums weights at positions (i, i-o).

    Only causal offsets o >= 0 exist; estimated mode restricts to the last
    q_est query rows.
    """
    rows = _check_scoring_args(m, mode, q_est)
    weights, off = _tail_weights(m, rows, counter)
    return _diagonal_scores(weights, off, m.n)


def _top_k_stable(scores: np.ndarray, k: int) -> tuple[int, ...]:
    # Stable sort on negated scores: ties resolve to the lower index.
    order = np.argsort(-scores, kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def build_vertical_slash_index(
    m: AttnMatrices,
    k_v: int,
    k_s: int,
    mode: str = "exact",
    q_est: int = 64,
    counter: MacCounter | None = None,
) -> SparseIndex:
    """Select the top-k_v columns and top-k_s diagonals by attention mass.

    Offset 0 consumes one of the k_s slots when it wins on merit; otherwise
    the main diagonal is forced in without consuming budget.
    """
    n = m.n
    if not 1 <= k_v <= n:
        raise PatternParamError(f"k_v must be in [1, {n}], got {k_v}")
    if not 1 <= k_s <= n:
        raise PatternParamError(f"k_s must be in [1, {n}], got {k_s}")
    rows = _check_scoring_args(m, mode, q_est)
    weights, off = _tail_weights(m, rows, counter)  # one pass feeds both scores
    cols = _top_k_stable(_column_scores(weights), k_v)
    offs = _top_k_stable(_diagonal_scores(weights, off, n), k_s)
    return SparseIndex(n=n, columns=cols, diagonals=offs, always_diagonal=True)


def build_triangular_index(n: int, window: int, sinks: int) -> SparseIndex:
    """Causal band of width `window` plus `sinks` leading columns.

    Row i covers columns max(0, i-window+1)..i and columns 0..sinks-1.
    """
    if not 1 <= window <= n:
        raise PatternParamError(f"window must be in [1, {n}], got {window}")
    if not 0 <= sinks <= n:
        raise PatternParamError(f"sinks must be in [0, {n}], got {sinks}")
    return SparseIndex(
        n=n,
        columns=tuple(range(sinks)),
        diagonals=tuple(range(window)),
        always_diagonal=True,
    )


def block_mean(x: np.ndarray, b: int) -> np.ndarray:
    """Mean-pool rows in groups of b; a final partial block averages its true length."""
    if b < 1:
        raise PatternParamError(f"block side must be >= 1, got {b}")
    n = x.shape[0]
    starts = np.arange(0, n, b)
    sums = np.add.reduceat(x, starts, axis=0)
    counts = np.minimum(b, n - starts).astype(x.dtype)
    return sums / counts[:, None]


def build_block_index(
    m: AttnMatrices, b: int, k_b: int, counter: MacCounter | None = None
) -> SparseIndex:
    """Select the top-k_b causal key blocks per query block by pooled attention.

    Block-level causality admits key block g_k iff g_k <= g_q. The diagonal
    block consumes a slot when selected on merit and is forced in otherwise.
    """
    n, d = m.n, m.d_head
    if not 1 <= b <= n:
        raise PatternParamError(f"b must be in [1, {n}], got {b}")
    nb = _num_blocks(n, b)
    if not 1 <= k_b <= nb:
        raise PatternParamError(f"k_b must be in [1, {nb}], got {k_b}")

    qb = block_mean(m.q, b)
    kb = block_mean(m.k, b)
    logits = qb @ kb.T
    logits *= m.scale
    gk = np.arange(nb)
    logits[gk[None, :] > gk[:, None]] = -np.inf
    block_weights = softmax_rows_inplace(logits)
    if counter is not None:
        counter.scoring_macs += 2 * n * d + nb * nb * d

    blocks: list[tuple[int, int]] = []
    for gq in range(nb):
        k_eff = min(k_b, gq + 1)
        chosen = set(_top_k_stable(block_weights[gq, : gq + 1], k_eff))
        chosen.add(gq)  # forced diagonal block, free of budget when not selected
        blocks.extend((gq, g) for g in sorted(chosen))
    return SparseIndex(n=n, blocks=tuple(blocks), block_size=b, always_diagonal=True)


def build_index(
    m: AttnMatrices,
    pattern: SparsityPattern,
    mode: str = "estimated",
    q_est: int = 64,
    counter: MacCounter | None = None,
) -> SparseIndex:
    """Realize any pattern family against an input."""
    if isinstance(pattern, Triangular):
        window = min(pattern.window, m.n)
        sinks = min(pattern.sinks, m.n)
        return build_triangular_index(m.n, window, sinks)
    if isinstance(pattern, VerticalSlash):
        return build_vertical_slash_index(
            m, min(pattern.k_v, m.n), min(pattern.k_s, m.n), mode, min(q_est, m.n), counter
        )
    if isinstance(pattern, BlockSparse):
        b = min(pattern.b, m.n)
        return build_block_index(m, b, min(pattern.k_b, _num_blocks(m.n, b)), counter)
    raise PatternParamError(f"unknown pattern {pattern!r}")


def _check_kernel_inputs(m: AttnMatrices, idx: SparseIndex) -> None:
    if not m.causal:
        raise PatternParamError("sparse kernels require causal attention")
    if idx.n != m.n:
        raise DimensionError(f"index realized for n={idx.n}, input has n={m.n}")


def vertical_slash_attention(
    m: AttnMatrices,
    idx: SparseIndex,
    *,
    need_weights: bool = True,
    counter: MacCounter | None = None,
) -> tuple[np.ndarray | None, np.ndarray]:
    """Sparse attention over a column/diagonal index.

    Logits are evaluated only at realized positions: one GEMM covers the
    selected columns, one row-wise dot per selected diagonal covers the rest.
    Positions covered by both a column and a diagonal are evaluated once
    (the column copy wins). Weights off the index are exactly 0.
    """
    _check_kernel_inputs(m, idx)
    if idx.blocks:
        raise PatternParamError("block index passed to the vertical-slash kernel")
    n, d = m.n, m.d_head
    dtype = m.q.dtype

    cols = np.fromiter(idx.columns, dtype=np.intp, count=len(idx.columns))
    offs = np.fromiter(idx.diagonals, dtype=np.intp, count=len(idx.diagonals))
    kc, ks = cols.size, offs.size
    colmask = np.zeros(n, dtype=bool)
    colmask[cols] = True
    forced = idx.always_diagonal and 0 not in idx.diagonals
    width = kc + ks + (1 if forced else 0)
    if width == 0:
        raise EmptyRowError("empty attention row")

    logits = np.full((n, width), -np.inf, dtype=dtype)
    positions = 0
    rows = np.arange(n)

    if kc:
        logits[:, :kc] = m.q @ m.k[cols].T
        below = cols[None, :] <= rows[:, None]
        logits[:, :kc][~below] = -np.inf
        positions += int(below.sum())
    for j in range(ks):
        o = int(offs[j])
        # Row i >= o hits (i, i - o); entries i - o land on 0..n-o-1, so a
        # plain slice of colmask flags duplicates against selected columns.
        vals = np.einsum("nd,nd->n", m.q[o:], m.k[: n - o])
        dup = colmask[: n - o]
        vals[dup] = -np.inf
        logits[o:, kc + j] = vals
        positions += (n - o) - int(dup.sum())
    if forced:
        vals = np.einsum("nd,nd->n", m.q, m.k)
        vals[colmask] = -np.inf
        logits[:, -1] = vals
        positions += n - int(colmask.sum())

    logits *= m.scale  # -inf entries stay -inf under a positive scale
    weights = softmax_rows_inplace(logits)
    if counter is not None:
        counter.logit_macs += positions * d
        counter.output_macs += positions * d

    out = np.zeros((n, d), dtype=dtype)
    if kc:
        out += weights[:, :kc] @ m.v[cols]
    for j in range(ks):
        o = int(offs[j])
        out[o:] += weights[o:, kc + j, None] * m.v[: n - o]
    if forced:
        out += weights[:, -1, None] * m.v

    dense_w = None
    if need_weights:
        dense_w = np.zeros((n, n), dtype=dtype)
        if kc:
            dense_w[:, cols] = weights[:, :kc]
        for j in range(ks):
            o = int(offs[j])
            keep = ~colmask[: n - o]
            rr = rows[o:][keep]
            dense_w[rr, rr - o] = weights[o:, kc + j][keep]
        if forced:
            keep = ~colmask
            dense_w[rows[keep], rows[keep]] = weights[keep, -1]
    return dense_w, out


def block_sparse_attention(
    m: AttnMatrices,
    idx: SparseIndex,
    *,
    need_weights: bool = True,
    counter: MacCounter | None = None,
) -> tuple[np.ndarray | None, np.ndarray]:
    """Sparse attention over a block index: one tile GEMM per query block.

    Token-level causality (j <= i) is re-applied inside selected blocks.
    """
    _check_kernel_inputs(m, idx)
    if idx.columns or idx.diagonals:
        raise PatternParamError("column/diagonal index passed to the block-sparse kernel")
    if not idx.blocks:
        raise EmptyRowError("empty attention row")
    n, d = m.n, m.d_head
    b = idx.block_size
    dtype = m.q.dtype

    by_row: dict[int, list[int]] = {}
    for gq, gk in idx.blocks:
        by_row.setdefault(gq, []).append(gk)

    out = np.zeros((n, d), dtype=dtype)
    dense_w = np.zeros((n, n), dtype=dtype) if need_weights else None
    positions = 0
    for gq in range(_num_blocks(n, b)):
        sel = by_row.get(gq)
        if sel is None:
            raise EmptyRowError(f"query block {gq} has no selected key blocks")
        r0, r1 = gq * b, min((gq + 1) * b, n)
        col_list = [np.arange(g * b, min((g + 1) * b, n)) for g in sorted(sel)]
        cols = np.concatenate(col_list)
        logits = m.q[r0:r1] @ m.k[cols].T
        logits *= m.scale
        causal = cols[None, :] <= np.arange(r0, r1)[:, None]
        logits[~causal] = -np.inf
        weights = softmax_rows_inplace(logits)
        positions += int(causal.sum())
        out[r0:r1] = weights @ m.v[cols]
        if dense_w is not None:
            dense_w[np.arange(r0, r1)[:, None], cols[None, :]] = weights
    if counter is not None:
        counter.logit_macs += positions * d
        counter.output_macs += positions * d
    return dense_w, out


def sparse_attention(
    m: AttnMatrices,
    idx: SparseIndex,
    *,
    need_weights: bool = True,
    counter: MacCounter | None = None,
) -> tuple[np.ndarray | None, np.ndarray]:
    """Dispatch to the kernel matching the index structure."""
    if idx.blocks:
        return block_sparse_attention(m, idx, need_weights=need_weights, counter=counter)
    return vertical_slash_attention(m, idx, need_weights=need_weights, counter=counter)


def realized_size(idx: SparseIndex, n: int) -> int:
    """Exact count of distinct causal positions covered by the index."""
    if idx.n != n:
        raise DimensionError(f"index realized for n={idx.n}, asked about n={n}")
    if idx.blocks:
        total = 0
        for gq, gk in idx.blocks:
            rows = min(idx.block_size, n - gq * idx.block_size)
            if gk < gq:
                total += rows * min(idx.block_size, n - gk * idx.block_size)
            else:
                total += rows * (rows + 1) // 2
        return total
    cols = np.fromiter(idx.columns, dtype=np.int64, count=len(idx.columns))
    cols.sort()
    total = int((n - cols).sum()) if cols.size else 0
    for o in idx.diagonals:
        # Positions (i, i-o) whose column i-o is already selected are dups.
        total += (n - o) - int(np.searchsorted(cols, n - o, side="left"))
    if idx.always_diagonal and 0 not in idx.diagonals:
        total += n - cols.size
    return total
