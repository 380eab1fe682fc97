"""Dense causal attention reference and shared numerics.

Everything here is a pure function over immutable numpy arrays. Operations
preserve the floating dtype of their inputs: run float64 for oracle-grade
comparisons, float32 for the performance path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SparseAttnError",
    "DimensionError",
    "NonFiniteError",
    "EmptyRowError",
    "AttnMatrices",
    "MacCounter",
    "dense_attention",
    "softmax_row",
    "frob_norm_diff",
]

# Row-chunk size for applying the causal mask without materializing an N x N
# boolean matrix alongside the logits.
_MASK_CHUNK = 1024


class SparseAttnError(Exception):
    """Base class for all errors raised by this library."""


class DimensionError(SparseAttnError):
    """Array shapes disagree with the documented contract."""


class NonFiniteError(SparseAttnError):
    """An input tensor contains NaN or Inf."""


class EmptyRowError(SparseAttnError):
    """A softmax row has no included positions."""


@dataclass(frozen=True)
class AttnMatrices:
    """Per-head attention inputs: q, k, v of shape (n, d_head), plus causal flag.

    All three matrices must share one shape, have n >= 1 and d_head >= 1,
    and contain only finite values.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    causal: bool = True

    def __post_init__(self) -> None:
        for name, x in (("q", self.q), ("k", self.k), ("v", self.v)):
            if not isinstance(x, np.ndarray) or x.ndim != 2:
                raise DimensionError(f"{name} must be a 2-d array, got {getattr(x, 'shape', type(x))}")
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise DimensionError(
                f"q/k/v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}"
            )
        n, d = self.q.shape
        if n < 1 or d < 1:
            raise DimensionError(f"need n >= 1 and d_head >= 1, got shape {(n, d)}")
        for name, x in (("q", self.q), ("k", self.k), ("v", self.v)):
            if not np.isfinite(x).all():
                raise NonFiniteError(f"{name} contains NaN or Inf")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def d_head(self) -> int:
        return self.q.shape[1]

    @property
    def scale(self) -> float:
        """Logit scaling factor 1/sqrt(d_head)."""
        return 1.0 / math.sqrt(self.d_head)


@dataclass
class MacCounter:
    """Tallies multiply-accumulate work as operations execute.

    Kernels and scoring passes increment these fields with the realized
    (deduplicated) work they perform; used to calibrate the analytic
    FLOPs model against actual counts.
    """

    scoring_macs: int = 0
    logit_macs: int = 0
    output_macs: int = 0

    @property
    def total(self) -> int:
        return self.scoring_macs + self.logit_macs + self.output_macs

    def reset(self) -> None:
        self.scoring_macs = 0
        self.logit_macs = 0
        self.output_macs = 0


def apply_causal_neg_inf(logits: np.ndarray) -> None:
    """Set logits[i, j] = -inf for j > i, in place, in bounded row chunks."""
    n_rows, n_cols = logits.shape
    cols = np.arange(n_cols)
    for r0 in range(0, n_rows, _MASK_CHUNK):
        r1 = min(r0 + _MASK_CHUNK, n_rows)
        rows = np.arange(r0, r1)
        logits[r0:r1][cols[None, :] > rows[:, None]] = -np.inf


def softmax_rows_inplace(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted row softmax, in place. -inf entries become exact 0.

    Raises EmptyRowError if any row is entirely -inf.
    """
    mx = logits.max(axis=1, keepdims=True)
    if np.isneginf(mx).any():
        raise EmptyRowError("empty attention row")
    np.subtract(logits, mx, out=logits)
    np.exp(logits, out=logits)
    s = logits.sum(axis=1, keepdims=True)
    logits /= s
    return logits


def dense_attention(
    m: AttnMatrices, *, need_weights: bool = True
) -> tuple[np.ndarray | None, np.ndarray]:
    """Reference attention: row softmax of (q @ k.T) / sqrt(d_head), then @ v.

    When causal, positions j > i are set to -inf before the softmax.
    Returns (weights, output); pass need_weights=False to skip returning the
    n x n weight matrix (it is still materialized transiently - that transient
    is the quadratic memory cost of the dense path).
    """
    logits = m.q @ m.k.T
    logits *= m.scale
    if m.causal:
        apply_causal_neg_inf(logits)
    weights = softmax_rows_inplace(logits)
    out = weights @ m.v
    return (weights if need_weights else None), out


def softmax_row(logits, excluded=frozenset()) -> np.ndarray:
    """Stable softmax over one row with some positions excluded.

    Excluded positions are exactly 0 in the result; the remaining entries are
    max-subtracted exponentials normalized to sum 1. Computed in float64.
    """
    x = np.asarray(logits, dtype=np.float64).ravel()
    keep = np.ones(x.shape[0], dtype=bool)
    if excluded:
        idx = np.fromiter(excluded, dtype=np.intp)
        if idx.min() < 0 or idx.max() >= x.shape[0]:
            raise DimensionError("excluded position out of range")
        keep[idx] = False
    if not keep.any():
        raise EmptyRowError("empty attention row")
    out = np.zeros(x.shape[0], dtype=np.float64)
    vals = x[keep]
    vals = np.exp(vals - vals.max())
    out[keep] = vals / vals.sum()
    return out


def frob_norm_diff(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius norm of (a - b), accumulated in float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64, copy=False) - b.astype(np.float64, copy=False)
    return float(np.linalg.norm(diff))
