"""FLOPs-targeted pattern search: size candidates to a budget, pick by error.

The search refines each candidate's size hyperparameters toward a target
multiply-accumulate budget, realizes every refined candidate against the
input, and returns the one whose weights are closest to dense attention in
Frobenius norm (an output-space metric is available behind `metric`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .core import AttnMatrices, MacCounter, SparseAttnError, dense_attention, frob_norm_diff
from .patterns import (
    BlockSparse,
    PatternParamError,
    SparsityPattern,
    Triangular,
    VerticalSlash,
    build_index,
    sparse_attention,
)

__all__ = [
    "SearchError",
    "FlopsEstimate",
    "SearchSpace",
    "RefinedCandidate",
    "SearchResult",
    "DEFAULT_FAMILIES",
    "DENSE_EVAL_CAP",
    "nominal_positions",
    "estimate_flops",
    "refine_candidate",
    "refine_search_space",
    "select_pattern",
    "select_pattern_windowed",
    "default_search_space",
]

# select_pattern materializes n x n dense weights; beyond this length the
# windowed variant is mandatory so selection itself stays sub-quadratic.
DENSE_EVAL_CAP = 4096


class SearchError(SparseAttnError):
    """Search configuration or preconditions are invalid."""


@dataclass(frozen=True)
class FlopsEstimate:
    """Predicted multiply-accumulate counts for a pattern at a given (n, d_head)."""

    scoring_macs: int
    logit_macs: int
    output_macs: int

    @property
    def total(self) -> int:
        return self.scoring_macs + self.logit_macs + self.output_macs


@dataclass
class SearchSpace:
    """Candidate patterns plus the budget they are refined toward."""

    candidates: list[SparsityPattern]
    target_flops: int
    epsilon: float = 0.05
    max_refine_iters: int = 8

    def __post_init__(self) -> None:
        if not self.candidates:
            raise SearchError("candidate list must be non-empty")
        if not 0.0 < self.epsilon < 1.0:
            raise SearchError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.max_refine_iters < 1:
            raise SearchError(f"max_refine_iters must be >= 1, got {self.max_refine_iters}")
        if self.target_flops < 1:
            raise SearchError(f"target_flops must be >= 1, got {self.target_flops}")


@dataclass(frozen=True)
class RefinedCandidate:
    pattern: SparsityPattern
    flops: int
    iterations: int
    converged: bool


@dataclass(frozen=True)
class SearchResult:
    """Winning pattern plus the budget bookkeeping behind the choice."""

    chosen: SparsityPattern
    realized_flops: int
    error: float
    iterations_used: int
    converged: bool


def nominal_positions(p: SparsityPattern, n: int) -> int:
    """Nominal realized-position count used by the cost and memory models.

    Triangular uses the plain band model n*(window+sinks); vertical-slash and
    block counts are capped at the causal triangle n(n+1)/2. This is an
    estimate of coverage, not an exact count: it ignores band truncation near
    the top rows and column/diagonal overlap.
    """
    cap = n * (n + 1) // 2
    if isinstance(p, Triangular):
        return n * (p.window + p.sinks)
    if isinstance(p, VerticalSlash):
        return min(n * (p.k_v + p.k_s), cap)
    if isinstance(p, BlockSparse):
        nb = -(-n // p.b)
        return min(p.k_b * p.b * p.b * nb, cap)
    raise PatternParamError(f"unknown pattern {p!r}")


def _validate_for_n(p: SparsityPattern, n: int) -> None:
    if isinstance(p, Triangular) and not (1 <= p.window <= n and 0 <= p.sinks <= n):
        raise PatternParamError(f"{p} invalid for n={n}")
    if isinstance(p, VerticalSlash) and not (1 <= p.k_v <= n and 1 <= p.k_s <= n):
        raise PatternParamError(f"{p} invalid for n={n}")
    if isinstance(p, BlockSparse):
        nb = -(-n // p.b)
        if not (1 <= p.b <= n and 1 <= p.k_b <= nb):
            raise PatternParamError(f"{p} invalid for n={n}")


def estimate_flops(p: SparsityPattern, n: int, d_h: int, q_est: int = 0) -> FlopsEstimate:
    """Analytic MAC model: scoring pass + logit and output work on the index.

    Scoring cost is the estimation pass only: q_est rows of tail scoring for
    vertical-slash (0 when running the exact fidelity path), mean-pooling plus
    block logits for block patterns, nothing for the data-independent
    triangular family.
    """
    _validate_for_n(p, n)
    pos = nominal_positions(p, n)
    if isinstance(p, VerticalSlash):
        scoring = q_est * n * d_h
    elif isinstance(p, BlockSparse):
        nb = -(-n // p.b)
        scoring = 2 * n * d_h + nb * nb * d_h
    else:
        scoring = 0
    return FlopsEstimate(scoring_macs=scoring, logit_macs=pos * d_h, output_macs=pos * d_h)


def _clamped(value: float, lo: int, hi: int) -> int:
    return max(lo, min(hi, int(round(value))))


def _scale_pattern(p: SparsityPattern, ratio: float, n: int) -> SparsityPattern:
    if isinstance(p, Triangular):
        return Triangular(
            window=_clamped(p.window * ratio, 1, n),
            sinks=_clamped(p.sinks * ratio, 0, n),
        )
    if isinstance(p, VerticalSlash):
        return VerticalSlash(
            k_v=_clamped(p.k_v * ratio, 1, n),
            k_s=_clamped(p.k_s * ratio, 1, n),
        )
    if isinstance(p, BlockSparse):
        nb = -(-n // p.b)
        return BlockSparse(b=p.b, k_b=_clamped(p.k_b * ratio, 1, nb))
    raise PatternParamError(f"unknown pattern {p!r}")


def refine_candidate(
    p: SparsityPattern,
    n: int,
    d_h: int,
    target: int,
    epsilon: float,
    max_iters: int,
    q_est: int = 0,
) -> RefinedCandidate:
    """Scale size hyperparameters multiplicatively toward the FLOPs target.

    Runs at most max_iters adjustments; a candidate pinned at a legal bound is
    returned with converged=False rather than looping forever.
    """
    cur = p
    est = estimate_flops(cur, n, d_h, q_est).total
    iters = 0
    while abs(est - target) > epsilon * target and iters < max_iters:
        cur = _scale_pattern(cur, target / est, n)
        est = estimate_flops(cur, n, d_h, q_est).total
        iters += 1
    return RefinedCandidate(
        pattern=cur, flops=est, iterations=iters, converged=abs(est - target) <= epsilon * target
    )


def refine_search_space(s: SearchSpace, n: int, d_h: int, q_est: int = 0) -> SearchSpace:
    """Refine every candidate toward the space's target; budgets unchanged."""
    refined = [
        refine_candidate(c, n, d_h, s.target_flops, s.epsilon, s.max_refine_iters, q_est)
        for c in s.candidates
    ]
    return replace(s, candidates=[rc.pattern for rc in refined])


def select_pattern(
    m: AttnMatrices,
    s: SearchSpace,
    *,
    metric: str = "weights",
    scoring: str = "exact",
    q_est: int = 64,
    dense_cap: int = DENSE_EVAL_CAP,
    counter: MacCounter | None = None,
) -> SearchResult:
    """Refine candidates, realize each, and return the one closest to dense.

    The error metric defaults to the Frobenius distance between weight
    matrices; metric="output" compares attention outputs instead. Ties go to
    the earlier candidate. Requires n <= dense_cap because the dense reference
    weights are materialized.
    """
    if metric not in ("weights", "output"):
        raise SearchError(f"metric must be 'weights' or 'output', got {metric!r}")
    if not s.candidates:
        raise SearchError("candidate list must be non-empty")
    if m.n > dense_cap:
        raise SearchError(
            f"n={m.n} exceeds the dense evaluation cap {dense_cap}; "
            "use select_pattern_windowed"
        )
    cost_q_est = 0 if scoring == "exact" else min(q_est, m.n)
    refined = [
        refine_candidate(
            c, m.n, m.d_head, s.target_flops, s.epsilon, s.max_refine_iters, cost_q_est
        )
        for c in s.candidates
    ]
    dense_w, dense_y = dense_attention(m)
    best: RefinedCandidate | None = None
    best_err = math.inf
    for rc in refined:
        idx = build_index(m, rc.pattern, mode=scoring, q_est=q_est, counter=counter)
        w, y = sparse_attention(m, idx, counter=counter)
        err = frob_norm_diff(w, dense_w) if metric == "weights" else frob_norm_diff(y, dense_y)
        if err < best_err:
            best, best_err = rc, err
    assert best is not None
    return SearchResult(
        chosen=best.pattern,
        realized_flops=best.flops,
        error=best_err,
        iterations_used=best.iterations,
        converged=best.converged,
    )


def _rescale_to_full(p: SparsityPattern, factor: float, n: int) -> SparsityPattern:
    # Window-relative sizes scale with n; block geometry is kept as chosen.
    if isinstance(p, Triangular):
        return Triangular(
            window=_clamped(p.window * factor, 1, n),
            sinks=_clamped(p.sinks * factor, 0, n),
        )
    if isinstance(p, VerticalSlash):
        return VerticalSlash(
            k_v=_clamped(p.k_v * factor, 1, n),
            k_s=_clamped(p.k_s * factor, 1, n),
        )
    return p


def select_pattern_windowed(
    m: AttnMatrices,
    s: SearchSpace,
    cal_window: int,
    *,
    metric: str = "weights",
    scoring: str = "exact",
    q_est: int = 64,
    dense_cap: int = DENSE_EVAL_CAP,
    counter: MacCounter | None = None,
) -> SearchResult:
    """Run selection on the trailing cal_window sub-problem, rescale to full n.

    The search space applies at window scale. The chosen pattern's
    window-relative sizes (window, sinks, k_v, k_s) are scaled by
    n/cal_window; block size and count carry over unchanged. The reported
    error is the one measured at window scale; realized_flops is re-estimated
    for the rescaled pattern at full n.
    """
    if not 1 <= cal_window <= m.n:
        raise SearchError(f"cal_window must be in [1, {m.n}], got {cal_window}")
    if cal_window > dense_cap:
        raise SearchError(f"cal_window {cal_window} exceeds the dense evaluation cap {dense_cap}")
    if cal_window == m.n:
        return select_pattern(
            m, s, metric=metric, scoring=scoring, q_est=q_est, dense_cap=dense_cap,
            counter=counter,
        )
    sub = AttnMatrices(
        m.q[-cal_window:], m.k[-cal_window:], m.v[-cal_window:], causal=m.causal
    )
    res = select_pattern(
        sub, s, metric=metric, scoring=scoring, q_est=min(q_est, cal_window),
        dense_cap=dense_cap, counter=counter,
    )
    full = _rescale_to_full(res.chosen, m.n / cal_window, m.n)
    cost_q_est = 0 if scoring == "exact" else min(q_est, m.n)
    return SearchResult(
        chosen=full,
        realized_flops=estimate_flops(full, m.n, m.d_head, cost_q_est).total,
        error=res.error,
        iterations_used=res.iterations_used,
        converged=res.converged,
    )


DEFAULT_FAMILIES = ("triangular", "vertical-slash", "block-sparse")


def default_search_space(
    n: int,
    d_h: int,
    density: float = 0.1,
    epsilon: float = 0.05,
    max_refine_iters: int = 8,
    families: tuple[str, ...] = DEFAULT_FAMILIES,
) -> SearchSpace:
    """One candidate per requested family at the given nominal density."""
    if not 0.0 < density <= 1.0:
        raise SearchError(f"density must be in (0, 1], got {density}")
    # Keep at least ~8 blocks in range so the block candidate never collapses
    # to full coverage at calibration scale (which would win with error 0
    # regardless of the input).
    b = max(1, min(64, n // 8))
    nb = -(-n // b)
    by_family: dict[str, SparsityPattern] = {
        "triangular": Triangular(window=max(1, round(density * n)), sinks=0),
        "vertical-slash": VerticalSlash(
            k_v=max(1, round(density * n / 2)), k_s=max(1, round(density * n / 2))
        ),
        "block-sparse": BlockSparse(b=b, k_b=max(1, min(nb, round(density * nb)))),
    }
    unknown = [f for f in families if f not in by_family]
    if unknown:
        raise SearchError(f"unknown pattern families {unknown}; choose from {DEFAULT_FAMILIES}")
    target = max(1, int(2 * d_h * density * n * n))
    return SearchSpace(
        candidates=[by_family[f] for f in families],
        target_flops=target,
        epsilon=epsilon,
        max_refine_iters=max_refine_iters,
    )
