"""Benchmark harness: context-length sweeps, crossover detection, reports.

For each (context, method) cell the harness generates seeded synthetic
inputs, runs one instrumented prefill (allocator peak via tracemalloc, also
serving as the warm-up), then times `repeats` prefills and records the
median. Dense rows whose analytic memory exceeds a configured cap are
recorded as unavailable and rendered as "-", the out-of-memory analog; they
never abort the sweep.

Analytic memory model (bytes, per sweep cell):
  io     = 4 * n_heads * ctx * d_head * 4        (q, k, v, output; float32)
  dense  = ctx^2 * 4 + io                        (transient weights, one head at a time)
  sparse = positions * (4 + 4) + io              (weight + index storage per position)
where `positions` is the pattern's nominal coverage. The instrumented peak is
reported alongside in Markdown reports; the CSV carries the analytic figure.
"""

from __future__ import annotations

import csv
import io
import statistics
import tracemalloc
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .core import AttnMatrices, SparseAttnError, dense_attention, frob_norm_diff
from .patterns import (
    BlockSparse,
    SparsityPattern,
    Triangular,
    VerticalSlash,
    build_index,
    pattern_label,
    sparse_attention,
)
from .runtime import ModelConfig, PrefillResult, prefill
from .search import (
    DEFAULT_FAMILIES,
    SearchSpace,
    default_search_space,
    estimate_flops,
    nominal_positions,
)

__all__ = [
    "BenchConfigError",
    "METHODS",
    "BenchRecord",
    "MethodThreshold",
    "ThresholdReport",
    "synth_qkv",
    "fixed_pattern_for",
    "attention_io_bytes",
    "estimate_attention_memory",
    "run_sweep",
    "find_threshold",
    "emit_report",
    "parse_report_csv",
    "parse_config",
]

METHODS = ("dense", "triangular", "vertical-slash", "block-sparse", "auto")

CSV_COLUMNS = ("ctx", "method", "pattern", "latency_s", "flops", "mem_bytes", "frob_err", "seed")

_SCALAR_BYTES = 4  # float32 performance path
_INDEX_BYTES = 4  # int32 position ids


class BenchConfigError(SparseAttnError):
    """Invalid sweep configuration or report input."""


@dataclass
class BenchRecord:
    """One sweep row. latency_s is None for unavailable (OOM-analog) cells.

    mem_peak_bytes holds the instrumented allocator peak; it is excluded from
    equality and from the CSV schema (Markdown reports include it).
    """

    ctx: int
    method: str
    pattern: str
    latency_s: float | None
    flops: int
    mem_bytes: int
    frob_err: float | None
    seed: int
    mem_peak_bytes: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class MethodThreshold:
    method: str
    crossover_ctx: int | None  # None: no crossover in the swept range
    gradient: float  # latency slope, seconds per token, over the top half


@dataclass(frozen=True)
class ThresholdReport:
    dense_gradient: float
    methods: tuple[MethodThreshold, ...]


def synth_qkv(seed: int, ctx: int, n_heads: int, d_head: int, dtype=np.float32):
    """Seeded synthetic per-head inputs, uniform on [-1, 1].

    Generation order (load-bearing for reproducibility): a generator seeded
    with the pair [seed, ctx] draws q, then k, then v, each as one
    (n_heads, ctx, d_head) row-major block. Returns arrays shaped
    (1, n_heads, ctx, d_head) ready for prefill.
    """
    rng = np.random.default_rng([seed, ctx])
    shape = (n_heads, ctx, d_head)
    q = rng.uniform(-1.0, 1.0, shape).astype(dtype)
    k = rng.uniform(-1.0, 1.0, shape).astype(dtype)
    v = rng.uniform(-1.0, 1.0, shape).astype(dtype)
    return q[None], k[None], v[None]


def fixed_pattern_for(method: str, ctx: int, density: float = 0.1) -> SparsityPattern:
    """Fixed-density pattern parameters for one sweep method at one context."""
    if method == "triangular":
        return Triangular(window=max(1, min(ctx, round(density * ctx))), sinks=0)
    if method == "vertical-slash":
        half = max(1, min(ctx, round(density * ctx / 2)))
        return VerticalSlash(k_v=half, k_s=half)
    if method == "block-sparse":
        b = min(64, ctx)
        nb = -(-ctx // b)
        return BlockSparse(b=b, k_b=max(1, min(nb, round(density * nb))))
    raise BenchConfigError(f"no fixed pattern for method {method!r}")


def attention_io_bytes(ctx: int, cfg: ModelConfig) -> int:
    """Bytes for the q/k/v inputs and the output across all heads."""
    return 4 * cfg.n_heads * ctx * cfg.d_head * _SCALAR_BYTES


def estimate_attention_memory(
    method: str,
    ctx: int,
    cfg: ModelConfig,
    *,
    pattern: SparsityPattern | None = None,
    density: float = 0.1,
) -> int:
    """Analytic peak transient attention bytes; see the module docstring."""
    io_term = attention_io_bytes(ctx, cfg)
    if ctx <= 0:
        return io_term
    if method == "dense":
        return ctx * ctx * _SCALAR_BYTES + io_term
    if pattern is not None:
        positions = nominal_positions(pattern, ctx)
    else:
        positions = min(int(density * ctx * ctx), ctx * (ctx + 1) // 2)
    return positions * (_SCALAR_BYTES + _INDEX_BYTES) + io_term


def _dense_flops(ctx: int, cfg: ModelConfig) -> int:
    # The vectorized dense path evaluates the full square before masking.
    return 2 * ctx * ctx * cfg.d_head * cfg.n_heads


def _validate_sweep(ctx_list, methods, cfg: ModelConfig, repeats: int) -> None:
    if not ctx_list:
        raise BenchConfigError("ctx_list must be non-empty")
    if any(c < 1 for c in ctx_list):
        raise BenchConfigError(f"context lengths must be >= 1, got {list(ctx_list)}")
    if list(ctx_list) != sorted(set(ctx_list)):
        raise BenchConfigError("ctx_list must be strictly ascending")
    if max(ctx_list) > cfg.max_context:
        raise BenchConfigError(
            f"largest ctx {max(ctx_list)} exceeds max_context {cfg.max_context}"
        )
    if not methods:
        raise BenchConfigError("methods must be non-empty")
    for m in methods:
        if m not in METHODS:
            raise BenchConfigError(f"unknown method {m!r}; choose from {METHODS}")
    if repeats < 1:
        raise BenchConfigError(f"repeats must be >= 1, got {repeats}")


def _prefill_for(
    method: str,
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    cfg: ModelConfig,
    search: SearchSpace | None,
    pattern: SparsityPattern | None,
    q_est: int,
    cal_window: int,
) -> PrefillResult:
    if method == "dense":
        return prefill(q, k, v, cfg, mode="dense")
    if method == "auto":
        return prefill(
            q, k, v, cfg, search=search, mode="auto", cal_window=cal_window, q_est=q_est
        )
    return prefill(q, k, v, cfg, mode="fixed", fixed_pattern=pattern, q_est=q_est)


def _frob_vs_dense(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, plans, q_est: int
) -> float:
    """Root-sum-square Frobenius error across heads against dense weights."""
    sq = 0.0
    for b in range(q.shape[0]):
        for plan in plans[b]:
            if plan.pattern is None:
                continue
            m = AttnMatrices(q[b, plan.head], k[b, plan.head], v[b, plan.head], causal=True)
            dense_w, _ = dense_attention(m)
            idx = build_index(m, plan.pattern, mode="estimated", q_est=min(q_est, m.n))
            sparse_w, _ = sparse_attention(m, idx)
            sq += frob_norm_diff(sparse_w, dense_w) ** 2
    return float(np.sqrt(sq))


def run_sweep(
    ctx_list,
    methods,
    cfg: ModelConfig,
    search: SearchSpace | None = None,
    repeats: int = 3,
    seed: int = 0,
    *,
    density: float = 0.1,
    q_est: int = 64,
    dense_cap_mb: float | None = None,
    frob_ctx_cap: int = 4096,
    threads: int | None = None,
    cal_window: int = 64,
    epsilon: float = 0.05,
    max_refine_iters: int = 8,
    families: tuple[str, ...] = DEFAULT_FAMILIES,
    progress=None,
) -> list[BenchRecord]:
    """Time prefill for every (ctx, method) cell and collect records.

    Latency is the median of `repeats` runs after one instrumented warm-up
    (which also captures the allocator peak and, at ctx <= frob_ctx_cap, the
    Frobenius error against dense weights). Dense cells whose analytic bytes
    exceed dense_cap_mb become OOM-analog rows with latency "-".
    """
    _validate_sweep(ctx_list, methods, cfg, repeats)
    cap_bytes = None if dense_cap_mb is None else dense_cap_mb * 1024 * 1024
    records: list[BenchRecord] = []
    for ctx in ctx_list:
        q, k, v = synth_qkv(seed, ctx, cfg.n_heads, cfg.d_head)
        eff_q_est = min(q_est, ctx)
        dense_bytes = estimate_attention_memory("dense", ctx, cfg)
        dense_ok = cap_bytes is None or dense_bytes <= cap_bytes
        for method in methods:
            if progress is not None:
                progress(f"ctx={ctx} method={method}")
            if method == "dense" and not dense_ok:
                records.append(
                    BenchRecord(
                        ctx=ctx, method=method, pattern="-", latency_s=None,
                        flops=_dense_flops(ctx, cfg), mem_bytes=dense_bytes,
                        frob_err=None, seed=seed, mem_peak_bytes=None,
                    )
                )
                continue
            pattern = (
                fixed_pattern_for(method, ctx, density)
                if method in ("triangular", "vertical-slash", "block-sparse")
                else None
            )
            method_search = search
            if method == "auto" and method_search is None:
                method_search = default_search_space(
                    min(cal_window, ctx), cfg.d_head, density,
                    epsilon=epsilon, max_refine_iters=max_refine_iters, families=families,
                )

            # Instrumented pass: allocator peak; doubles as the warm-up run.
            tracemalloc.start()
            try:
                warm = _prefill_for(
                    method, q, k, v, cfg, method_search, pattern, eff_q_est, cal_window
                )
                peak = tracemalloc.get_traced_memory()[1]
            finally:
                tracemalloc.stop()

            if method == "dense":
                label, flops, frob = "-", _dense_flops(ctx, cfg), 0.0
            elif method == "auto":
                fams: dict[str, int] = {}
                flops = 0
                for plan in warm.plans[0]:
                    name = pattern_label(plan.pattern).split("(")[0]
                    fams[name] = fams.get(name, 0) + 1
                    flops += estimate_flops(plan.pattern, ctx, cfg.d_head, eff_q_est).total
                label = "auto(" + " ".join(f"{f}={c}" for f, c in sorted(fams.items())) + ")"
                frob = None
            else:
                label = pattern_label(pattern)
                flops = estimate_flops(pattern, ctx, cfg.d_head, eff_q_est).total * cfg.n_heads
                frob = None
            if frob is None and ctx <= frob_ctx_cap and dense_ok:
                frob = _frob_vs_dense(q, k, v, warm.plans, q_est)

            limiter = threadpool_limits(limits=threads) if threads else nullcontext()
            with limiter:
                times = []
                for _ in range(repeats):
                    res = _prefill_for(
                        method, q, k, v, cfg, method_search, pattern, eff_q_est, cal_window
                    )
                    times.append(res.elapsed_s)
            records.append(
                BenchRecord(
                    ctx=ctx, method=method, pattern=label,
                    latency_s=statistics.median(times), flops=flops,
                    mem_bytes=estimate_attention_memory(
                        method, ctx, cfg, pattern=pattern, density=density
                    ),
                    frob_err=frob, seed=seed, mem_peak_bytes=peak,
                )
            )
    return records


def _slope(points: list[tuple[int, float]]) -> float:
    if len(points) < 2:
        return float("nan")
    xs = np.array([p[0] for p in points], dtype=np.float64)
    ys = np.array([p[1] for p in points], dtype=np.float64)
    return float(np.polyfit(xs, ys, 1)[0])


def find_threshold(records: list[BenchRecord]) -> ThresholdReport:
    """Crossover context and latency-vs-ctx gradients for sparse methods vs dense.

    The gradient is a least-squares slope over the top half of the swept
    context list (seconds per token). Crossover is the smallest shared ctx
    where the sparse median latency beats dense.
    """
    dense_lat = {
        r.ctx: r.latency_s for r in records if r.method == "dense" and r.latency_s is not None
    }
    sparse_methods: list[str] = []
    for r in records:
        if r.method != "dense" and r.method not in sparse_methods and r.latency_s is not None:
            sparse_methods.append(r.method)
    if not dense_lat or not sparse_methods:
        raise BenchConfigError("need dense rows and at least one sparse method with latencies")

    swept = sorted({r.ctx for r in records})
    top_half = set(swept[len(swept) // 2 :])
    dense_gradient = _slope([(c, t) for c, t in sorted(dense_lat.items()) if c in top_half])

    entries = []
    for method in sparse_methods:
        lat = {
            r.ctx: r.latency_s
            for r in records
            if r.method == method and r.latency_s is not None
        }
        shared = sorted(set(lat) & set(dense_lat))
        if not shared:
            raise BenchConfigError(f"no shared ctx points between {method!r} and dense")
        crossover = next((c for c in shared if lat[c] < dense_lat[c]), None)
        gradient = _slope([(c, lat[c]) for c in sorted(lat) if c in top_half])
        entries.append(MethodThreshold(method=method, crossover_ctx=crossover, gradient=gradient))
    return ThresholdReport(dense_gradient=dense_gradient, methods=tuple(entries))


def _cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _md_cell(value) -> str:
    # Markdown is for reading; CSV keeps full-precision repr for round-trips.
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def emit_report(
    records: list[BenchRecord],
    threshold: ThresholdReport | None,
    format: str = "csv",
    path=None,
) -> str:
    """Render records as CSV or Markdown; write to `path` when given.

    CSV columns are exactly ctx,method,pattern,latency_s,flops,mem_bytes,
    frob_err,seed with unavailable cells rendered as "-". Markdown adds the
    instrumented peak column and, when a threshold report is supplied, the
    crossover section.
    """
    if not records:
        raise BenchConfigError("no records to report")
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.ctx, r.method, r.pattern, _cell(r.latency_s), _cell(r.flops),
                    _cell(r.mem_bytes), _cell(r.frob_err), r.seed,
                ]
            )
        text = buf.getvalue()
    elif format == "markdown":
        lines = [
            "# Attention benchmark",
            "",
            "Memory model: dense = ctx^2 * 4 B transient weights + io;",
            "sparse = nominal positions * (4 B weight + 4 B index) + io;",
            "io = 4 tensors * heads * ctx * d_head * 4 B. `mem_peak` is the",
            "instrumented allocator peak of one prefill.",
            "",
            "| ctx | method | pattern | latency_s | flops | mem_bytes | mem_peak | frob_err | seed |",
            "| --- | --- | --- | --- | --- | --- | --- | --- | --- |",
        ]
        for r in records:
            lines.append(
                "| "
                + " | ".join(
                    [
                        str(r.ctx), r.method, r.pattern, _md_cell(r.latency_s),
                        _md_cell(r.flops), _md_cell(r.mem_bytes), _md_cell(r.mem_peak_bytes),
                        _md_cell(r.frob_err), str(r.seed),
                    ]
                )
                + " |"
            )
        if threshold is not None:
            lines += [
                "",
                "## Effectiveness threshold",
                "",
                f"Dense latency gradient over the top half of the sweep: "
                f"{threshold.dense_gradient:.3e} s/token.",
                "",
                "| method | crossover_ctx | gradient_s_per_token |",
                "| --- | --- | --- |",
            ]
            for mt in threshold.methods:
                cross = mt.crossover_ctx if mt.crossover_ctx is not None else "none in range"
                lines.append(f"| {mt.method} | {cross} | {mt.gradient:.3e} |")
        text = "\n".join(lines) + "\n"
    else:
        raise BenchConfigError(f"unknown report format {format!r}")
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def _parse_cell(text: str, kind):
    if text == "-":
        return None
    return kind(text)


def parse_report_csv(path) -> list[BenchRecord]:
    """Parse a CSV report back into records (instrumented peaks are not stored)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(CSV_COLUMNS):
            raise BenchConfigError(f"unexpected CSV header {header!r}")
        records = []
        for row in reader:
            if len(row) != len(CSV_COLUMNS):
                raise BenchConfigError(f"malformed CSV row {row!r}")
            records.append(
                BenchRecord(
                    ctx=int(row[0]), method=row[1], pattern=row[2],
                    latency_s=_parse_cell(row[3], float),
                    flops=int(row[4]), mem_bytes=int(row[5]),
                    frob_err=_parse_cell(row[6], float), seed=int(row[7]),
                )
            )
    return records


def parse_config(path) -> dict[str, str]:
    """Plain key=value configuration lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BenchConfigError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
