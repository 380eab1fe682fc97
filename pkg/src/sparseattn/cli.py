"""Command-line interface: `bench` sweeps, `select` pattern search, `attn` forward pass.

Defaults < config file (--config, key=value lines) < explicit flags. On
failure a single machine-readable line `error: <message>` goes to stderr and
the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import sys

from .bench import (
    BenchConfigError,
    METHODS,
    emit_report,
    find_threshold,
    fixed_pattern_for,
    parse_config,
    run_sweep,
)
from .core import AttnMatrices, SparseAttnError
from .patterns import pattern_label
from .runtime import ModelConfig, prefill
from .search import default_search_space, select_pattern_windowed
from .tensorio import read_tensor, write_tensor

_DEFAULTS = {
    "ctx": "256,512,1024,2048,4096,8192,16384",
    "methods": "dense,vertical-slash",
    "heads": "8",
    "d_head": "64",
    "repeats": "3",
    "seed": "0",
    "format": "csv",
    "density": "0.1",
    "q_est": "64",
    "cal_window": "64",
    "frob_ctx_cap": "4096",
    "epsilon": "0.05",
    "max_refine_iters": "8",
    "families": "triangular,vertical-slash,block-sparse",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparseattn")
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="sweep context lengths and time prefill per method")
    bench.add_argument("--ctx", help="comma-separated ascending context lengths")
    bench.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    bench.add_argument("--heads", type=int)
    bench.add_argument("--d-head", dest="d_head", type=int)
    bench.add_argument("--repeats", type=int)
    bench.add_argument("--seed", type=int)
    bench.add_argument("--out", help="report path (stdout when omitted)")
    bench.add_argument("--format", choices=("csv", "markdown"))
    bench.add_argument("--dense-cap-mb", dest="dense_cap_mb", type=float)
    bench.add_argument("--config", help="key=value config file; flags override it")
    bench.add_argument("--density", type=float)
    bench.add_argument("--q-est", dest="q_est", type=int)
    bench.add_argument("--cal-window", dest="cal_window", type=int)
    bench.add_argument("--epsilon", type=float, help="relative FLOPs-budget tolerance")
    bench.add_argument("--max-refine-iters", dest="max_refine_iters", type=int)
    bench.add_argument("--families", help="auto-mode candidate families, comma-separated")
    bench.add_argument("--threads", type=int)
    bench.add_argument("--quiet", action="store_true", help="suppress progress lines")

    select = sub.add_parser("select", help="pick the best sparse pattern per head")
    select.add_argument("--q", required=True, help="SATN tensor of shape (h, n, d) or (n, d)")
    select.add_argument("--k", required=True)
    select.add_argument("--v", required=True)
    select.add_argument("--density", type=float, default=0.1, help="target nominal density")
    select.add_argument("--cal-window", dest="cal_window", type=int, default=64)

    attn = sub.add_parser("attn", help="run one forward pass and write the output tensor")
    attn.add_argument("--q", required=True)
    attn.add_argument("--k", required=True)
    attn.add_argument("--v", required=True)
    attn.add_argument("--out", required=True)
    attn.add_argument("--method", choices=METHODS, default="dense")
    attn.add_argument("--density", type=float, default=0.1)
    attn.add_argument("--q-est", dest="q_est", type=int, default=64)
    attn.add_argument("--cal-window", dest="cal_window", type=int, default=64)
    return parser


def _setting(args: argparse.Namespace, config: dict[str, str], key: str) -> str:
    value = getattr(args, key, None)
    if value is not None:
        return str(value)
    if key in config:
        return config[key]
    return _DEFAULTS[key]


def _run_bench(args: argparse.Namespace) -> int:
    config = parse_config(args.config) if args.config else {}
    ctx_list = [int(c) for c in _setting(args, config, "ctx").split(",") if c.strip()]
    methods = [m.strip() for m in _setting(args, config, "methods").split(",") if m.strip()]
    heads = int(_setting(args, config, "heads"))
    d_head = int(_setting(args, config, "d_head"))
    cfg = ModelConfig(
        n_heads=heads, d_model=heads * d_head, d_head=d_head, max_context=max(ctx_list)
    )
    dense_cap = args.dense_cap_mb
    if dense_cap is None and "dense_cap_mb" in config:
        dense_cap = float(config["dense_cap_mb"])
    threads = args.threads
    if threads is None and "threads" in config:
        threads = int(config["threads"])
    progress = None if args.quiet else lambda msg: print(msg, file=sys.stderr)
    records = run_sweep(
        ctx_list,
        methods,
        cfg,
        repeats=int(_setting(args, config, "repeats")),
        seed=int(_setting(args, config, "seed")),
        density=float(_setting(args, config, "density")),
        q_est=int(_setting(args, config, "q_est")),
        dense_cap_mb=dense_cap,
        frob_ctx_cap=int(_setting(args, config, "frob_ctx_cap")),
        threads=threads,
        cal_window=int(_setting(args, config, "cal_window")),
        epsilon=float(_setting(args, config, "epsilon")),
        max_refine_iters=int(_setting(args, config, "max_refine_iters")),
        families=tuple(
            f.strip() for f in _setting(args, config, "families").split(",") if f.strip()
        ),
        progress=progress,
    )
    threshold = None
    has_dense = any(r.method == "dense" and r.latency_s is not None for r in records)
    has_sparse = any(r.method != "dense" and r.latency_s is not None for r in records)
    if has_dense and has_sparse:
        threshold = find_threshold(records)
    out = args.out if args.out is not None else config.get("out")
    text = emit_report(records, threshold, format=_setting(args, config, "format"), path=out)
    if out is None:
        sys.stdout.write(text)
    return 0


def _load_heads(args: argparse.Namespace):
    """Read q/k/v SATN files as (heads, n, d_head), accepting rank-2 single heads."""
    tensors = []
    for name in ("q", "k", "v"):
        t = read_tensor(getattr(args, name))
        if t.ndim == 2:
            t = t[None]
        if t.ndim != 3:
            raise BenchConfigError(f"--{name}: expected rank 2 or 3 tensor, got rank {t.ndim}")
        tensors.append(t)
    q, k, v = tensors
    if not (q.shape == k.shape == v.shape):
        raise BenchConfigError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    return q, k, v


def _run_select(args: argparse.Namespace) -> int:
    q, k, v = _load_heads(args)
    heads, n, d_head = q.shape
    cal = min(args.cal_window, n)
    space = default_search_space(cal, d_head, density=args.density)
    for h in range(heads):
        m = AttnMatrices(q[h], k[h], v[h], causal=True)
        res = select_pattern_windowed(m, space, cal)
        print(
            f"head {h}: {pattern_label(res.chosen)} error={res.error:.6g} "
            f"flops={res.realized_flops} converged={res.converged}"
        )
    return 0


def _run_attn(args: argparse.Namespace) -> int:
    q, k, v = _load_heads(args)
    heads, n, d_head = q.shape
    cfg = ModelConfig(n_heads=heads, d_model=heads * d_head, d_head=d_head, max_context=n)
    if args.method == "dense":
        result = prefill(q[None], k[None], v[None], cfg, mode="dense")
    elif args.method == "auto":
        result = prefill(
            q[None], k[None], v[None], cfg, mode="auto",
            cal_window=min(args.cal_window, n), q_est=args.q_est,
        )
    else:
        pattern = fixed_pattern_for(args.method, n, args.density)
        result = prefill(
            q[None], k[None], v[None], cfg, mode="fixed", fixed_pattern=pattern,
            q_est=args.q_est,
        )
    per_head = result.outputs[0].reshape(n, heads, d_head).transpose(1, 0, 2)
    write_tensor(args.out, per_head)
    print(f"wrote {args.out} shape={tuple(per_head.shape)} elapsed_s={result.elapsed_s:.6f}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "bench":
            return _run_bench(args)
        if args.command == "select":
            return _run_select(args)
        return _run_attn(args)
    except (SparseAttnError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
