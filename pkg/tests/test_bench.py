"""Benchmark harness tests: memory model, thresholds, reports, CLI."""

import numpy as np
import pytest

from sparseattn.bench import (
    BenchConfigError,
    BenchRecord,
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
from sparseattn.cli import main as cli_main
from sparseattn.patterns import Triangular, VerticalSlash
from sparseattn.runtime import ModelConfig
from sparseattn.tensorio import read_tensor, write_tensor


def small_cfg(max_context=256, heads=2, d_head=8):
    return ModelConfig(
        n_heads=heads, d_model=heads * d_head, d_head=d_head, max_context=max_context
    )


def make_record(ctx, method, latency, seed=0):
    return BenchRecord(
        ctx=ctx, method=method, pattern="-", latency_s=latency, flops=1,
        mem_bytes=1, frob_err=None, seed=seed,
    )


class TestMemoryModel:
    def test_ctx_zero_guarded(self):
        cfg = small_cfg()
        assert estimate_attention_memory("dense", 0, cfg) == 0

    def test_dense_weights_term(self):
        cfg = ModelConfig(n_heads=1, d_model=64, d_head=64, max_context=1024)
        total = estimate_attention_memory("dense", 1024, cfg)
        assert total - attention_io_bytes(1024, cfg) == 1024 * 1024 * 4 == 4_194_304

    def test_sparse_below_dense(self):
        cfg = ModelConfig(n_heads=1, d_model=64, d_head=64, max_context=1024)
        p = VerticalSlash(32, 32)
        sparse = estimate_attention_memory("vertical-slash", 1024, cfg, pattern=p)
        io = attention_io_bytes(1024, cfg)
        assert sparse - io <= 1024 * 64 * 8
        assert sparse - io < estimate_attention_memory("dense", 1024, cfg) - io

    def test_dense_quadrupling_and_sparse_subquadratic(self):
        cfg = small_cfg(max_context=4096)
        io1, io2 = attention_io_bytes(1024, cfg), attention_io_bytes(2048, cfg)
        d1 = estimate_attention_memory("dense", 1024, cfg) - io1
        d2 = estimate_attention_memory("dense", 2048, cfg) - io2
        assert d2 == 4 * d1
        s1 = estimate_attention_memory("vertical-slash", 1024, cfg)
        s2 = estimate_attention_memory("vertical-slash", 2048, cfg)
        assert s2 / s1 < 4.0


class TestFixedPatterns:
    def test_families(self):
        assert isinstance(fixed_pattern_for("triangular", 256), Triangular)
        assert isinstance(fixed_pattern_for("vertical-slash", 256), VerticalSlash)
        assert fixed_pattern_for("block-sparse", 256).b == 64

    def test_ten_percent_density(self):
        p = fixed_pattern_for("vertical-slash", 1000, 0.1)
        assert p.k_v == p.k_s == 50

    def test_unknown(self):
        with pytest.raises(BenchConfigError):
            fixed_pattern_for("dense", 256)


class TestSynth:
    def test_deterministic_per_seed_and_ctx(self):
        a = synth_qkv(3, 32, 2, 4)
        b = synth_qkv(3, 32, 2, 4)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        c = synth_qkv(4, 32, 2, 4)
        assert not np.array_equal(a[0], c[0])

    def test_shape_and_range(self):
        q, k, v = synth_qkv(0, 16, 3, 5)
        assert q.shape == (1, 3, 16, 5)
        for x in (q, k, v):
            assert x.dtype == np.float32
            assert float(np.abs(x).max()) <= 1.0


class TestRunSweep:
    def test_validation_before_timing(self):
        cfg = small_cfg()
        with pytest.raises(BenchConfigError):
            run_sweep([], ["dense"], cfg)
        with pytest.raises(BenchConfigError):
            run_sweep([64, 32], ["dense"], cfg)
        with pytest.raises(BenchConfigError):
            run_sweep([32], ["bogus"], cfg)
        with pytest.raises(BenchConfigError):
            run_sweep([512], ["dense"], cfg)  # ctx > max_context
        with pytest.raises(BenchConfigError):
            run_sweep([32], ["dense"], cfg, repeats=0)

    def test_single_dense_cell(self):
        cfg = small_cfg()
        records = run_sweep([64], ["dense"], cfg, repeats=3, seed=1)
        assert len(records) == 1
        r = records[0]
        assert r.method == "dense" and r.frob_err == 0.0
        assert r.latency_s is not None and r.latency_s > 0
        assert r.mem_peak_bytes is not None and r.mem_peak_bytes > 0

    def test_oom_analog_rows_do_not_abort(self):
        cfg = small_cfg(max_context=128)
        # dense analytic bytes: 12288 at ctx=32, 98304 at ctx=128
        records = run_sweep(
            [32, 128], ["dense", "vertical-slash"], cfg, repeats=1, seed=2,
            dense_cap_mb=0.05,
        )
        by_cell = {(r.ctx, r.method): r for r in records}
        assert by_cell[(32, "dense")].latency_s is not None
        blocked = by_cell[(128, "dense")]
        assert blocked.latency_s is None and blocked.frob_err is None
        assert by_cell[(128, "vertical-slash")].latency_s is not None
        # sparse rows lose their frob reference when dense is unavailable
        assert by_cell[(128, "vertical-slash")].frob_err is None

    def test_non_latency_fields_deterministic(self):
        cfg = small_cfg(max_context=128)
        kw = dict(repeats=1, seed=9)
        a = run_sweep([64, 128], ["dense", "vertical-slash", "auto"], cfg, **kw)
        b = run_sweep([64, 128], ["dense", "vertical-slash", "auto"], cfg, **kw)
        for ra, rb in zip(a, b):
            assert (ra.ctx, ra.method, ra.pattern, ra.flops, ra.mem_bytes, ra.frob_err,
                    ra.seed) == (rb.ctx, rb.method, rb.pattern, rb.flops, rb.mem_bytes,
                                 rb.frob_err, rb.seed)
            assert (ra.latency_s is None) == (rb.latency_s is None)

    def test_auto_method_labels(self):
        cfg = small_cfg(max_context=64)
        records = run_sweep([64], ["auto"], cfg, repeats=1, seed=3)
        assert records[0].pattern.startswith("auto(")
        assert records[0].frob_err is not None

    def test_auto_family_restriction(self):
        cfg = small_cfg(max_context=64)
        records = run_sweep(
            [64], ["auto"], cfg, repeats=1, seed=3, families=("vertical-slash",)
        )
        assert records[0].pattern == "auto(vertical-slash=2)"


class TestFindThreshold:
    def test_sparse_always_below(self):
        records = [make_record(c, "dense", 10.0 * c) for c in (1, 2, 4, 8)]
        records += [make_record(c, "vertical-slash", 1.0 * c) for c in (1, 2, 4, 8)]
        th = find_threshold(records)
        assert th.methods[0].crossover_ctx == 1

    def test_sparse_always_above(self):
        records = [make_record(c, "dense", 1.0) for c in (1, 2, 4, 8)]
        records += [make_record(c, "vertical-slash", 2.0) for c in (1, 2, 4, 8)]
        th = find_threshold(records)
        assert th.methods[0].crossover_ctx is None

    def test_constructed_crossover_at_8192(self):
        ctxs = [1024, 2048, 4096, 8192, 16384]
        dense = {1024: 0.1, 2048: 0.4, 4096: 1.6, 8192: 6.4, 16384: 25.6}
        sparse = {1024: 0.5, 2048: 0.9, 4096: 1.7, 8192: 3.3, 16384: 6.5}
        records = [make_record(c, "dense", dense[c]) for c in ctxs]
        records += [make_record(c, "block-sparse", sparse[c]) for c in ctxs]
        th = find_threshold(records)
        assert th.methods[0].crossover_ctx == 8192
        assert th.methods[0].gradient < th.dense_gradient

    def test_requires_dense_and_sparse(self):
        with pytest.raises(BenchConfigError):
            find_threshold([make_record(1, "dense", 1.0)])

    def test_no_shared_ctx_errors(self):
        records = [make_record(1, "dense", 1.0), make_record(2, "vertical-slash", 1.0)]
        with pytest.raises(BenchConfigError, match="no shared ctx"):
            find_threshold(records)

    def test_crossover_member_of_swept_list(self):
        records = [make_record(c, "dense", c * 1.0) for c in (2, 4)]
        records += [make_record(c, "triangular", 3.0) for c in (2, 4)]
        th = find_threshold(records)
        assert th.methods[0].crossover_ctx in (2, 4)


class TestReports:
    def test_csv_round_trip(self, tmp_path):
        cfg = small_cfg(max_context=64)
        records = run_sweep([32, 64], ["dense", "triangular"], cfg, repeats=1, seed=5)
        path = tmp_path / "report.csv"
        emit_report(records, None, "csv", path)
        back = parse_report_csv(path)
        assert back == records

    def test_csv_header_exact(self, tmp_path):
        path = tmp_path / "r.csv"
        emit_report([make_record(1, "dense", 1.0)], None, "csv", path)
        header = path.read_text().splitlines()[0]
        assert header == "ctx,method,pattern,latency_s,flops,mem_bytes,frob_err,seed"

    def test_dash_rendering_for_unavailable(self, tmp_path):
        rec = BenchRecord(
            ctx=8, method="dense", pattern="-", latency_s=None, flops=10,
            mem_bytes=20, frob_err=None, seed=0,
        )
        path = tmp_path / "r.csv"
        emit_report([rec], None, "csv", path)
        row = path.read_text().splitlines()[1]
        assert row == "8,dense,-,-,10,20,-,0"

    def test_markdown_includes_threshold_section(self):
        th = ThresholdReport(
            dense_gradient=2e-5,
            methods=(MethodThreshold("vertical-slash", 8192, 1e-5),),
        )
        text = emit_report([make_record(1, "dense", 1.0)], th, "markdown")
        assert "Effectiveness threshold" in text
        assert "8192" in text

    def test_markdown_omits_threshold_when_absent(self):
        text = emit_report([make_record(1, "dense", 1.0)], None, "markdown")
        assert "Effectiveness threshold" not in text

    def test_empty_records_error(self):
        with pytest.raises(BenchConfigError):
            emit_report([], None, "csv")

    def test_unknown_format(self):
        with pytest.raises(BenchConfigError):
            emit_report([make_record(1, "dense", 1.0)], None, "xml")

    def test_parse_rejects_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(BenchConfigError):
            parse_report_csv(path)


class TestParseConfig:
    def test_basic(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("# comment\nctx = 32,64\nseed=7\n\nmethods=dense\n")
        cfg = parse_config(path)
        assert cfg == {"ctx": "32,64", "seed": "7", "methods": "dense"}

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("just-words\n")
        with pytest.raises(BenchConfigError, match="key=value"):
            parse_config(path)


class TestCli:
    def test_bench_to_csv(self, tmp_path, capsys):
        out = tmp_path / "r.csv"
        rc = cli_main(
            [
                "bench", "--ctx", "32,64", "--methods", "dense,vertical-slash",
                "--heads", "2", "--d-head", "8", "--repeats", "1", "--seed", "1",
                "--out", str(out), "--quiet",
            ]
        )
        assert rc == 0
        records = parse_report_csv(out)
        assert len(records) == 4

    def test_config_file_with_flag_override(self, tmp_path):
        cfgfile = tmp_path / "cfg.txt"
        cfgfile.write_text(
            "ctx=32\nmethods=dense\nheads=2\nd_head=8\nrepeats=1\n"
            "epsilon=0.1\nfamilies=vertical-slash\n"
        )
        out = tmp_path / "r.csv"
        rc = cli_main(
            ["bench", "--config", str(cfgfile), "--ctx", "16", "--out", str(out), "--quiet"]
        )
        assert rc == 0
        records = parse_report_csv(out)
        assert [r.ctx for r in records] == [16]

    def test_bench_stdout(self, capsys):
        rc = cli_main(
            [
                "bench", "--ctx", "32", "--methods", "dense", "--heads", "1",
                "--d-head", "8", "--repeats", "1", "--quiet",
            ]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert out.startswith("ctx,method,pattern")

    def test_attn_and_select_subcommands(self, tmp_path, capsys):
        rng = np.random.default_rng(12)
        arrs = {}
        for name in ("q", "k", "v"):
            arr = rng.uniform(-1, 1, (2, 32, 8)).astype(np.float32)
            write_tensor(tmp_path / f"{name}.satn", arr)
            arrs[name] = arr
        out = tmp_path / "y.satn"
        rc = cli_main(
            [
                "attn", "--q", str(tmp_path / "q.satn"), "--k", str(tmp_path / "k.satn"),
                "--v", str(tmp_path / "v.satn"), "--out", str(out), "--method", "dense",
            ]
        )
        assert rc == 0
        y = read_tensor(out)
        assert y.shape == (2, 32, 8)
        rc = cli_main(
            [
                "select", "--q", str(tmp_path / "q.satn"), "--k", str(tmp_path / "k.satn"),
                "--v", str(tmp_path / "v.satn"), "--cal-window", "16",
            ]
        )
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) >= 2 and lines[-1].startswith("head 1:")

    def test_error_line_machine_readable(self, tmp_path, capsys):
        rc = cli_main(
            ["attn", "--q", "missing.satn", "--k", "missing.satn", "--v", "missing.satn",
             "--out", str(tmp_path / "y.satn")]
        )
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error: ")
        assert len(err.strip().splitlines()) == 1

    def test_bad_magic_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.satn"
        bad.write_bytes(b"JUNKJUNK")
        rc = cli_main(
            ["attn", "--q", str(bad), "--k", str(bad), "--v", str(bad),
             "--out", str(tmp_path / "y.satn")]
        )
        assert rc == 1
        assert "not a SATN tensor file" in capsys.readouterr().err
