#!/usr/bin/env python3
"""
Tests for the benchmark commands: the cmd_* service functions and the
click surface on top of them.
"""

import json
import os
import sys

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from attention import AttentionConfig, ModelDims
from bench_cli import (DECODE_COLUMNS, ERROR_COLUMNS, MATMUL_COLUMNS, QUANT_COLUMNS, BenchSpec, _build_cache_config,
                       _pipeline_rows, appendix_table, cli, cmd_bench_matmul, cmd_bench_quant, cmd_dump,
                       cmd_error_report, cmd_load, cmd_simulate_decode, speedup_pct, to_markdown)
from kv_cache import CacheConfig
from quantizer import GroupingAxis, QuantConfig
from synthetic_data import SyntheticDataSpec, constant_matrix

TINY = dict(models=('custom',), custom=(64, 2), seq_lens=(64, 128), warmup=0, reps=2)
SMALL_MODEL = ['--d', '64', '--n-heads', '2']


def _run(args):
    return CliRunner().invoke(cli, args, catch_exceptions=False)


def test_speedup_pct():
    assert speedup_pct(1.0, 1.0) == 0.0
    assert speedup_pct(0.5, 1.0) == 50.0
    assert speedup_pct(1.0, 0.0) == 0.0


def test_disabled_bits_build_a_full_precision_cache():
    cfg = _build_cache_config(16, 32, 'hybrid', 32, 96)
    assert isinstance(cfg, CacheConfig) and not cfg.quantize
    assert _build_cache_config(2, 32, 'hybrid', 32, 96).quantize


def test_bench_matmul_report_schema():
    result = cmd_bench_matmul(BenchSpec(**TINY))
    assert result["success"]
    report = result["report"]
    assert list(report.columns) == MATMUL_COLUMNS
    assert len(report) == 6
    assert set(report['method']) == {'matmul', 'outer', 'inner'}
    assert (report['median_ms'] > 0).all()
    matmul = report[report['method'] == 'matmul']
    assert (matmul['speedup_vs_ref_pct'] == 0.0).all()
    outer = report[report['method'] == 'outer']
    assert (outer['speedup_vs_outer_pct'] == 0.0).all()
    assert (result["traffic"]['scale_load_ratio'] == 32.0).all()


def test_appendix_table_layout():
    table = appendix_table(cmd_bench_matmul(BenchSpec(**TINY))["report"])
    assert list(table.columns) == ['model', 'method', '64', '128']
    assert list(table['method']) == ['matmul', 'outer', 'inner', 'speedup vs matmul (%)', 'speedup vs outer (%)']
    text = to_markdown(table)
    assert text.startswith('| model | method | 64 | 128 |\n|---|---|---|---|\n')


def test_bench_matmul_usage_errors_and_memory_guard():
    bad = cmd_bench_matmul(BenchSpec(**dict(TINY, seq_lens=(100,))))
    assert bad["exit_code"] == 2
    unknown = cmd_bench_matmul(BenchSpec(**dict(TINY, models=('gpt-x',))))
    assert unknown["exit_code"] == 2
    guarded = cmd_bench_matmul(BenchSpec(**dict(TINY, max_bytes=2 * 4 * 64 * 64)))
    assert guarded["success"]
    assert [s['seq_len'] for s in guarded["skipped"]] == [128]
    assert set(guarded["report"]['seq_len']) == {64}


def test_bench_quant_reports_ratio_and_enforces_the_bound():
    result = cmd_bench_quant(BenchSpec(**TINY), bound=1000.0)
    assert result["success"]
    assert list(result["report"].columns) == QUANT_COLUMNS
    assert (result["report"]['ratio'] > 0).all()
    strict = cmd_bench_quant(BenchSpec(**TINY), bound=0.0)
    assert strict["exit_code"] == 1 and len(strict["report"]) == 2
    wrong_group = cmd_bench_quant(BenchSpec(**dict(TINY, quant=QuantConfig(group_size=16, mode='sym'))))
    assert wrong_group["exit_code"] == 2


def test_bench_quant_meets_the_default_bound_on_a_small_grid():
    spec = BenchSpec(models=('custom',), custom=(32, 1), seq_lens=(32, 64), warmup=20, reps=201)
    result = cmd_bench_quant(spec)
    assert result["bound"] == 1.5
    assert result["success"], result["report"].to_string()
    assert (result["report"]['ratio'] <= 1.5).all()


def test_error_report_hybrid_is_the_per_group_minimum():
    result = cmd_error_report(SyntheticDataSpec(seed=3), QuantConfig(mode='asym'), rows=256, cols=128)
    assert result["success"] and result["summary"]["hybrid_is_min"]
    report = result["report"]
    assert list(report.columns) == ERROR_COLUMNS
    assert len(report) == 6
    raw = report[report['pipeline'] == 'raw'].set_index('mode')['total_sse']
    assert raw['hybrid'] <= min(raw['asym'], raw['sym']) + 1e-9
    frac = report[(report['pipeline'] == 'raw') & (report['mode'] == 'hybrid')]['symmetric_fraction'].iloc[0]
    assert 0.0 <= frac <= 1.0


def test_error_report_normalization_helps_channel_outliers():
    data = SyntheticDataSpec.channel_outliers(sigma=1.0, channels=4, scale=50.0, seed=4)
    result = cmd_error_report(data, QuantConfig(bits=4, mode='asym'), rows=256, cols=128)
    assert result["success"]
    summary = result["summary"]
    assert summary["normalized_hybrid_sse"] < summary["raw_hybrid_sse"]
    assert summary["normalization_reduction_pct"] > 0


def test_constant_matrix_reconstructs_exactly():
    rows, _ = _pipeline_rows(constant_matrix(8, 64, 2.5), GroupingAxis.INNER, QuantConfig(), 'raw')
    sse = {row['mode']: row['total_sse'] for row in rows}
    assert sse['asym'] == 0.0 and sse['hybrid'] == 0.0


def _decode_cfg(bits=2, normalize=True, mode='hybrid'):
    return AttentionConfig(cache=_build_cache_config(bits, 32, mode, 32, 96), normalize=normalize)


def test_simulate_decode_without_steps():
    result = cmd_simulate_decode(ModelDims(64, 2), _decode_cfg(), prefill_len=40, decode_steps=0)
    assert result["success"]
    assert list(result["report"].columns) == DECODE_COLUMNS
    assert len(result["report"]) == 1


def test_simulate_decode_prefill_layout():
    result = cmd_simulate_decode(ModelDims(128, 4), _decode_cfg(), prefill_len=300, decode_steps=0)
    first = result["report"].iloc[0]
    assert (first['k_sink'], first['k_quantized'], first['k_recent']) == (32, 172, 96)
    assert (first['v_sink'], first['v_quantized'], first['v_recent']) == (32, 160, 108)


def test_simulate_decode_full_precision_is_exact():
    result = cmd_simulate_decode(ModelDims(64, 2), _decode_cfg(bits=16, normalize=False), prefill_len=50,
                                 decode_steps=20)
    assert result["success"], result.get("error")
    assert result["summary"]["max_abs_error"] <= 1e-5
    assert result["summary"]["layout"]["k_quantized"] == 0


def test_simulate_decode_keeps_invariants_while_quantizing():
    result = cmd_simulate_decode(ModelDims(64, 2), _decode_cfg(), prefill_len=200, decode_steps=70, seed=5)
    assert result["success"], result.get("error")
    summary = result["summary"]
    assert summary["conserved"] and summary["violations"] == []
    assert summary["footprint_bytes"] == -(-summary["footprint_bits"]["total"] // 8)
    assert summary["layout"]["total_tokens"] == 270
    assert np.isfinite(summary["max_abs_error"])


def test_simulate_decode_usage_error():
    assert cmd_simulate_decode(ModelDims(64, 2), _decode_cfg(), prefill_len=0, decode_steps=1)["exit_code"] == 2
    odd = cmd_simulate_decode(ModelDims(48, 2), _decode_cfg(), prefill_len=10, decode_steps=1)
    assert odd["exit_code"] == 2


def test_dump_and_load_round_trip(tmp_path):
    path = str(tmp_path / 'snap')
    dumped = cmd_dump(path, ModelDims(64, 2), _decode_cfg(mode='hybrid-prefill'), prefill_len=200, decode_steps=40)
    assert dumped["success"]
    assert set(os.listdir(path)) >= {'manifest.json', 'k_hat.iqkv', 'v_hat.iqkv', 'k_sink.f32', 'v_recent.f32'}
    loaded = cmd_load(path)
    assert loaded["success"] and loaded["byte_identical"]
    assert loaded["layout"] == dumped["layout"]


def test_load_rejects_corrupted_magic(tmp_path):
    path = str(tmp_path / 'snap')
    cmd_dump(path, ModelDims(64, 2), _decode_cfg(), prefill_len=200)
    with open(os.path.join(path, 'v_hat.iqkv'), 'r+b') as f:
        f.write(b'NOPE')
    result = cmd_load(path)
    assert result["exit_code"] == 1 and 'SnapshotFormatError' in result["error"]


# -- click surface -----------------------------------------------------------

def test_cli_bench_matmul_csv(tmp_path):
    out = str(tmp_path / 'matmul.csv')
    result = _run(['bench-matmul', '--model', 'custom'] + SMALL_MODEL +
                  ['--seq-len', '64', '--reps', '2', '--warmup', '0', '--out', out])
    assert result.exit_code == 0
    report = pd.read_csv(out)
    assert list(report.columns) == MATMUL_COLUMNS and len(report) == 3


def test_cli_bench_matmul_markdown(tmp_path):
    out = str(tmp_path / 'matmul.md')
    result = _run(['bench-matmul'] + SMALL_MODEL +
                  ['--seq-len', '64', '--reps', '2', '--warmup', '0', '--format', 'md', '--out', out])
    assert result.exit_code == 0
    with open(out) as f:
        text = f.read()
    assert text.startswith('| model | method | 64 |')
    assert 'scale loads outer/inner = 4096/128 = 32' in text


def test_cli_usage_errors_exit_two():
    assert _run(['bench-matmul'] + SMALL_MODEL + ['--seq-len', '100', '--reps', '1']).exit_code == 2
    assert _run(['bench-matmul'] + SMALL_MODEL + ['--seq-len', '64', '--group-size', '16']).exit_code == 2
    assert _run(['bench-matmul', '--d', '64', '--seq-len', '64']).exit_code == 2
    assert _run(['simulate-decode', '--d', '10', '--n-heads', '4']).exit_code == 2
    assert _run(['simulate-decode', '--bits', '17']).exit_code == 2


def test_cli_bench_quant_and_error_report(tmp_path):
    out = str(tmp_path / 'quant.csv')
    result = _run(['bench-quant'] + SMALL_MODEL + ['--seq-len', '64', '--reps', '2', '--warmup', '0',
                                                   '--bound', '1000', '--out', out])
    assert result.exit_code == 0
    assert list(pd.read_csv(out).columns) == QUANT_COLUMNS

    out = str(tmp_path / 'errors.csv')
    result = _run(['error-report', '--distribution', 'gaussian_with_channel_outliers', '--rows', '128',
                   '--bits', '4', '--out', out])
    assert result.exit_code == 0
    report = pd.read_csv(out)
    assert list(report.columns) == ERROR_COLUMNS
    assert set(report['pipeline']) == {'raw', 'normalized'}


def test_cli_simulate_decode_and_config_file(tmp_path):
    config_path = str(tmp_path / 'run.json')
    with open(config_path, 'w') as f:
        json.dump({'bits': 16, 'normalize': False, 'd': 64, 'n-heads': 2, 'prefill-len': 40,
                   'decode-steps': 3}, f)
    out = str(tmp_path / 'decode.csv')
    result = _run(['--config', config_path, 'simulate-decode', '--out', out])
    assert result.exit_code == 0
    report = pd.read_csv(out)
    assert list(report.columns) == DECODE_COLUMNS
    assert len(report) == 4
    assert (report['max_abs_error'] <= 1e-5).all()
    assert (report['k_quantized'] == 0).all()

    # explicit flags win over the file
    result = _run(['--config', config_path, 'simulate-decode', '--decode-steps', '5', '--out', out])
    assert result.exit_code == 0
    assert len(pd.read_csv(out)) == 6


def test_cli_dump_load_and_corruption(tmp_path):
    path = str(tmp_path / 'snap')
    assert _run(['dump', path] + SMALL_MODEL + ['--prefill-len', '200', '--decode-steps', '10']).exit_code == 0
    assert _run(['load', path]).exit_code == 0
    manifest = os.path.join(path, 'manifest.json')
    with open(manifest) as f:
        meta = json.load(f)
    meta['format_version'] = 9
    with open(manifest, 'w') as f:
        json.dump(meta, f)
    assert _run(['load', path]).exit_code == 1


def main():
    print("🚀 Benchmark CLI tests")
    code = pytest.main([__file__, '-q'])
    print("✅ All tests passed!" if code == 0 else "❌ Some tests failed.")
    sys.exit(code)


if __name__ == "__main__":
    main()
