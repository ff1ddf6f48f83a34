#!/usr/bin/env python3
"""
Benchmark and analysis commands for the quantized KV cache.

Each cmd_* function does the work and returns a result dictionary,
{"success": True, ...} or {"error": "...", "exit_code": n}; the click
commands below only parse options, print and map results to exit codes
(0 success, 1 invariant or verification failure, 2 usage error).
"""

import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import click
import numpy as np
import pandas as pd

from attention import (AttentionConfig, FullPrecisionShadow, ModelDims, RopeParams, decode_step, prefill,
                       random_weights)
from config import DEFAULT_SEQ_LENS, get_config, load_model_presets
from exceptions import KernelVerificationError, KVQuantError, QuantConfigError, SnapshotFormatError, \
    TensorShapeError
from kernels import KernelChoice, build_timed_call, make_problem, measure_median, qgemv_inner, qgemv_outer
from kv_cache import CacheConfig, WindowConfig, load_snapshot, save_snapshot
from quantizer import GroupingAxis, QuantConfig, QuantMode, matrix_group_sse, quantize_matrix, dequantize_matrix
from synthetic_data import Distribution, SyntheticDataSpec, generate_matrix
from tensor_core import Matrix, slice_rows

logger = logging.getLogger(__name__)

settings = get_config()

DISABLED_BITS = 16
# placeholder width for the unused QuantConfig of a full-precision cache
_DISABLED_PLACEHOLDER_BITS = 8

MATMUL_COLUMNS = ['model', 'method', 'seq_len', 'median_ms', 'speedup_vs_ref_pct', 'speedup_vs_outer_pct']
QUANT_COLUMNS = ['model', 'seq_len', 'sym_ms', 'hybrid_ms', 'ratio']
ERROR_COLUMNS = ['pipeline', 'mode', 'total_sse', 'symmetric_fraction', 'groups']
DECODE_COLUMNS = ['step', 'total_tokens', 'max_abs_error', 'k_sink', 'k_quantized', 'k_recent',
                  'v_sink', 'v_quantized', 'v_recent', 'conserved']
METHOD_ORDER = ['matmul', 'outer', 'inner']


@dataclass(frozen=True)
class BenchSpec:
    """Models, sequence lengths and timing protocol for the latency benchmarks."""
    models: Tuple[str, ...] = ('llama-3.1-8b',)
    seq_lens: Tuple[int, ...] = tuple(DEFAULT_SEQ_LENS)
    warmup: int = 100
    reps: int = 1000
    seed: int = 0
    quant: QuantConfig = field(default_factory=QuantConfig)
    max_bytes: int = 1024 ** 3
    custom: Optional[Tuple[int, int]] = None  # (d, n_h) for the 'custom' model
    presets: Dict[str, Dict[str, int]] = field(default_factory=load_model_presets)

    def validate(self) -> None:
        if not self.seq_lens:
            raise QuantConfigError("at least one sequence length is required")
        if self.reps < 1 or self.warmup < 0:
            raise QuantConfigError(f"need reps >= 1 and warmup >= 0, got {self.reps}/{self.warmup}")
        g = self.quant.group_size
        bad = [n for n in self.seq_lens if n <= 0 or n % g]
        if bad:
            raise TensorShapeError(f"sequence lengths {bad} are not positive multiples of the group size {g}")
        for name, dims in self.model_dims():
            if dims.d % g:
                raise TensorShapeError(f"{name}: d={dims.d} is not divisible by the group size {g}")

    def model_dims(self) -> List[Tuple[str, ModelDims]]:
        resolved = []
        for name in self.models:
            if name == 'custom':
                if self.custom is None:
                    raise QuantConfigError("the custom model needs --d and --n-heads")
                resolved.append((name, ModelDims(*self.custom)))
            elif name in self.presets:
                resolved.append((name, ModelDims(self.presets[name]['d'], self.presets[name]['n_h'])))
            else:
                raise QuantConfigError(f"unknown model preset {name!r}")
        return resolved


def speedup_pct(t_fast: float, t_slow: float) -> float:
    """100 * (1 - t_fast / t_slow); 0 when either time is missing."""
    if not t_slow:
        return 0.0
    return 100.0 * (1.0 - t_fast / t_slow)


def _usage_error(message: str) -> Dict:
    return {"error": message, "exit_code": 2}


# ---------------------------------------------------------------------------
# bench-matmul
# ---------------------------------------------------------------------------

def cmd_bench_matmul(spec: BenchSpec) -> Dict:
    """Median latency of the dense reference GEMV and both fused kernels on P.V-shaped problems."""
    try:
        spec.validate()
    except (QuantConfigError, TensorShapeError) as e:
        return _usage_error(str(e))

    rows, traffic, skipped = [], [], []
    for name, dims in spec.model_dims():
        for seq_len in spec.seq_lens:
            footprint = 2 * 4 * dims.d * seq_len
            if footprint > spec.max_bytes:
                logger.warning("skipping %s @ %d: %d bytes exceeds the %d byte guard",
                               name, seq_len, footprint, spec.max_bytes)
                skipped.append({'model': name, 'seq_len': seq_len, 'bytes': footprint})
                continue

            # reduction over tokens, one output per value channel
            a, b = make_problem((seq_len, dims.d), spec.seed)
            try:
                calls = {method: build_timed_call(KernelChoice(kernel), a, b, spec.quant)
                         for method, kernel in (('matmul', 'reference'), ('outer', 'outer'), ('inner', 'inner'))}
            except KernelVerificationError as e:
                return {"error": f"timing refused: {e}", "exit_code": 1}
            times = {method: measure_median(fn, spec.reps, spec.warmup) for method, fn in calls.items()}
            for method in METHOD_ORDER:
                rows.append({
                    'model': name,
                    'method': method,
                    'seq_len': seq_len,
                    'median_ms': times[method] * 1e3,
                    'speedup_vs_ref_pct': speedup_pct(times[method], times['matmul']),
                    'speedup_vs_outer_pct': speedup_pct(times[method], times['outer']),
                })

            inner = qgemv_inner(a, quantize_matrix(b, GroupingAxis.INNER, spec.quant)).stats
            outer = qgemv_outer(a, quantize_matrix(b, GroupingAxis.OUTER, spec.quant)).stats
            traffic.append({'model': name, 'seq_len': seq_len,
                            'inner_scale_loads': inner.scale_loads, 'outer_scale_loads': outer.scale_loads,
                            'scale_load_ratio': outer.scale_loads / inner.scale_loads})
            logger.info("%s @ %d: inner %.3f ms, outer %.3f ms, matmul %.3f ms",
                        name, seq_len, times['inner'] * 1e3, times['outer'] * 1e3, times['matmul'] * 1e3)

    return {
        "success": True,
        "report": pd.DataFrame(rows, columns=MATMUL_COLUMNS),
        "traffic": pd.DataFrame(traffic, columns=['model', 'seq_len', 'inner_scale_loads',
                                                  'outer_scale_loads', 'scale_load_ratio']),
        "skipped": skipped,
    }


def appendix_table(report: pd.DataFrame) -> pd.DataFrame:
    """Latency table with methods as rows and sequence lengths as columns, plus inner speedup rows."""
    if report.empty:
        return pd.DataFrame(columns=['model', 'method'])
    latency = report.pivot_table(index=['model', 'method'], columns='seq_len', values='median_ms')
    inner = report[report['method'] == 'inner']
    vs_ref = inner.pivot_table(index='model', columns='seq_len', values='speedup_vs_ref_pct')
    vs_outer = inner.pivot_table(index='model', columns='seq_len', values='speedup_vs_outer_pct')
    vs_ref.index = pd.MultiIndex.from_tuples([(m, 'speedup vs matmul (%)') for m in vs_ref.index])
    vs_outer.index = pd.MultiIndex.from_tuples([(m, 'speedup vs outer (%)') for m in vs_outer.index])

    table = pd.concat([latency, vs_ref, vs_outer])
    order = {m: i for i, m in enumerate(METHOD_ORDER + ['speedup vs matmul (%)', 'speedup vs outer (%)'])}
    table = table.reset_index()
    table.columns = ['model', 'method'] + [str(c) for c in table.columns[2:]]
    table['_order'] = table['method'].map(order)
    return table.sort_values(['model', '_order'], kind='stable').drop(columns='_order').reset_index(drop=True)


def to_markdown(df: pd.DataFrame, digits: int = 3) -> str:
    headers = [str(c) for c in df.columns]
    lines = ['| ' + ' | '.join(headers) + ' |', '|' + '|'.join(['---'] * len(headers)) + '|']
    for row in df.itertuples(index=False):
        cells = []
        for value in row:
            if isinstance(value, (float, np.floating)):
                cells.append('' if np.isnan(value) else f"{value:.{digits}f}")
            else:
                cells.append(str(value))
        lines.append('| ' + ' | '.join(cells) + ' |')
    return '\n'.join(lines) + '\n'


# ---------------------------------------------------------------------------
# bench-quant
# ---------------------------------------------------------------------------

def cmd_bench_quant(spec: BenchSpec, bound: float = 1.5) -> Dict:
    """Symmetric vs hybrid quantize_matrix latency on tokens x d matrices."""
    try:
        spec.validate()
        if spec.quant.group_size != 32:
            raise QuantConfigError("hybrid quantization needs group size 32")
    except (QuantConfigError, TensorShapeError) as e:
        return _usage_error(str(e))

    rows, skipped = [], []
    for name, dims in spec.model_dims():
        for seq_len in spec.seq_lens:
            footprint = 4 * dims.d * seq_len
            if footprint > spec.max_bytes:
                logger.warning("skipping %s @ %d: %d bytes exceeds the %d byte guard",
                               name, seq_len, footprint, spec.max_bytes)
                skipped.append({'model': name, 'seq_len': seq_len, 'bytes': footprint})
                continue
            m = generate_matrix(SyntheticDataSpec(seed=spec.seed), seq_len, dims.d)
            t_sym = measure_median(build_timed_call(KernelChoice.QUANTIZE_SYM, None, m, spec.quant),
                                   spec.reps, spec.warmup)
            t_hyb = measure_median(build_timed_call(KernelChoice.QUANTIZE_HYBRID, None, m, spec.quant),
                                   spec.reps, spec.warmup)
            rows.append({'model': name, 'seq_len': seq_len, 'sym_ms': t_sym * 1e3, 'hybrid_ms': t_hyb * 1e3,
                         'ratio': t_hyb / t_sym if t_sym else float('nan')})

    report = pd.DataFrame(rows, columns=QUANT_COLUMNS)
    over = report[report['ratio'] > bound]
    result = {"success": True, "report": report, "skipped": skipped, "bound": bound}
    if not over.empty:
        result = dict(result, success=False, exit_code=1,
                      error=f"hybrid/sym latency ratio above {bound} at {len(over)} grid point(s)")
    return result


# ---------------------------------------------------------------------------
# error-report
# ---------------------------------------------------------------------------

def _pipeline_rows(m: Matrix, axis: GroupingAxis, quant: QuantConfig, label: str,
                   norm: Optional[np.ndarray] = None) -> Tuple[List[Dict], Dict[str, np.ndarray]]:
    """
    Total SSE per mode measured in the original space; `norm` divides columns
    before quantizing. Also returns per-group SSE in the quantized space, where
    the hybrid choice is made.
    """
    target = m if norm is None else Matrix(m.data.astype(np.float64) / norm)
    rows, per_group = [], {}
    for mode in (QuantMode.ASYM, QuantMode.SYM, QuantMode.HYBRID):
        cfg = QuantConfig(bits=quant.bits, group_size=quant.group_size, mode=mode)
        packed = quantize_matrix(target, axis, cfg)
        per_group[mode.value] = matrix_group_sse(target, packed)
        if norm is None:
            sse = per_group[mode.value]
        else:
            recon = dequantize_matrix(packed).data.astype(np.float64) * norm
            diff = m.data.astype(np.float64) - recon
            groups = diff if axis is GroupingAxis.INNER else diff.T
            sse = (np.ascontiguousarray(groups).reshape(-1, quant.group_size) ** 2).sum(axis=1)
        rows.append({'pipeline': label, 'mode': mode.value, 'total_sse': float(sse.sum()),
                     'symmetric_fraction': packed.symmetric_fraction, 'groups': packed.n_groups})
    return rows, per_group


def cmd_error_report(data: SyntheticDataSpec, cfg: QuantConfig, axis: GroupingAxis = GroupingAxis.INNER,
                     rows: int = 1024, cols: int = 128, n_jobs: int = 1) -> Dict:
    """Per-mode reconstruction SSE on synthetic data, raw and with per-channel key normalization."""
    try:
        QuantConfig(bits=cfg.bits, group_size=cfg.group_size, mode=QuantMode.HYBRID)
        m = generate_matrix(data, rows, cols, n_jobs=n_jobs)
        raw_rows, raw_groups = _pipeline_rows(m, GroupingAxis(axis), cfg, 'raw')
    except (QuantConfigError, TensorShapeError) as e:
        return _usage_error(str(e))

    # lazy import keeps attention out of the pure quantizer path
    from attention import compute_key_norm
    norm = compute_key_norm(m).norm_k.data.astype(np.float64)
    norm_rows, norm_groups = _pipeline_rows(m, GroupingAxis(axis), cfg, 'normalized', norm)

    hybrid_is_min = all(
        np.array_equal(groups['hybrid'], np.minimum(groups['sym'], groups['asym']))
        for groups in (raw_groups, norm_groups))
    report = pd.DataFrame(raw_rows + norm_rows, columns=ERROR_COLUMNS)
    raw_hybrid = report[(report.pipeline == 'raw') & (report['mode'] == 'hybrid')]['total_sse'].iloc[0]
    norm_hybrid = report[(report.pipeline == 'normalized') & (report['mode'] == 'hybrid')]['total_sse'].iloc[0]
    summary = {
        'hybrid_is_min': hybrid_is_min,
        'raw_hybrid_sse': raw_hybrid,
        'normalized_hybrid_sse': norm_hybrid,
        'normalization_reduction_pct': speedup_pct(norm_hybrid, raw_hybrid),
    }
    if not hybrid_is_min:
        return {"error": "hybrid SSE differs from the per-group minimum of the two modes",
                "exit_code": 1, "report": report, "summary": summary}
    return {"success": True, "report": report, "summary": summary}


# ---------------------------------------------------------------------------
# simulate-decode
# ---------------------------------------------------------------------------

def _run_model(dims: ModelDims, cfg: AttentionConfig, prefill_len: int, decode_steps: int, seed: int,
               track_errors: bool = True):
    """Prefill plus decode on random weights, yielding per-step records alongside the live cache."""
    weights = random_weights(dims, seed)
    x = generate_matrix(SyntheticDataSpec(seed=seed + 1), prefill_len + decode_steps, dims.d)
    result = prefill(slice_rows(x, 0, prefill_len), weights, dims, cfg)
    shadow = FullPrecisionShadow(weights, dims, cfg.rope) if track_errors else None
    prefill_error = 0.0
    if shadow is not None:
        expected = shadow.prefill(slice_rows(x, 0, prefill_len))
        prefill_error = float(np.max(np.abs(result.output.data - expected.data)))
    return x, result, shadow, prefill_error


def cmd_simulate_decode(dims: ModelDims, cfg: AttentionConfig, prefill_len: int, decode_steps: int,
                        seed: int = 0, error_bound: Optional[float] = None) -> Dict:
    """
    Run prefill and decode_steps decode steps against a full-precision shadow.

    Reports per-step max |output - shadow|, the cache layout and estimated
    footprint, and every invariant violation (token conservation, frozen
    sink, recent-window range, and the 1e-5 bound when quantization is off).
    """
    if prefill_len < 1 or decode_steps < 0:
        return _usage_error(f"need prefill_len >= 1 and decode_steps >= 0, got {prefill_len}/{decode_steps}")
    try:
        dims.check_group_size(cfg.cache.quant.group_size)
        x, result, shadow, prefill_error = _run_model(dims, cfg, prefill_len, decode_steps, seed)
    except (QuantConfigError, TensorShapeError) as e:
        return _usage_error(str(e))

    cache, weights = result.cache, result.folded_weights
    if error_bound is None and not cfg.cache.quantize:
        error_bound = 1e-5
    window = cfg.cache.window
    g = cfg.cache.quant.group_size
    sink_bytes = (cache.k_sink.data.tobytes(), cache.v_sink.data.tobytes())
    violations: List[str] = []

    def _record(step: int, error: float) -> Dict:
        lay = cache.layout()
        conserved = cache.check_conservation()
        if not conserved:
            violations.append(f"step {step}: token conservation broken {lay}")
        if (cache.k_sink.data.tobytes(), cache.v_sink.data.tobytes()) != sink_bytes:
            violations.append(f"step {step}: sink window changed")
        if cfg.cache.quantize and lay['total_tokens'] >= window.w_sink + window.w_recent + g:
            for name in ('k_recent', 'v_recent'):
                if not window.w_recent <= lay[name] < window.w_recent + g:
                    violations.append(f"step {step}: {name}={lay[name]} outside [{window.w_recent}, "
                                      f"{window.w_recent + g})")
        if error_bound is not None and error > error_bound:
            violations.append(f"step {step}: max error {error:.3e} above {error_bound:.1e}")
        return dict(step=step, max_abs_error=error, conserved=conserved, **lay)

    records = [_record(0, prefill_error)]
    for step in range(1, decode_steps + 1):
        row = x.row(prefill_len + step - 1)
        out = decode_step(row, cache, weights, dims, cfg).output
        expected = shadow.step(row)
        records.append(_record(step, float(np.max(np.abs(out.data - expected.data)))))

    footprint = cache.footprint_bits()
    report = pd.DataFrame(records, columns=DECODE_COLUMNS)
    summary = {
        'layout': cache.layout(),
        'footprint_bits': footprint,
        'footprint_bytes': -(-footprint['total'] // 8),
        'max_abs_error': float(report['max_abs_error'].max()),
        'conserved': bool(report['conserved'].all()),
        'violations': violations,
    }
    if violations:
        return {"error": f"{len(violations)} invariant violation(s): {violations[0]}", "exit_code": 1,
                "report": report, "summary": summary}
    return {"success": True, "report": report, "summary": summary}


# ---------------------------------------------------------------------------
# dump / load
# ---------------------------------------------------------------------------

def cmd_dump(path: str, dims: ModelDims, cfg: AttentionConfig, prefill_len: int, decode_steps: int = 0,
             seed: int = 0) -> Dict:
    """Build a cache by prefill + decode on random weights and write its snapshot directory."""
    try:
        dims.check_group_size(cfg.cache.quant.group_size)
        x, result, _, _ = _run_model(dims, cfg, prefill_len, decode_steps, seed, track_errors=False)
    except (QuantConfigError, TensorShapeError) as e:
        return _usage_error(str(e))
    cache = result.cache
    for step in range(decode_steps):
        decode_step(x.row(prefill_len + step), cache, result.folded_weights, dims, cfg)
    files = save_snapshot(cache, path)
    return {"success": True, "files": files, "layout": cache.layout()}


def cmd_load(path: str) -> Dict:
    """Load a snapshot and confirm it re-serializes to the same bytes."""
    try:
        cache = load_snapshot(path)
    except SnapshotFormatError as e:
        return {"error": f"{type(e).__name__}: {e}", "exit_code": 1}
    mismatched = []
    for filename, blob in cache.snapshot_bytes().items():
        with open(os.path.join(path, filename), 'rb') as f:
            if f.read() != blob:
                mismatched.append(filename)
    if mismatched:
        return {"error": f"re-serialized snapshot differs in {mismatched}", "exit_code": 1}
    return {"success": True, "layout": cache.layout(), "byte_identical": True}


# ---------------------------------------------------------------------------
# click surface
# ---------------------------------------------------------------------------

def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=getattr(logging, (level or settings.LOG_LEVEL).upper(), logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        stream=sys.stderr)


def _build_cache_config(bits: int, group_size: int, mode: str, w_sink: int, w_recent: int) -> CacheConfig:
    quantize = bits != DISABLED_BITS
    quant = QuantConfig(bits=bits if quantize else _DISABLED_PLACEHOLDER_BITS, group_size=group_size, mode=mode)
    return CacheConfig(quant=quant, window=WindowConfig(w_sink, w_recent), quantize=quantize)


def _emit(df: pd.DataFrame, out: Optional[str], fmt: str, markdown: Optional[str] = None) -> None:
    text = df.to_csv(index=False) if fmt == 'csv' else (markdown if markdown is not None else to_markdown(df))
    if out:
        with open(out, 'w') as f:
            f.write(text)
        click.echo(f"✅ Report written to {out}", err=True)
    else:
        click.echo(text, nl=False)


def _finish(result: Dict) -> None:
    if "error" in result:
        click.echo(f"❌ {result['error']}", err=True)
        sys.exit(result.get("exit_code", 1))


# flag names whose parameter is named differently
_CONFIG_ALIASES = {'seq_len': 'seq_lens', 'model': 'models', 'format': 'fmt'}


def _load_config_file(ctx, param, value):
    """Flat JSON object of flag names applied as defaults to every subcommand."""
    if not value:
        return value
    try:
        with open(value, 'r') as f:
            flat = json.load(f)
    except (OSError, ValueError) as e:
        raise click.BadParameter(f"cannot read config file: {e}")
    if not isinstance(flat, dict):
        raise click.BadParameter("config file must hold a JSON object")
    flat = {str(k).replace('-', '_'): v for k, v in flat.items()}
    flat = {_CONFIG_ALIASES.get(k, k): v for k, v in flat.items()}
    for name in ('seq_lens', 'models'):
        if name in flat and not isinstance(flat[name], list):
            flat[name] = [flat[name]]
    if 'group_size' in flat:
        flat['group_size'] = str(flat['group_size'])
    if isinstance(flat.get('normalize'), bool):
        flat['normalize'] = 'on' if flat['normalize'] else 'off'
    ctx.default_map = {name: dict(flat) for name in cli.commands}
    return value


def common_options(fn):
    options = [
        click.option('--seed', type=int, default=settings.SEED, show_default=True),
        click.option('--group-size', type=click.Choice(['8', '16', '32']), default=str(settings.GROUP_SIZE),
                     show_default=True),
        click.option('--bits', type=click.IntRange(1, DISABLED_BITS), default=settings.BITS, show_default=True,
                     help=f'Code width; {DISABLED_BITS} keeps the cache full precision.'),
        click.option('--mode', type=click.Choice([m.value for m in QuantMode]), default=settings.QUANT_MODE,
                     show_default=True),
        click.option('--w-sink', type=int, default=settings.W_SINK, show_default=True),
        click.option('--w-recent', type=int, default=settings.W_RECENT, show_default=True),
        click.option('--normalize', type=click.Choice(['on', 'off']),
                     default='on' if settings.NORMALIZE_KEYS else 'off', show_default=True),
        click.option('--out', type=click.Path(dir_okay=False), default=None, help='Write the report here.'),
        click.option('--format', 'fmt', type=click.Choice(['csv', 'md']), default='csv', show_default=True),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def bench_options(fn):
    presets = sorted(load_model_presets())
    options = [
        click.option('--model', 'models', multiple=True, type=click.Choice(presets + ['custom']),
                     help='Model preset (repeatable).'),
        click.option('--d', type=int, default=None, help='Model width for --model custom.'),
        click.option('--n-heads', type=int, default=None, help='Head count for --model custom.'),
        click.option('--seq-len', 'seq_lens', multiple=True, type=int, help='Sequence length (repeatable).'),
        click.option('--warmup', type=int, default=settings.WARMUP, show_default=True),
        click.option('--reps', type=int, default=settings.REPS, show_default=True),
        click.option('--max-bytes', type=int, default=settings.MAX_BYTES, show_default=True),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _bench_spec(models, d, n_heads, seq_lens, warmup, reps, max_bytes, seed, bits, group_size, mode) -> BenchSpec:
    custom = (d, n_heads) if d is not None and n_heads is not None else None
    if (d is None) != (n_heads is None):
        raise click.UsageError("--d and --n-heads go together")
    models = tuple(models) or (('custom',) if custom else ('llama-3.1-8b',))
    try:
        quant = QuantConfig(bits=bits, group_size=int(group_size), mode=mode)
    except QuantConfigError as e:
        raise click.UsageError(str(e))
    return BenchSpec(models=models, seq_lens=tuple(seq_lens) or tuple(DEFAULT_SEQ_LENS), warmup=warmup,
                     reps=reps, seed=seed, quant=quant, max_bytes=max_bytes, custom=custom)


def _attention_config(bits, group_size, mode, w_sink, w_recent, normalize, head_jobs=1) -> AttentionConfig:
    try:
        cache_cfg = _build_cache_config(bits, int(group_size), mode, w_sink, w_recent)
    except QuantConfigError as e:
        raise click.UsageError(str(e))
    return AttentionConfig(cache=cache_cfg, normalize=normalize == 'on',
                           rope=RopeParams(theta_base=settings.ROPE_THETA), head_jobs=head_jobs)


def _model_dims(preset, d, n_heads) -> ModelDims:
    if preset:
        presets = load_model_presets()
        if preset not in presets:
            raise click.UsageError(f"unknown preset {preset!r}")
        d, n_heads = presets[preset]['d'], presets[preset]['n_h']
    try:
        return ModelDims(d, n_heads)
    except TensorShapeError as e:
        raise click.UsageError(str(e))


@click.group()
@click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False), callback=_load_config_file,
              is_eager=True, expose_value=False, help='JSON file of flag defaults; explicit flags win.')
@click.option('--verbose', '-v', is_flag=True, help='Debug logging.')
def cli(verbose):
    """Quantized KV cache benchmarks, error reports and decode simulation."""
    configure_logging('DEBUG' if verbose else None)


@cli.command('bench-matmul')
@bench_options
@common_options
def bench_matmul_command(models, d, n_heads, seq_lens, warmup, reps, max_bytes,
                         seed, group_size, bits, mode, w_sink, w_recent, normalize, out, fmt):
    """Reference GEMV vs inner- and outer-grouped fused kernels.

    CSV columns: model, method, seq_len, median_ms, speedup_vs_ref_pct,
    speedup_vs_outer_pct.
    """
    spec = _bench_spec(models, d, n_heads, seq_lens, warmup, reps, max_bytes, seed, bits, group_size, mode)
    click.echo(f"📊 Timing {len(spec.models)} model(s) x {len(spec.seq_lens)} sequence length(s), "
               f"{spec.reps} reps after {spec.warmup} warmup", err=True)
    result = cmd_bench_matmul(spec)
    _finish(result)
    for skip in result["skipped"]:
        click.echo(f"⚠️ Skipped {skip['model']} @ {skip['seq_len']} ({skip['bytes']} bytes)", err=True)
    markdown = None
    if fmt == 'md':
        markdown = to_markdown(appendix_table(result["report"]))
        for rec in result["traffic"].itertuples(index=False):
            markdown += (f"\n{rec.model} @ {rec.seq_len}: scale loads outer/inner = "
                         f"{rec.outer_scale_loads}/{rec.inner_scale_loads} = {rec.scale_load_ratio:g}")
        markdown += "\n"
    _emit(result["report"], out, fmt, markdown)


@cli.command('bench-quant')
@bench_options
@click.option('--bound', type=float, default=settings.HYBRID_LATENCY_BOUND, show_default=True,
              help='Largest accepted hybrid/sym latency ratio.')
@common_options
def bench_quant_command(models, d, n_heads, seq_lens, warmup, reps, max_bytes, bound,
                        seed, group_size, bits, mode, w_sink, w_recent, normalize, out, fmt):
    """Symmetric vs hybrid quantization latency.

    CSV columns: model, seq_len, sym_ms, hybrid_ms, ratio.
    """
    spec = _bench_spec(models, d, n_heads, seq_lens, warmup, reps, max_bytes, seed, bits, group_size, 'hybrid')
    result = cmd_bench_quant(spec, bound)
    if "report" in result:
        _emit(result["report"], out, fmt)
    _finish(result)


@cli.command('error-report')
@click.option('--distribution', type=click.Choice([d.value for d in Distribution]),
              default=Distribution.GAUSSIAN.value, show_default=True)
@click.option('--sigma', type=float, default=1.0, show_default=True)
@click.option('--outlier-channels', type=int, default=4, show_default=True)
@click.option('--outlier-scale', type=float, default=50.0, show_default=True)
@click.option('--rows', type=int, default=1024, show_default=True)
@click.option('--cols', type=int, default=128, show_default=True)
@click.option('--axis', type=click.Choice([a.value for a in GroupingAxis]), default='inner', show_default=True)
@common_options
def error_report_command(distribution, sigma, outlier_channels, outlier_scale, rows, cols, axis,
                         seed, group_size, bits, mode, w_sink, w_recent, normalize, out, fmt):
    """Per-mode SSE, hybrid symmetric fraction and the effect of key normalization.

    CSV columns: pipeline, mode, total_sse, symmetric_fraction, groups.
    """
    try:
        data = SyntheticDataSpec(distribution, sigma,
                                 outlier_channels if distribution == Distribution.CHANNEL_OUTLIERS.value else 0,
                                 outlier_scale, seed)
        quant = QuantConfig(bits=bits, group_size=int(group_size), mode=QuantMode.ASYM)
    except QuantConfigError as e:
        raise click.UsageError(str(e))
    result = cmd_error_report(data, quant, GroupingAxis(axis), rows, cols)
    if "report" in result:
        _emit(result["report"], out, fmt)
    _finish(result)
    s = result["summary"]
    click.echo(f"📊 hybrid SSE raw {s['raw_hybrid_sse']:.6g}, normalized {s['normalized_hybrid_sse']:.6g} "
               f"({s['normalization_reduction_pct']:.2f}% reduction)", err=True)


def decode_options(fn):
    options = [
        click.option('--preset', default=None, help='Model preset instead of --d/--n-heads.'),
        click.option('--d', type=int, default=128, show_default=True),
        click.option('--n-heads', type=int, default=4, show_default=True),
        click.option('--prefill-len', type=int, default=300, show_default=True),
        click.option('--decode-steps', type=int, default=16, show_default=True),
        click.option('--head-jobs', type=int, default=settings.HEAD_JOBS, show_default=True),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


@cli.command('simulate-decode')
@decode_options
@common_options
def simulate_decode_command(preset, d, n_heads, prefill_len, decode_steps, head_jobs,
                            seed, group_size, bits, mode, w_sink, w_recent, normalize, out, fmt):
    """Prefill plus decode on random weights against a full-precision shadow.

    CSV columns: step, total_tokens, max_abs_error, k_sink, k_quantized,
    k_recent, v_sink, v_quantized, v_recent, conserved.
    """
    dims = _model_dims(preset, d, n_heads)
    cfg = _attention_config(bits, group_size, mode, w_sink, w_recent, normalize, head_jobs)
    result = cmd_simulate_decode(dims, cfg, prefill_len, decode_steps, seed)
    if "report" in result:
        _emit(result["report"], out, fmt)
    _finish(result)
    s = result["summary"]
    click.echo(f"✅ layout {s['layout']}; cache {s['footprint_bytes']} bytes; max error {s['max_abs_error']:.3e}",
               err=True)


@cli.command('dump')
@click.argument('path', type=click.Path(file_okay=False))
@decode_options
@common_options
def dump_command(path, preset, d, n_heads, prefill_len, decode_steps, head_jobs,
                 seed, group_size, bits, mode, w_sink, w_recent, normalize, out, fmt):
    """Write a cache snapshot directory built from a simulated run."""
    dims = _model_dims(preset, d, n_heads)
    cfg = _attention_config(bits, group_size, mode, w_sink, w_recent, normalize, head_jobs)
    result = cmd_dump(path, dims, cfg, prefill_len, decode_steps, seed)
    _finish(result)
    click.echo(f"✅ Snapshot written to {path}: {result['layout']}")


@cli.command('load')
@click.argument('path', type=click.Path(exists=True, file_okay=False))
def load_command(path):
    """Load a snapshot directory and verify it round-trips byte for byte."""
    result = cmd_load(path)
    _finish(result)
    click.echo(f"✅ Snapshot {path} is byte-identical after reload: {result['layout']}")


def main():
    try:
        cli(prog_name='kvq')
    except KVQuantError as e:
        click.echo(f"❌ {e}", err=True)
        sys.exit(1)


if __name__ == '__main__':
    main()
