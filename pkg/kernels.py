"""
Fused dequantize-multiply vector-matrix kernels.

Both kernels compute out[n] = sum_k B[n, k] * a[k] for a PackedMatrix B whose
rows are output elements and whose columns are the reduction dimension.
Dequantization happens one group slab at a time inside the loop; the full
dequantized matrix is never built.

Traffic counters follow a per-row fetch model: one scale and one aux word are
loaded for every (output element, group touched) pair, with no cache between
rows. With Inner grouping an output element touches K/G groups, with Outer
grouping it touches K.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np

from exceptions import KernelVerificationError, QuantConfigError, TensorShapeError
from quantizer import GroupingAxis, PackedMatrix, QuantConfig, QuantMode, dequantize_matrix, quantize_matrix
from tensor_core import Matrix, Vector, matmul_ref, transpose

logger = logging.getLogger(__name__)

# multiply + accumulate, plus scale multiply and zero-point add (or sign) on dequantization
FLOPS_PER_ELEMENT = 4


@dataclass
class TrafficStats:
    scale_loads: int = 0
    aux_loads: int = 0
    code_word_loads: int = 0
    flops: int = 0

    def tally(self, groups_touched: int, words: int, elements: int) -> None:
        self.scale_loads += groups_touched
        self.aux_loads += groups_touched
        self.code_word_loads += words
        self.flops += FLOPS_PER_ELEMENT * elements


@dataclass(frozen=True)
class KernelReport:
    output: Vector
    stats: TrafficStats


class KernelChoice(str, Enum):
    REFERENCE = 'reference'
    INNER = 'inner'
    OUTER = 'outer'
    QUANTIZE_SYM = 'quantize-sym'
    QUANTIZE_HYBRID = 'quantize-hybrid'


def _check_operands(a: Vector, b: PackedMatrix, axis: GroupingAxis) -> None:
    if b.grouping_axis is not axis:
        raise TensorShapeError(f"kernel expects {axis.value} grouping, matrix is {b.grouping_axis.value}")
    if a.len != b.logical_cols:
        raise TensorShapeError(f"vector length {a.len} does not match reduction dimension {b.logical_cols}")


def qgemv_inner(a: Vector, b_packed: PackedMatrix,
                scratch_hook: Optional[Callable[[int], None]] = None) -> KernelReport:
    """Groups run along the reduction dimension, so each scale covers G multiply-adds."""
    _check_operands(a, b_packed, GroupingAxis.INNER)
    cfg = b_packed.config
    g_size = cfg.group_size
    n_out = b_packed.logical_rows
    per_line = b_packed.groups_per_line
    x = a.data.astype(np.float64)
    acc = np.zeros(n_out, dtype=np.float64)
    stats = TrafficStats()
    line_base = np.arange(n_out, dtype=np.int64) * per_line

    if n_out:
        for g in range(per_line):
            slab = b_packed.dequantize_groups(line_base + g)  # (n_out, G)
            if scratch_hook is not None:
                scratch_hook(slab.shape[1])
            acc += (slab.astype(np.float64) * x[g * g_size:(g + 1) * g_size]).sum(axis=1)
            stats.tally(n_out, n_out * cfg.words_per_group, n_out * g_size)

    return KernelReport(Vector(acc.astype(np.float32)), stats)


def qgemv_outer(a: Vector, b_packed: PackedMatrix,
                scratch_hook: Optional[Callable[[int], None]] = None) -> KernelReport:
    """Groups run across output elements; every reduction step needs a fresh scale per output."""
    _check_operands(a, b_packed, GroupingAxis.OUTER)
    cfg = b_packed.config
    g_size = cfg.group_size
    n_out = b_packed.logical_rows
    k_total = b_packed.logical_cols
    per_line = b_packed.groups_per_line
    x = a.data.astype(np.float64)
    acc = np.zeros(n_out, dtype=np.float64)
    stats = TrafficStats()

    if n_out:
        for start in range(0, k_total, g_size):
            stop = min(start + g_size, k_total)
            cols = np.arange(start, stop, dtype=np.int64)
            idx = (cols[:, None] * per_line + np.arange(per_line, dtype=np.int64)).ravel()
            slab = b_packed.dequantize_groups(idx).reshape(stop - start, n_out)  # column-major block
            if scratch_hook is not None:
                scratch_hook(slab.shape[0])
            acc += (slab.astype(np.float64) * x[start:stop, None]).sum(axis=0)
            stats.tally((stop - start) * n_out, idx.size * cfg.words_per_group, (stop - start) * n_out)

    return KernelReport(Vector(acc.astype(np.float32)), stats)


def reference_product(a: Vector, b_packed: PackedMatrix) -> Vector:
    """Dequantize-then-multiply oracle for both kernels."""
    dense = dequantize_matrix(b_packed)
    return Vector(matmul_ref(a.as_row(), transpose(dense)).data[0])


def within_tolerance(output: Vector, expected: Vector, rel: float = 1e-4) -> bool:
    """|out - expected|_inf <= rel * (1 + |expected|_inf)."""
    if output.len != expected.len:
        return False
    if output.len == 0:
        return True
    err = np.max(np.abs(output.data.astype(np.float64) - expected.data.astype(np.float64)))
    return bool(err <= rel * (1.0 + np.max(np.abs(expected.data))))


def run_kernel(a: Vector, b_packed: PackedMatrix) -> KernelReport:
    if b_packed.grouping_axis is GroupingAxis.INNER:
        return qgemv_inner(a, b_packed)
    return qgemv_outer(a, b_packed)


def verify_kernel(a: Vector, b_packed: PackedMatrix, sample_rows: int = 32, rel: float = 1e-4) -> None:
    """Spot-check a kernel against the oracle on the leading output rows."""
    g_size = b_packed.config.group_size
    rows = min(sample_rows, b_packed.logical_rows)
    if b_packed.grouping_axis is GroupingAxis.OUTER:
        rows = max(g_size, rows - rows % g_size) if b_packed.logical_rows else 0
    sample = b_packed.select_rows(0, rows)
    got = run_kernel(a, sample).output
    expected = reference_product(a, sample)
    if not within_tolerance(got, expected, rel):
        raise KernelVerificationError(
            f"{b_packed.grouping_axis.value} kernel disagrees with the reference on {rows} sampled rows")


def measure_median(fn: Callable[[], object], reps: int, warmup: int) -> float:
    """Run warmup unmeasured calls, then reps timed calls on one dedicated thread; median seconds."""
    if reps < 1:
        raise QuantConfigError(f"reps must be >= 1, got {reps}")
    if warmup < 0:
        raise QuantConfigError(f"warmup must be >= 0, got {warmup}")

    def _timed():
        for _ in range(warmup):
            fn()
        samples = np.empty(reps, dtype=np.float64)
        for i in range(reps):
            started = time.perf_counter()
            fn()
            samples[i] = time.perf_counter() - started
        return float(np.median(samples))

    with ThreadPoolExecutor(max_workers=1, thread_name_prefix='kvq-timer') as pool:
        return pool.submit(_timed).result()


def make_problem(problem: Tuple[int, int], seed: int = 0) -> Tuple[Vector, Matrix]:
    """Random (vector of len K, N_out x K matrix) pair for a (K, N_out) problem."""
    k, n_out = problem
    if k <= 0 or n_out <= 0:
        raise TensorShapeError(f"zero-size problem {problem}")
    rng = np.random.default_rng(seed)
    a = Vector(rng.standard_normal(k).astype(np.float32))
    b = Matrix(rng.standard_normal((n_out, k)).astype(np.float32))
    return a, b


def build_timed_call(kernel: KernelChoice, a: Vector, b: Matrix, cfg: QuantConfig,
                     verify: bool = True) -> Callable[[], object]:
    """Prepare inputs for one kernel choice; the returned callable is what gets timed."""
    kernel = KernelChoice(kernel)
    if kernel is KernelChoice.REFERENCE:
        dense = np.ascontiguousarray(b.data)
        vec = a.data
        return lambda: dense @ vec
    if kernel in (KernelChoice.INNER, KernelChoice.OUTER):
        axis = GroupingAxis.INNER if kernel is KernelChoice.INNER else GroupingAxis.OUTER
        packed = quantize_matrix(b, axis, cfg)
        if verify:
            verify_kernel(a, packed)
        fn = qgemv_inner if axis is GroupingAxis.INNER else qgemv_outer
        return lambda: fn(a, packed)
    mode = QuantMode.SYM if kernel is KernelChoice.QUANTIZE_SYM else QuantMode.HYBRID
    qcfg = QuantConfig(bits=cfg.bits, group_size=cfg.group_size, mode=mode)
    return lambda: quantize_matrix(b, GroupingAxis.INNER, qcfg)


def time_kernel(kernel: KernelChoice, problem: Tuple[int, int], reps: int = 1000, warmup: int = 100,
                cfg: Optional[QuantConfig] = None, seed: int = 0) -> float:
    """Median latency in seconds of one kernel on a (K, N_out) problem."""
    cfg = cfg or QuantConfig()
    a, b = make_problem(problem, seed)
    call = build_timed_call(kernel, a, b, cfg)
    median = measure_median(call, reps, warmup)
    logger.debug("%s %s: median %.6f ms over %d reps", KernelChoice(kernel).value, problem, median * 1e3, reps)
    return median
