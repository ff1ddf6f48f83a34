#!/usr/bin/env python3
"""
Tests for the fused dequantize-multiply kernels, their traffic counters and
the timing helpers.
"""

import os
import sys
import time

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest

import kernels
from exceptions import KernelVerificationError, QuantConfigError, TensorShapeError
from kernels import (KernelChoice, KernelReport, TrafficStats, build_timed_call, make_problem, measure_median,
                     qgemv_inner, qgemv_outer, reference_product, time_kernel, verify_kernel, within_tolerance)
from quantizer import GroupingAxis, PackedMatrix, QuantConfig, quantize_matrix
from tensor_core import Matrix, Vector


def _instance(k, n_out, cfg, axis, seed):
    rng = np.random.default_rng(seed)
    a = Vector(rng.standard_normal(k))
    b = Matrix(rng.standard_normal((n_out, k)))
    return a, b, quantize_matrix(b, axis, cfg)


def _zero_code_matrix(rows, cols, axis, cfg):
    n = rows * cols // cfg.group_size
    scales = np.random.default_rng(0).uniform(0.1, 2.0, n).astype(np.float32)
    return PackedMatrix(rows, cols, axis, cfg, np.zeros(n * cfg.words_per_group, dtype=np.uint32), scales,
                        np.zeros(n, dtype=np.uint32), np.ones(n, dtype=bool))


def test_zero_codes_give_zero_output():
    cfg = QuantConfig(mode='asym')
    a = Vector(np.random.default_rng(1).standard_normal(64))
    inner = qgemv_inner(a, _zero_code_matrix(4, 64, GroupingAxis.INNER, cfg))
    outer = qgemv_outer(a, _zero_code_matrix(64, 64, GroupingAxis.OUTER, cfg))
    np.testing.assert_array_equal(inner.output.data, np.zeros(4))
    np.testing.assert_array_equal(outer.output.data, np.zeros(64))


def test_small_hybrid_instance_and_scale_loads():
    a, _, packed = _instance(64, 4, QuantConfig(mode='hybrid'), GroupingAxis.INNER, seed=2)
    report = qgemv_inner(a, packed)
    assert isinstance(report, KernelReport)
    assert within_tolerance(report.output, reference_product(a, packed))
    assert report.stats.scale_loads == 8
    assert report.stats.aux_loads == 8
    assert report.stats.code_word_loads == 8 * packed.config.words_per_group


def test_outer_instance_and_scale_loads():
    cfg = QuantConfig(mode='hybrid')
    a, b, outer = _instance(64, 64, cfg, GroupingAxis.OUTER, seed=3)
    report = qgemv_outer(a, outer)
    assert within_tolerance(report.output, reference_product(a, outer))
    assert report.stats.scale_loads == 64 * 64
    inner = qgemv_inner(a, quantize_matrix(b, GroupingAxis.INNER, cfg))
    assert report.stats.scale_loads // inner.stats.scale_loads == 32
    assert report.stats.flops == inner.stats.flops


def test_kernel_equivalence_on_random_instances():
    rng = np.random.default_rng(4)
    modes = ['asym', 'sym', 'hybrid', 'hybrid-prefill']
    for i in range(500):
        mode = modes[i % len(modes)]
        g = 32 if mode.startswith('hybrid') else int(rng.choice([8, 16, 32]))
        cfg = QuantConfig(bits=int(rng.choice([2, 4])), group_size=g, mode=mode)
        k = int(rng.choice([64, 256, 4096]))
        if i % 2:
            axis, n_out = GroupingAxis.OUTER, int(rng.choice([g, 2 * g]))
        else:
            axis, n_out = GroupingAxis.INNER, int(rng.integers(1, 65))
        a, _, packed = _instance(k, n_out, cfg, axis, seed=1000 + i)
        out = kernels.run_kernel(a, packed).output
        expected = reference_product(a, packed)
        err = np.max(np.abs(out.data.astype(np.float64) - expected.data))
        assert err <= 1e-4 * (1 + np.max(np.abs(expected.data))), (i, mode, axis, k, n_out)


def test_inner_and_outer_agree_on_the_same_matrix():
    """Integer entries with a +-3 in every group of either layout quantize exactly under both groupings."""
    cfg = QuantConfig(mode='sym', group_size=16)
    rng = np.random.default_rng(5)
    n_out, k = 32, 256
    b = rng.integers(-3, 4, size=(n_out, k)).astype(np.float32)
    n_idx, k_idx = np.indices(b.shape)
    b[(n_idx + k_idx) % cfg.group_size == 0] = 3.0
    b = Matrix(b)
    a = Vector(rng.standard_normal(k))
    inner = qgemv_inner(a, quantize_matrix(b, GroupingAxis.INNER, cfg)).output.data.astype(np.float64)
    outer = qgemv_outer(a, quantize_matrix(b, GroupingAxis.OUTER, cfg)).output.data.astype(np.float64)
    tol = 2e-4 * (1 + np.max(np.abs(inner)))
    assert np.max(np.abs(inner - outer)) <= tol
    np.testing.assert_allclose(inner, b.data.astype(np.float64) @ a.data.astype(np.float64), rtol=1e-6, atol=1e-5)


def test_traffic_ratio_is_group_size():
    for g, mode in ((8, 'asym'), (16, 'sym'), (32, 'hybrid')):
        cfg = QuantConfig(group_size=g, mode=mode)
        for k, n_out in ((g, g), (4 * g, 2 * g), (8 * g, 3 * g)):
            a, b, inner = _instance(k, n_out, cfg, GroupingAxis.INNER, seed=k + n_out)
            outer = quantize_matrix(b, GroupingAxis.OUTER, cfg)
            s_in = qgemv_inner(a, inner).stats
            s_out = qgemv_outer(a, outer).stats
            assert s_in.scale_loads == n_out * k // g
            assert s_out.scale_loads == n_out * k
            assert s_out.scale_loads == g * s_in.scale_loads


def test_scratch_stays_within_one_group_per_lane():
    cfg = QuantConfig()
    for axis, n_out in ((GroupingAxis.INNER, 5), (GroupingAxis.OUTER, 64)):
        a, _, packed = _instance(256, n_out, cfg, axis, seed=6)
        sizes = []
        fn = qgemv_inner if axis is GroupingAxis.INNER else qgemv_outer
        fn(a, packed, scratch_hook=sizes.append)
        assert sizes and max(sizes) <= cfg.group_size


def test_outputs_are_deterministic():
    a, _, packed = _instance(512, 17, QuantConfig(), GroupingAxis.INNER, seed=7)
    first = qgemv_inner(a, packed).output.data.tobytes()
    assert all(qgemv_inner(a, packed).output.data.tobytes() == first for _ in range(3))


def test_shape_and_axis_mismatch():
    a, _, packed = _instance(64, 4, QuantConfig(), GroupingAxis.INNER, seed=8)
    with pytest.raises(TensorShapeError):
        qgemv_outer(a, packed)
    with pytest.raises(TensorShapeError):
        qgemv_inner(Vector(np.zeros(32)), packed)


def test_empty_output_dimension():
    packed = PackedMatrix.empty(0, 64, GroupingAxis.INNER, QuantConfig())
    report = qgemv_inner(Vector(np.ones(64)), packed)
    assert report.output.len == 0 and report.stats == TrafficStats()


def test_verify_kernel_refuses_a_broken_kernel(monkeypatch):
    a, b, packed = _instance(64, 8, QuantConfig(), GroupingAxis.INNER, seed=9)
    verify_kernel(a, packed)

    def broken(vec, matrix, scratch_hook=None):
        return KernelReport(Vector(np.full(matrix.logical_rows, 1e3)), TrafficStats())

    monkeypatch.setattr(kernels, 'qgemv_inner', broken)
    with pytest.raises(KernelVerificationError):
        verify_kernel(a, packed)
    with pytest.raises(KernelVerificationError):
        build_timed_call(KernelChoice.INNER, a, b, QuantConfig())


def test_measure_median_protocol():
    calls = []
    median = measure_median(lambda: calls.append(1), reps=1, warmup=3)
    assert len(calls) == 4 and median >= 0.0
    with pytest.raises(QuantConfigError, match='reps'):
        measure_median(lambda: None, reps=0, warmup=0)
    with pytest.raises(QuantConfigError, match='warmup'):
        measure_median(lambda: None, reps=1, warmup=-1)


def test_measure_median_of_a_fixed_sleep():
    median = measure_median(lambda: time.sleep(0.005), reps=7, warmup=1)
    assert 0.004 <= median < 0.1


def test_time_kernel_defaults_and_errors():
    import inspect
    params = inspect.signature(time_kernel).parameters
    assert params['reps'].default == 1000 and params['warmup'].default == 100
    with pytest.raises(TensorShapeError):
        time_kernel(KernelChoice.INNER, (0, 32), reps=1, warmup=0)
    for choice in KernelChoice:
        assert time_kernel(choice, (64, 32), reps=2, warmup=1) > 0.0


def test_make_problem_is_seeded():
    a1, b1 = make_problem((64, 8), seed=3)
    a2, b2 = make_problem((64, 8), seed=3)
    assert b1.equals(b2) and a1.data.tobytes() == a2.data.tobytes()
    assert b1.shape == (8, 64)


def main():
    print("🚀 Kernel tests")
    code = pytest.main([__file__, '-q'])
    print("✅ All tests passed!" if code == 0 else "❌ Some tests failed.")
    sys.exit(code)


if __name__ == "__main__":
    main()
