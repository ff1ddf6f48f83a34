#!/usr/bin/env python3
"""
Tests for the windowed quantized KV cache: prefill partitioning, decode
eviction cadence, reconstruction and snapshots.
"""

import json
import os
import sys

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest

from exceptions import CacheStateError, QuantConfigError, SnapshotFormatError, TensorShapeError, \
    UnsupportedVersionError
from kv_cache import (CacheConfig, QuantizedKVCache, WindowConfig, append_token, assemble_key_views,
                      assemble_value_views, init_from_prefill, load_snapshot, save_snapshot)
from quantizer import GroupingAxis, QuantConfig, dequantize_matrix, estimate_packed_bits
from tensor_core import Matrix, Vector, save_tensor, slice_rows

D = 64


def _tokens(n, d=D, seed=0):
    rng = np.random.default_rng(seed)
    return Matrix(rng.standard_normal((n, d))), Matrix(rng.standard_normal((n, d)))


def _cache(n, cfg=None, seed=0):
    k, v = _tokens(n, seed=seed)
    return init_from_prefill(k, v, cfg or CacheConfig())


def _row(rng, d=D):
    return Vector(rng.standard_normal(d))


def test_config_validation():
    with pytest.raises(QuantConfigError):
        CacheConfig(window=WindowConfig(w_sink=32, w_recent=16))
    with pytest.raises(QuantConfigError):
        WindowConfig(w_sink=-1)
    # a full-precision cache has no group to accumulate
    assert not CacheConfig(window=WindowConfig(4, 8), quantize=False).quantize


def test_prefill_within_windows_stays_full_precision():
    cache = _cache(128)
    assert cache.layout() == {'total_tokens': 128, 'k_sink': 32, 'k_quantized': 0, 'k_recent': 96,
                              'v_sink': 32, 'v_quantized': 0, 'v_recent': 96}
    _, k_hat, _ = assemble_key_views(cache)
    assert k_hat.logical_rows == 0 and k_hat.n_groups == 0


def test_prefill_partitions_300_tokens():
    cache = _cache(300)
    lay = cache.layout()
    assert lay['k_sink'] == 32 and lay['k_quantized'] == 172 and lay['k_recent'] == 96
    assert lay['v_sink'] == 32 and lay['v_quantized'] == 160 and lay['v_recent'] == 108
    assert cache.k_hat.n_groups == 172 * D // 32
    # V is stored channels x tokens
    assert (cache.v_hat.logical_rows, cache.v_hat.logical_cols) == (D, 160)


def test_short_prompt_fills_only_the_sink():
    cache = _cache(31)
    lay = cache.layout()
    assert lay['k_sink'] == 31 and lay['k_quantized'] == 0 and lay['k_recent'] == 0
    assert lay['v_sink'] == 31 and lay['v_recent'] == 0


def test_prefill_errors():
    k, v = _tokens(40, d=48)
    with pytest.raises(TensorShapeError):
        init_from_prefill(k, v, CacheConfig())
    k, _ = _tokens(40)
    with pytest.raises(TensorShapeError):
        init_from_prefill(k, Matrix.zeros(39, D), CacheConfig())


def test_append_errors():
    rng = np.random.default_rng(1)
    with pytest.raises(CacheStateError):
        append_token(None, _row(rng), _row(rng))
    with pytest.raises(CacheStateError):
        QuantizedKVCache(CacheConfig()).append_token(_row(rng), _row(rng))
    cache = _cache(10)
    with pytest.raises(CacheStateError):
        append_token(cache, _row(rng, D - 1), _row(rng))


def test_block_eviction_cadence():
    rng = np.random.default_rng(2)
    cache = _cache(300)
    for _ in range(31):
        append_token(cache, _row(rng), _row(rng))
    assert cache.layout()['k_recent'] == 127
    groups = cache.k_hat.n_groups
    append_token(cache, _row(rng), _row(rng))
    lay = cache.layout()
    assert lay['k_recent'] == 96 and lay['k_quantized'] == 172 + 32
    assert cache.k_hat.n_groups == groups + 32 * D // 32
    # V started at 108, so it crossed 128 after 20 appends and is now back in range
    assert 96 <= lay['v_recent'] < 128 and lay['v_quantized'] == 192


def test_append_below_threshold_only_grows_recent():
    rng = np.random.default_rng(3)
    cache = _cache(200)
    before = cache.layout()
    append_token(cache, _row(rng), _row(rng))
    after = cache.layout()
    assert after['k_recent'] == before['k_recent'] + 1
    assert after['k_quantized'] == before['k_quantized']


def test_conservation_over_ten_groups_of_appends():
    rng = np.random.default_rng(4)
    cache = _cache(50)
    for step in range(10 * 32):
        append_token(cache, _row(rng), _row(rng))
        assert cache.check_conservation(), step
        assert cache.total_tokens == 51 + step


def test_window_invariants_over_a_long_decode():
    rng = np.random.default_rng(5)
    cache = _cache(300)
    sink = (cache.k_sink.data.tobytes(), cache.v_sink.data.tobytes())
    groups = cache.k_hat.n_groups
    for step in range(1000):
        append_token(cache, _row(rng), _row(rng))
        lay = cache.layout()
        assert cache.check_conservation(), step
        assert 96 <= lay['k_recent'] < 128 and 96 <= lay['v_recent'] < 128, (step, lay)
        assert cache.k_hat.n_groups >= groups
        groups = cache.k_hat.n_groups
    assert (cache.k_sink.data.tobytes(), cache.v_sink.data.tobytes()) == sink


def test_reconstruction_matches_shadow_within_group_bounds():
    rng = np.random.default_rng(6)
    k, v = _tokens(200, seed=7)
    shadow_k, shadow_v = [k.data], [v.data]
    cache = init_from_prefill(k, v, CacheConfig())
    for _ in range(70):
        kr, vr = _row(rng), _row(rng)
        append_token(cache, kr, vr)
        shadow_k.append(kr.data[None, :])
        shadow_v.append(vr.data[None, :])
    full_k = np.concatenate(shadow_k).astype(np.float64)
    full_v = np.concatenate(shadow_v).astype(np.float64)
    lay = cache.layout()

    rec_k = cache.reconstruct_keys().data.astype(np.float64)
    assert rec_k.shape == full_k.shape
    lo, hi = lay['k_sink'], lay['k_sink'] + lay['k_quantized']
    np.testing.assert_array_equal(rec_k[:lo], full_k[:lo])
    np.testing.assert_array_equal(rec_k[hi:], full_k[hi:])
    scales = np.repeat(cache.k_hat.line_view('scales'), 32, axis=1).astype(np.float64)
    slack = 4 * float(np.spacing(np.float32(np.abs(full_k[lo:hi]).max())))
    assert np.all(np.abs(rec_k[lo:hi] - full_k[lo:hi]) <= scales / 2 + slack)

    rec_v = cache.reconstruct_values().data.astype(np.float64)
    lo, hi = lay['v_sink'], lay['v_sink'] + lay['v_quantized']
    np.testing.assert_array_equal(rec_v[:lo], full_v[:lo])
    np.testing.assert_array_equal(rec_v[hi:], full_v[hi:])
    v_scales = np.repeat(cache.v_hat.line_view('scales'), 32, axis=1).astype(np.float64).T
    slack = 4 * float(np.spacing(np.float32(np.abs(full_v[lo:hi]).max())))
    assert np.all(np.abs(rec_v[lo:hi] - full_v[lo:hi]) <= v_scales / 2 + slack)


def test_views_are_in_token_order():
    k, v = _tokens(300, seed=8)
    cache = init_from_prefill(k, v, CacheConfig())
    k_sink, k_hat, k_recent = assemble_key_views(cache)
    v_sink, v_hat, v_recent = assemble_value_views(cache)
    assert k_sink.equals(slice_rows(k, 0, 32))
    assert k_recent.equals(slice_rows(k, 204, 300))
    assert v_recent.equals(slice_rows(v, 192, 300))
    assert k_sink.rows + k_hat.logical_rows + k_recent.rows == 300
    assert v_sink.rows + v_hat.logical_cols + v_recent.rows == 300
    assert k_hat.grouping_axis is GroupingAxis.INNER and v_hat.grouping_axis is GroupingAxis.INNER


def test_hybrid_prefill_decode_groups_are_symmetric():
    rng = np.random.default_rng(9)
    cfg = CacheConfig(quant=QuantConfig(mode='hybrid-prefill'))
    k, v = _tokens(300, seed=10)
    # shift K away from zero so prefill groups pick the zero point
    cache = init_from_prefill(Matrix(k.data + 20.0), v, cfg)
    prefill_groups = cache.prefill_groups['k']
    assert cache.k_hat.mode_mask[:prefill_groups].any()
    for _ in range(100):
        append_token(cache, Vector(rng.standard_normal(D) + 20.0), _row(rng))
    assert cache.k_hat.n_groups > prefill_groups
    assert not cache.k_hat.mode_mask[prefill_groups:].any()
    assert not cache.v_hat.line_view('mode_mask')[:, cache.prefill_groups['v'] // D:].any()


def test_footprint_counts_mask_only_for_prefill_groups():
    rng = np.random.default_rng(11)
    cfg = CacheConfig(quant=QuantConfig(mode='hybrid-prefill'))
    cache = _cache(300, cfg)
    for _ in range(64):
        append_token(cache, _row(rng), _row(rng))
    bits = cache.footprint_bits()
    k_elements = cache.k_hat.logical_rows * D
    prefill_groups = cache.prefill_groups['k']
    expected = (estimate_packed_bits(QuantConfig(mode='hybrid'), prefill_groups * 32)
                + estimate_packed_bits(QuantConfig(mode='sym'), k_elements - prefill_groups * 32))
    assert bits['k_packed'] == expected
    assert bits['k_windows'] == (32 + cache.layout()['k_recent']) * D * 32
    assert bits['total'] == bits['k_packed'] + bits['k_windows'] + bits['v_packed'] + bits['v_windows']


def test_disabled_quantization_keeps_everything_full_precision():
    rng = np.random.default_rng(12)
    cfg = CacheConfig(quantize=False)
    k, v = _tokens(300, seed=13)
    cache = init_from_prefill(k, v, cfg)
    for _ in range(50):
        append_token(cache, _row(rng), _row(rng))
    lay = cache.layout()
    assert lay['k_quantized'] == 0 and lay['v_quantized'] == 0
    assert lay['k_recent'] == 350 - 32
    assert slice_rows(cache.reconstruct_keys(), 0, 300).equals(k)


def _random_state(rng, i):
    modes = ['asym', 'sym', 'hybrid', 'hybrid-prefill']
    cfg = CacheConfig(quant=QuantConfig(bits=int(rng.choice([2, 4])), mode=modes[i % 4]),
                      window=WindowConfig(int(rng.integers(0, 40)), int(rng.integers(32, 100))),
                      quantize=bool(i % 7))
    cache = _cache(int(rng.integers(1, 400)), cfg, seed=i)
    for _ in range(int(rng.integers(0, 80))):
        append_token(cache, _row(rng), _row(rng))
    return cache


def test_snapshot_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(14)
    for i in range(20):
        cache = _random_state(rng, i)
        path = str(tmp_path / f'snap{i}')
        save_snapshot(cache, path)
        loaded = load_snapshot(path)
        assert loaded.equals(cache)
        assert loaded.layout() == cache.layout()
        for name, blob in loaded.snapshot_bytes().items():
            with open(os.path.join(path, name), 'rb') as f:
                assert f.read() == blob, name
        np.testing.assert_array_equal(loaded.k_hat.mode_mask, cache.k_hat.mode_mask)
        np.testing.assert_array_equal(dequantize_matrix(loaded.v_hat).data, dequantize_matrix(cache.v_hat).data)


def test_loaded_snapshot_keeps_decoding(tmp_path):
    rng = np.random.default_rng(15)
    cache = _cache(300)
    save_snapshot(cache, str(tmp_path / 'snap'))
    loaded = load_snapshot(str(tmp_path / 'snap'))
    for _ in range(40):
        kr, vr = _row(rng), _row(rng)
        append_token(cache, kr, vr)
        append_token(loaded, kr, vr)
    assert loaded.equals(cache)


def test_snapshot_format_errors(tmp_path):
    cache = _cache(300)
    path = str(tmp_path / 'snap')
    save_snapshot(cache, path)

    k_hat = os.path.join(path, 'k_hat.iqkv')
    with open(k_hat, 'rb') as f:
        blob = f.read()
    with open(k_hat, 'wb') as f:
        f.write(b'XXXX' + blob[4:])
    with pytest.raises(SnapshotFormatError):
        load_snapshot(path)
    with open(k_hat, 'wb') as f:
        f.write(blob[:-3])
    with pytest.raises(SnapshotFormatError):
        load_snapshot(path)
    with open(k_hat, 'wb') as f:
        f.write(blob)
    load_snapshot(path)

    manifest = os.path.join(path, 'manifest.json')
    with open(manifest) as f:
        meta = json.load(f)
    meta['format_version'] = 2
    with open(manifest, 'w') as f:
        json.dump(meta, f)
    with pytest.raises(UnsupportedVersionError):
        load_snapshot(path)

    meta['format_version'] = 1
    meta['total_tokens'] = 301
    with open(manifest, 'w') as f:
        json.dump(meta, f)
    with pytest.raises(SnapshotFormatError):
        load_snapshot(path)

    with pytest.raises(SnapshotFormatError):
        load_snapshot(str(tmp_path / 'missing'))


def test_window_tensors_must_match_the_manifest_width(tmp_path):
    cache = _cache(300)
    path = str(tmp_path / 'snap')
    save_snapshot(cache, path)
    recent = cache.k_recent
    save_tensor(os.path.join(path, 'k_recent.f32'), Matrix(recent.data[:, :D // 2]))
    with pytest.raises(SnapshotFormatError, match='k_recent'):
        load_snapshot(path)

    save_tensor(os.path.join(path, 'k_recent.f32'), recent)
    load_snapshot(path)
    os.remove(os.path.join(path, 'v_recent.f32'))
    with pytest.raises(SnapshotFormatError):
        load_snapshot(path)


def main():
    print("🚀 KV cache tests")
    code = pytest.main([__file__, '-q'])
    print("✅ All tests passed!" if code == 0 else "❌ Some tests failed.")
    sys.exit(code)


if __name__ == "__main__":
    main()
