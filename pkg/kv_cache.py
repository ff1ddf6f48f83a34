"""
Windowed quantized KV cache.

Token order is always sink | quantized middle | recent. K rows are quantized
per token (Inner axis, groups along channels). V is stored transposed,
channels x tokens, so its Inner groups run along tokens within a channel and
only whole blocks of G tokens can move into the packed region.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from exceptions import CacheStateError, QuantConfigError, SnapshotFormatError, TensorShapeError, \
    UnsupportedVersionError
from quantizer import (DECODE, PREFILL, GroupingAxis, PackedMatrix, QuantConfig, QuantMode,
                       dequantize_matrix, estimate_packed_bits, quantize_matrix)
from tensor_core import Matrix, Vector, concat_rows, load_tensor, save_tensor, slice_rows, transpose

logger = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1
MANIFEST_NAME = 'manifest.json'
SNAPSHOT_FILES = {
    'k_sink': 'k_sink.f32',
    'v_sink': 'v_sink.f32',
    'k_recent': 'k_recent.f32',
    'v_recent': 'v_recent.f32',
    'k_hat': 'k_hat.iqkv',
    'v_hat': 'v_hat.iqkv',
}


@dataclass(frozen=True)
class WindowConfig:
    w_sink: int = 32
    w_recent: int = 96

    def __post_init__(self):
        if self.w_sink < 0 or self.w_recent < 0:
            raise QuantConfigError(f"window sizes must be non-negative, got {self.w_sink}/{self.w_recent}")


@dataclass(frozen=True)
class CacheConfig:
    """Quantization and window settings. quantize=False keeps every token full precision."""
    quant: QuantConfig = field(default_factory=QuantConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    quantize: bool = True

    def __post_init__(self):
        if self.quantize and self.window.w_recent < self.quant.group_size:
            raise QuantConfigError(
                f"w_recent ({self.window.w_recent}) must be at least the group size ({self.quant.group_size})")


class _TokenWindow:
    """Contiguous full-precision rows; amortized O(1) append, eviction from the front."""

    def __init__(self, width: int, rows: Optional[np.ndarray] = None):
        initial = np.zeros((0, width), dtype=np.float32) if rows is None else np.asarray(rows, dtype=np.float32)
        self._buf = np.zeros((max(16, 2 * initial.shape[0]), width), dtype=np.float32)
        self._start = 0
        self._end = initial.shape[0]
        self._buf[:self._end] = initial

    def __len__(self):
        return self._end - self._start

    def _reserve(self, extra: int) -> None:
        if self._end + extra <= self._buf.shape[0]:
            return
        live = self._buf[self._start:self._end]
        capacity = self._buf.shape[0]
        while capacity < len(live) + extra or capacity < 2 * len(live):
            capacity *= 2
        buf = np.zeros((capacity, self._buf.shape[1]), dtype=np.float32)
        buf[:len(live)] = live
        self._buf, self._start, self._end = buf, 0, len(live)

    def append(self, row: np.ndarray) -> None:
        self._reserve(1)
        self._buf[self._end] = row
        self._end += 1

    def pop_front(self, count: int) -> np.ndarray:
        if count > len(self):
            raise CacheStateError(f"cannot evict {count} rows from a window of {len(self)}")
        block = self._buf[self._start:self._start + count].copy()
        self._start += count
        return block

    def matrix(self) -> Matrix:
        return Matrix(self._buf[self._start:self._end])


class QuantizedKVCache:
    """
    Full-precision sink and recent windows around a packed middle region.

    Single writer: init_from_prefill and append_token need exclusive access;
    the view accessors are safe for concurrent readers between writes.
    """

    def __init__(self, cfg: CacheConfig):
        self.cfg = cfg
        self.initialized = False
        self.width = 0
        self.total_tokens = 0
        self.prefill_tokens = 0
        self.prefill_groups = {'k': 0, 'v': 0}
        self.k_sink: Optional[Matrix] = None
        self.v_sink: Optional[Matrix] = None
        self.k_hat: Optional[PackedMatrix] = None
        self.v_hat: Optional[PackedMatrix] = None
        self._k_recent: Optional[_TokenWindow] = None
        self._v_recent: Optional[_TokenWindow] = None

    # -- construction ----------------------------------------------------

    @classmethod
    def init_from_prefill(cls, k: Matrix, v: Matrix, cfg: CacheConfig) -> 'QuantizedKVCache':
        """Sink = first w_sink tokens, recent = last w_recent, the rest quantized."""
        if k.shape != v.shape:
            raise TensorShapeError(f"K {k.shape} and V {v.shape} differ in shape")
        n, d = k.shape
        quant = cfg.quant
        if d % quant.group_size:
            raise TensorShapeError(f"model width {d} not divisible by group size {quant.group_size}")

        cache = cls(cfg)
        cache.width = d
        w_sink, w_recent = cfg.window.w_sink, cfg.window.w_recent
        sink = min(w_sink, n)
        cache.k_sink = slice_rows(k, 0, sink)
        cache.v_sink = slice_rows(v, 0, sink)
        cache.k_hat = PackedMatrix.empty(0, d, GroupingAxis.INNER, quant)
        cache.v_hat = PackedMatrix.empty(d, 0, GroupingAxis.INNER, quant)

        middle = n - w_sink - w_recent
        if not cfg.quantize or middle <= 0:
            cache._k_recent = _TokenWindow(d, k.data[sink:])
            cache._v_recent = _TokenWindow(d, v.data[sink:])
        else:
            cache.k_hat = quantize_matrix(slice_rows(k, w_sink, w_sink + middle), GroupingAxis.INNER,
                                          quant, phase=PREFILL)
            cache._k_recent = _TokenWindow(d, k.data[w_sink + middle:])
            # V can only take whole G-token blocks; the remainder stays in the recent window
            v_middle = middle - middle % quant.group_size
            if v_middle:
                cache.v_hat = quantize_matrix(transpose(slice_rows(v, w_sink, w_sink + v_middle)),
                                              GroupingAxis.INNER, quant, phase=PREFILL)
            cache._v_recent = _TokenWindow(d, v.data[w_sink + v_middle:])

        cache.prefill_groups = {'k': cache.k_hat.n_groups, 'v': cache.v_hat.n_groups}
        cache.total_tokens = n
        cache.prefill_tokens = n
        cache.initialized = True
        logger.debug("prefill cache initialized: %s", cache.layout())
        return cache

    # -- decode updates --------------------------------------------------

    def _require_initialized(self) -> None:
        if not self.initialized:
            raise CacheStateError("cache used before init_from_prefill")

    def append_token(self, k_row: Vector, v_row: Vector) -> 'QuantizedKVCache':
        """Append one token, then move whole G-token blocks out of each recent window."""
        self._require_initialized()
        if k_row.len != self.width or v_row.len != self.width:
            raise CacheStateError(f"row length {k_row.len}/{v_row.len} does not match cache width {self.width}")
        self._k_recent.append(k_row.data)
        self._v_recent.append(v_row.data)
        self.total_tokens += 1
        if not self.cfg.quantize:
            return self

        quant = self.cfg.quant
        limit = self.cfg.window.w_recent + quant.group_size
        while len(self._k_recent) >= limit:
            block = Matrix(self._k_recent.pop_front(quant.group_size))
            self.k_hat = self.k_hat.append_rows(quantize_matrix(block, GroupingAxis.INNER, quant, phase=DECODE))
        while len(self._v_recent) >= limit:
            block = Matrix(self._v_recent.pop_front(quant.group_size))
            packed = quantize_matrix(transpose(block), GroupingAxis.INNER, quant, phase=DECODE)
            self.v_hat = self.v_hat.append_cols(packed)
        return self

    # -- views -----------------------------------------------------------

    @property
    def k_recent(self) -> Matrix:
        self._require_initialized()
        return self._k_recent.matrix()

    @property
    def v_recent(self) -> Matrix:
        self._require_initialized()
        return self._v_recent.matrix()

    def assemble_key_views(self) -> Tuple[Matrix, PackedMatrix, Matrix]:
        self._require_initialized()
        return self.k_sink, self.k_hat, self.k_recent

    def assemble_value_views(self) -> Tuple[Matrix, PackedMatrix, Matrix]:
        """V middle comes back channels x tokens."""
        self._require_initialized()
        return self.v_sink, self.v_hat, self.v_recent

    def reconstruct_keys(self) -> Matrix:
        sink, hat, recent = self.assemble_key_views()
        return concat_rows(sink, dequantize_matrix(hat), recent)

    def reconstruct_values(self) -> Matrix:
        sink, hat, recent = self.assemble_value_views()
        return concat_rows(sink, transpose(dequantize_matrix(hat)), recent)

    def layout(self) -> Dict[str, int]:
        self._require_initialized()
        return {
            'total_tokens': self.total_tokens,
            'k_sink': self.k_sink.rows,
            'k_quantized': self.k_hat.logical_rows,
            'k_recent': len(self._k_recent),
            'v_sink': self.v_sink.rows,
            'v_quantized': self.v_hat.logical_cols,
            'v_recent': len(self._v_recent),
        }

    def check_conservation(self) -> bool:
        lay = self.layout()
        total = lay['total_tokens']
        return (lay['k_sink'] + lay['k_quantized'] + lay['k_recent'] == total
                and lay['v_sink'] + lay['v_quantized'] + lay['v_recent'] == total
                and lay['v_quantized'] % self.cfg.quant.group_size == 0)

    def footprint_bits(self) -> Dict[str, int]:
        """Estimated storage: packed regions via estimate_packed_bits, windows at 32 bits per value."""
        self._require_initialized()
        quant = self.cfg.quant
        g = quant.group_size
        result = {}
        for name, hat in (('k', self.k_hat), ('v', self.v_hat)):
            elements = hat.logical_rows * hat.logical_cols
            if quant.mode is QuantMode.HYBRID_PREFILL:
                prefill_elements = self.prefill_groups[name] * g
                packed = (estimate_packed_bits(quant, prefill_elements, PREFILL)
                          + estimate_packed_bits(quant, elements - prefill_elements, DECODE))
            else:
                packed = estimate_packed_bits(quant, elements)
            sink = self.k_sink if name == 'k' else self.v_sink
            window = len(self._k_recent if name == 'k' else self._v_recent)
            result[f'{name}_packed'] = packed
            result[f'{name}_windows'] = (sink.rows + window) * self.width * 32
        result['total'] = sum(result.values())
        return result

    # -- snapshots -------------------------------------------------------

    def manifest(self) -> Dict:
        self._require_initialized()
        return {
            'format_version': SNAPSHOT_VERSION,
            'width': self.width,
            'total_tokens': self.total_tokens,
            'prefill_tokens': self.prefill_tokens,
            'prefill_groups': dict(self.prefill_groups),
            'window': {'w_sink': self.cfg.window.w_sink, 'w_recent': self.cfg.window.w_recent},
            'quant': {'bits': self.cfg.quant.bits, 'group_size': self.cfg.quant.group_size,
                      'mode': self.cfg.quant.mode.value},
            'quantize': self.cfg.quantize,
            'files': dict(SNAPSHOT_FILES),
        }

    def snapshot_bytes(self) -> Dict[str, bytes]:
        """Every snapshot file as bytes; two caches are identical iff these match."""
        self._require_initialized()
        blobs = {MANIFEST_NAME: json.dumps(self.manifest(), sort_keys=True, indent=2).encode('utf-8')}
        blobs[SNAPSHOT_FILES['k_hat']] = self.k_hat.to_bytes()
        blobs[SNAPSHOT_FILES['v_hat']] = self.v_hat.to_bytes()
        for name, m in (('k_sink', self.k_sink), ('v_sink', self.v_sink),
                        ('k_recent', self.k_recent), ('v_recent', self.v_recent)):
            blobs[SNAPSHOT_FILES[name]] = m.data.astype('<f4').tobytes()
            blobs[SNAPSHOT_FILES[name] + '.json'] = json.dumps({'shape': [m.rows, m.cols]}).encode('utf-8')
        return blobs

    def equals(self, other: 'QuantizedKVCache') -> bool:
        return self.snapshot_bytes() == other.snapshot_bytes()


# Module-level operation names


def init_from_prefill(k: Matrix, v: Matrix, cfg: CacheConfig) -> QuantizedKVCache:
    return QuantizedKVCache.init_from_prefill(k, v, cfg)


def append_token(cache: Optional[QuantizedKVCache], k_row: Vector, v_row: Vector) -> QuantizedKVCache:
    if cache is None:
        raise CacheStateError("append_token needs an initialized cache")
    return cache.append_token(k_row, v_row)


def assemble_key_views(cache: QuantizedKVCache) -> Tuple[Matrix, PackedMatrix, Matrix]:
    return cache.assemble_key_views()


def assemble_value_views(cache: QuantizedKVCache) -> Tuple[Matrix, PackedMatrix, Matrix]:
    return cache.assemble_value_views()


def save_snapshot(cache: QuantizedKVCache, directory: str) -> Dict[str, str]:
    """Write manifest, packed regions and window tensors under directory."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, MANIFEST_NAME), 'w') as f:
        json.dump(cache.manifest(), f, sort_keys=True, indent=2)
    for name in ('k_hat', 'v_hat'):
        with open(os.path.join(directory, SNAPSHOT_FILES[name]), 'wb') as f:
            f.write(getattr(cache, name).to_bytes())
    for name in ('k_sink', 'v_sink', 'k_recent', 'v_recent'):
        save_tensor(os.path.join(directory, SNAPSHOT_FILES[name]), getattr(cache, name))
    return {name: os.path.join(directory, filename) for name, filename in SNAPSHOT_FILES.items()}


def load_snapshot(directory: str) -> QuantizedKVCache:
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise SnapshotFormatError(f"no {MANIFEST_NAME} in {directory}")
    try:
        with open(manifest_path, 'r') as f:
            manifest = json.load(f)
    except ValueError as e:
        raise SnapshotFormatError(f"unreadable manifest: {e}")
    if manifest.get('format_version') != SNAPSHOT_VERSION:
        raise UnsupportedVersionError(f"unsupported snapshot version {manifest.get('format_version')!r}")

    try:
        cfg = CacheConfig(
            quant=QuantConfig(bits=manifest['quant']['bits'], group_size=manifest['quant']['group_size'],
                              mode=manifest['quant']['mode']),
            window=WindowConfig(**manifest['window']),
            quantize=bool(manifest['quantize']))
        width = int(manifest['width'])
        total = int(manifest['total_tokens'])
    except (KeyError, TypeError, QuantConfigError) as e:
        raise SnapshotFormatError(f"bad manifest: {e}")

    def _read_packed(name):
        path = os.path.join(directory, SNAPSHOT_FILES[name])
        if not os.path.exists(path):
            raise SnapshotFormatError(f"missing {path}")
        with open(path, 'rb') as f:
            return PackedMatrix.from_bytes(f.read())

    windows = {name: load_tensor(os.path.join(directory, SNAPSHOT_FILES[name]))
               for name in ('k_sink', 'v_sink', 'k_recent', 'v_recent')}
    for name, m in windows.items():
        if m.cols != width:
            raise SnapshotFormatError(f"{name} has {m.cols} columns, manifest width is {width}")

    cache = QuantizedKVCache(cfg)
    cache.width = width
    cache.k_sink = windows['k_sink']
    cache.v_sink = windows['v_sink']
    cache._k_recent = _TokenWindow(width, windows['k_recent'].data)
    cache._v_recent = _TokenWindow(width, windows['v_recent'].data)
    cache.k_hat = _read_packed('k_hat')
    cache.v_hat = _read_packed('v_hat')
    cache.total_tokens = total
    cache.prefill_tokens = int(manifest.get('prefill_tokens', total))
    cache.prefill_groups = {k: int(v) for k, v in manifest.get('prefill_groups', {'k': 0, 'v': 0}).items()}
    cache.initialized = True

    if cache.k_hat.config != cfg.quant or cache.v_hat.config != cfg.quant:
        raise SnapshotFormatError("packed regions disagree with the manifest quantization config")
    if cache.k_hat.logical_cols != width or cache.v_hat.logical_rows != width:
        raise SnapshotFormatError("packed regions disagree with the manifest width")
    if not cache.check_conservation():
        raise SnapshotFormatError(f"token counts do not add up to {total}: {cache.layout()}")
    return cache
