"""
Group-wise b-bit quantization with a unified packed representation.

Every group stores b-bit codes, one float32 scale, one 32-bit auxiliary word
and one mask bit. The auxiliary word holds the float32 bits of the zero point
for an asymmetric group, or the packed sign bits (bit k = sign of element k)
for a symmetric group. The mask bit is set for asymmetric groups.

The single-group functions and quantize_matrix share the same vectorized row
routines, so a matrix quantizes exactly like its groups quantized one by one.
"""

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from exceptions import (CodeRangeError, NonFiniteValueError, QuantConfigError,
                        SnapshotFormatError, TensorShapeError, UnsupportedVersionError)
from tensor_core import Matrix

logger = logging.getLogger(__name__)

WORD_BITS = 32
AUX_BITS = 32
FORMAT_MAGIC = b'IQKV'
FORMAT_VERSION = 1
_HEADER = struct.Struct('<4sIBBBBQQ')

# above this many elements the two hybrid candidates are evaluated on separate threads
HYBRID_CONCURRENT_ELEMENTS = 1 << 17
_TINY = np.finfo(np.float64).tiny

PREFILL = 'prefill'
DECODE = 'decode'


class QuantMode(str, Enum):
    ASYM = 'asym'
    SYM = 'sym'
    HYBRID = 'hybrid'
    HYBRID_PREFILL = 'hybrid-prefill'

    @property
    def stores_mask(self) -> bool:
        return self in (QuantMode.HYBRID, QuantMode.HYBRID_PREFILL)


class GroupingAxis(str, Enum):
    INNER = 'inner'  # groups run along columns
    OUTER = 'outer'  # groups run along rows


_MODE_CODES = {QuantMode.ASYM: 0, QuantMode.SYM: 1, QuantMode.HYBRID: 2, QuantMode.HYBRID_PREFILL: 3}
_AXIS_CODES = {GroupingAxis.INNER: 0, GroupingAxis.OUTER: 1}


@dataclass(frozen=True)
class QuantConfig:
    """Bit width, group size and mode. Rounding is always half-to-even."""
    bits: int = 2
    group_size: int = 32
    mode: QuantMode = QuantMode.HYBRID
    rounding: str = 'half-even'

    def __post_init__(self):
        try:
            object.__setattr__(self, 'mode', QuantMode(self.mode))
        except ValueError:
            raise QuantConfigError(f"unknown quantization mode {self.mode!r}")
        if not 1 <= self.bits <= 8:
            raise QuantConfigError(f"bit width must be in [1, 8], got {self.bits}")
        if self.group_size not in (8, 16, 32):
            raise QuantConfigError(f"group size must be 8, 16 or 32, got {self.group_size}")
        if self.mode.stores_mask and self.group_size != AUX_BITS:
            raise QuantConfigError(f"{self.mode.value} needs group size {AUX_BITS} so the sign word fills the aux slot")
        if self.rounding != 'half-even':
            raise QuantConfigError("only round-half-to-even is supported")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @property
    def codes_per_word(self) -> int:
        return WORD_BITS // self.bits

    @property
    def words_per_group(self) -> int:
        return -(-self.group_size // self.codes_per_word)

    def effective_mode(self, phase: Optional[str] = None) -> QuantMode:
        """HybridPrefill is Hybrid while prefilling and Sym while decoding."""
        if self.mode is QuantMode.HYBRID_PREFILL:
            return QuantMode.SYM if phase == DECODE else QuantMode.HYBRID
        return self.mode


@dataclass(frozen=True, eq=False)
class GroupEncoding:
    codes: np.ndarray  # magnitudes when symmetric
    scale: np.float32
    aux: int
    is_symmetric: bool
    bits: int

    @property
    def zero_point(self) -> float:
        if self.is_symmetric:
            return 0.0
        return float(np.array([self.aux], dtype=np.uint32).view(np.float32)[0])

    @property
    def signs(self) -> np.ndarray:
        return unpack_signs(self.aux, len(self.codes)) if self.is_symmetric else np.zeros(len(self.codes), dtype=bool)

    def equals(self, other: 'GroupEncoding') -> bool:
        return (self.is_symmetric == other.is_symmetric and self.bits == other.bits
                and self.aux == other.aux
                and np.float32(self.scale).tobytes() == np.float32(other.scale).tobytes()
                and np.array_equal(self.codes, other.codes))


@dataclass(frozen=True)
class GroupErrorStats:
    sse_sym: float
    sse_asym: float


# ---------------------------------------------------------------------------
# Vectorized row routines: x has shape (n_groups, G)
# ---------------------------------------------------------------------------

def _as_group_rows(values) -> np.ndarray:
    x = np.asarray(values, dtype=np.float32)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[-1] == 0:
        raise TensorShapeError("a quantization group needs at least one element")
    if not np.isfinite(x).all():
        raise NonFiniteValueError("quantization input must be finite")
    return x


def _row_bounds(x: np.ndarray):
    return x.min(axis=1).astype(np.float64), x.max(axis=1).astype(np.float64)


def _divisors(spans: np.ndarray) -> np.ndarray:
    # a zero span only occurs when every numerator is zero
    return np.maximum(spans, _TINY)


def _asym_quotients(x: np.ndarray, lo: np.ndarray, hi: np.ndarray, qmax: int):
    """Rounded (x - Z) / S per element and the float64 scale. Quotients never leave [0, qmax]."""
    s64 = (hi - lo) / qmax
    t = np.subtract(x, lo[:, None])
    t /= _divisors(s64)[:, None]
    return np.rint(t, out=t), s64


def _sym_quotients(x: np.ndarray, lo: np.ndarray, hi: np.ndarray, qmax: int):
    """Signed rounded x / S; the magnitude codes are their absolute values."""
    s64 = np.maximum(hi, -lo) / qmax
    q = np.divide(x, _divisors(s64)[:, None])
    return np.rint(q, out=q), s64


def _candidate_rows(x: np.ndarray, zeros: np.ndarray, scales64: np.ndarray):
    """
    Quantize x against k candidates at once; row i of zeros/scales64 (k, n) is
    one candidate's zero points and float64 scales. Returns the signed rounded
    quotients (k, n, G), float32 scales (k, n) and the SSE of each candidate's
    float32 reconstruction (k, n). The arithmetic matches _dequantize_rows.
    """
    t = np.subtract(x, zeros[:, :, None])
    t /= _divisors(scales64)[:, :, None]
    np.rint(t, out=t)
    scales = scales64.astype(np.float32)
    recon = t * scales[:, :, None]
    recon += zeros[:, :, None]
    return t, scales, _sse_rows(x, recon.astype(np.float32))


@lru_cache(maxsize=None)
def _candidate_worker() -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=1, thread_name_prefix='kvq-hybrid')


def _hybrid_candidates(x: np.ndarray, lo: np.ndarray, hi: np.ndarray, qmax: int):
    """Asymmetric candidate at index 0, symmetric at index 1."""
    n = x.shape[0]
    zeros = np.zeros((2, n))
    zeros[0] = lo
    spans = np.empty((2, n))
    np.subtract(hi, lo, out=spans[0])
    np.maximum(hi, -lo, out=spans[1])
    spans /= qmax
    if x.size < HYBRID_CONCURRENT_ELEMENTS:
        return _candidate_rows(x, zeros, spans)
    # the asymmetric candidate runs on a standing worker while this thread does the symmetric one
    pending = _candidate_worker().submit(_candidate_rows, x, zeros[:1], spans[:1])
    t_s, scales_s, sse_s = _candidate_rows(x, zeros[1:], spans[1:])
    t_a, scales_a, sse_a = pending.result()
    return (t_a[0], t_s[0]), (scales_a[0], scales_s[0]), (sse_a[0], sse_s[0])


def _pack_sign_rows(signs: np.ndarray) -> np.ndarray:
    """(n, G <= 32) booleans -> n sign words, bit k = element k."""
    packed = np.packbits(signs, axis=1, bitorder='little')
    if packed.shape[1] < 4:
        packed = np.pad(packed, ((0, 0), (0, 4 - packed.shape[1])))
    return packed.view('<u4').reshape(signs.shape[0]).astype(np.uint32, copy=False)


def _unpack_sign_rows(aux: np.ndarray, group_size: int) -> np.ndarray:
    raw = np.ascontiguousarray(aux, dtype='<u4').view(np.uint8).reshape(-1, 4)
    return np.unpackbits(raw, axis=1, count=group_size, bitorder='little').astype(bool)


def _dequantize_rows(codes: np.ndarray, scales: np.ndarray, aux: np.ndarray,
                     asym_mask: np.ndarray) -> np.ndarray:
    c = codes.astype(np.float64)
    s = scales.astype(np.float64)[:, None]
    magnitude = s * c
    zero = np.where(asym_mask, aux.view(np.float32), np.float32(0)).astype(np.float64)[:, None]
    signs = _unpack_sign_rows(aux, codes.shape[1])
    sym_vals = np.where(signs, -magnitude, magnitude)
    out = np.where(asym_mask[:, None], magnitude + zero, sym_vals)
    return out.astype(np.float32)


def _sse_rows(x: np.ndarray, recon: np.ndarray) -> np.ndarray:
    """Per-group squared error in float64; recon may carry a leading candidate axis."""
    diff = np.subtract(x, recon, dtype=np.float64)
    diff *= diff
    return diff.sum(axis=-1)


def _quantize_rows(x: np.ndarray, bits: int, mode: QuantMode):
    """Returns codes, scales, aux, asym_mask and (for hybrid) the per-mode SSE pair."""
    n = x.shape[0]
    qmax = (1 << bits) - 1
    lo, hi = _row_bounds(x)
    if mode is QuantMode.ASYM:
        codes, s64 = _asym_quotients(x, lo, hi, qmax)
        zeros = lo.astype(np.float32).view(np.uint32)
        return codes.astype(np.uint8), s64.astype(np.float32), zeros, np.ones(n, dtype=bool), None
    if mode is QuantMode.SYM:
        codes, s64 = _sym_quotients(x, lo, hi, qmax)
        magnitudes = np.abs(codes, out=codes).astype(np.uint8)
        return magnitudes, s64.astype(np.float32), _pack_sign_rows(x < 0), np.zeros(n, dtype=bool), None

    t, scales, sse = _hybrid_candidates(x, lo, hi, qmax)
    # strict: ties go to symmetric
    use_asym = sse[0] < sse[1]
    codes = np.abs(t[1])
    np.copyto(codes, t[0], where=use_asym[:, None])
    aux = np.where(use_asym, lo.astype(np.float32).view(np.uint32), _pack_sign_rows(x < 0))
    return (codes.astype(np.uint8), np.where(use_asym, scales[0], scales[1]), aux.astype(np.uint32),
            use_asym, (sse[1], sse[0]))


def _encoding_at(codes, scales, aux, asym_mask, bits, i=0) -> GroupEncoding:
    return GroupEncoding(codes=codes[i].copy(), scale=np.float32(scales[i]), aux=int(aux[i]),
                         is_symmetric=not bool(asym_mask[i]), bits=bits)


def _check_bits(bits: int) -> None:
    if not 1 <= bits <= 8:
        raise QuantConfigError(f"bit width must be in [1, 8], got {bits}")


# ---------------------------------------------------------------------------
# Single groups
# ---------------------------------------------------------------------------

def quantize_group_asym(values: Sequence[float], bits: int) -> GroupEncoding:
    """Z = min, S = (max - min) / (2^b - 1), codes = clip(rint((v - Z) / S))."""
    _check_bits(bits)
    x = _as_group_rows(values)
    return _encoding_at(*_quantize_rows(x, bits, QuantMode.ASYM)[:4], bits)


def quantize_group_sym(values: Sequence[float], bits: int) -> GroupEncoding:
    """Zero point 0, S = max|v| / (2^b - 1), magnitude codes plus packed sign bits."""
    _check_bits(bits)
    x = _as_group_rows(values)
    if x.shape[1] > AUX_BITS:
        raise TensorShapeError(f"sign word holds at most {AUX_BITS} elements")
    return _encoding_at(*_quantize_rows(x, bits, QuantMode.SYM)[:4], bits)


def quantize_group_hybrid(values: Sequence[float], bits: int) -> Tuple[GroupEncoding, GroupErrorStats]:
    """Quantize both ways and keep the encoding with strictly lower SSE (ties: symmetric)."""
    _check_bits(bits)
    x = _as_group_rows(values)
    if x.shape[1] > AUX_BITS:
        raise TensorShapeError(f"sign word holds at most {AUX_BITS} elements")
    codes, scales, aux, mask, (sse_s, sse_a) = _quantize_rows(x, bits, QuantMode.HYBRID)
    stats = GroupErrorStats(sse_sym=float(sse_s[0]), sse_asym=float(sse_a[0]))
    return _encoding_at(codes, scales, aux, mask, bits), stats


def dequantize_group(enc: GroupEncoding) -> np.ndarray:
    codes = np.asarray(enc.codes, dtype=np.uint8).reshape(1, -1)
    if np.any(codes > (1 << enc.bits) - 1):
        raise CodeRangeError(f"code exceeds {enc.bits}-bit range")
    if enc.is_symmetric and codes.shape[1] > AUX_BITS:
        raise TensorShapeError(f"sign word holds at most {AUX_BITS} elements")
    return _dequantize_rows(codes, np.array([enc.scale], dtype=np.float32),
                            np.array([enc.aux], dtype=np.uint32),
                            np.array([not enc.is_symmetric]))[0]


def group_sse(values: Sequence[float], enc: GroupEncoding) -> float:
    x = _as_group_rows(values)
    return float(_sse_rows(x, dequantize_group(enc).reshape(1, -1))[0])


# ---------------------------------------------------------------------------
# Bit packing
# ---------------------------------------------------------------------------

def pack_codes(codes: Sequence[int], bits: int) -> np.ndarray:
    """Little-endian within each 32-bit word: code k sits at bits [k*b, (k+1)*b)."""
    _check_bits(bits)
    arr = np.asarray(codes, dtype=np.int64).ravel()
    if arr.size and (arr.min() < 0 or arr.max() > (1 << bits) - 1):
        raise CodeRangeError(f"codes must lie in [0, {(1 << bits) - 1}] for {bits}-bit packing")
    per_word = WORD_BITS // bits
    n_words = -(-arr.size // per_word)
    if n_words == 0:
        return np.zeros(0, dtype=np.uint32)
    padded = np.zeros(n_words * per_word, dtype=np.uint32)
    padded[:arr.size] = arr
    shifts = np.arange(per_word, dtype=np.uint32) * np.uint32(bits)
    return np.bitwise_or.reduce(padded.reshape(n_words, per_word) << shifts, axis=1).astype(np.uint32)


def unpack_codes(words: Sequence[int], count: int, bits: int) -> np.ndarray:
    _check_bits(bits)
    w = np.asarray(words, dtype=np.uint32).ravel()
    per_word = WORD_BITS // bits
    if count > w.size * per_word:
        raise TensorShapeError(f"{w.size} words hold at most {w.size * per_word} codes, asked for {count}")
    shifts = (np.arange(per_word, dtype=np.uint32) * np.uint32(bits))
    mask = np.uint32((1 << bits) - 1)
    return ((w[:, None] >> shifts) & mask).astype(np.uint8).ravel()[:count]


def pack_signs(bits: Sequence[bool]) -> int:
    arr = np.asarray(bits, dtype=bool).ravel()
    if arr.size > AUX_BITS:
        raise TensorShapeError(f"a sign word holds at most {AUX_BITS} bits")
    return int(_pack_sign_rows(arr.reshape(1, -1))[0]) if arr.size else 0


def unpack_signs(word: int, group_size: int) -> np.ndarray:
    if group_size > AUX_BITS:
        raise TensorShapeError(f"a sign word holds at most {AUX_BITS} bits")
    return _unpack_sign_rows(np.array([word], dtype=np.uint32), group_size)[0]


def _pack_code_rows(codes: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """(n_groups, G) codes -> (n_groups, words_per_group) words; each group starts a new word."""
    n = codes.shape[0]
    wpg = cfg.words_per_group
    if 8 % cfg.bits == 0:
        # whole codes per byte: build little-endian bytes, then view them as words
        per_byte = 8 // cfg.bits
        lanes = codes.astype(np.uint8, copy=False).reshape(n, -1, per_byte)
        packed = lanes[:, :, 0].copy()
        for k in range(1, per_byte):
            packed |= lanes[:, :, k] << np.uint8(k * cfg.bits)
        if packed.shape[1] < 4 * wpg:
            packed = np.pad(packed, ((0, 0), (0, 4 * wpg - packed.shape[1])))
        return packed.view('<u4').astype(np.uint32, copy=False)
    per_word = cfg.codes_per_word
    padded = np.zeros((n, wpg * per_word), dtype=np.uint32)
    padded[:, :codes.shape[1]] = codes
    shifts = np.arange(per_word, dtype=np.uint32) * np.uint32(cfg.bits)
    return np.bitwise_or.reduce(padded.reshape(n, wpg, per_word) << shifts, axis=2).astype(np.uint32)


def _unpack_code_rows(words: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """(n_groups, words_per_group) words -> (n_groups, G) codes."""
    n = words.shape[0]
    if 8 % cfg.bits == 0:
        per_byte = 8 // cfg.bits
        raw = np.ascontiguousarray(words, dtype='<u4').view(np.uint8)[:, :cfg.group_size // per_byte]
        shifts = np.arange(per_byte, dtype=np.uint8) * np.uint8(cfg.bits)
        return ((raw[:, :, None] >> shifts) & np.uint8(cfg.qmax)).reshape(n, cfg.group_size)
    shifts = np.arange(cfg.codes_per_word, dtype=np.uint32) * np.uint32(cfg.bits)
    mask = np.uint32(cfg.qmax)
    codes = (words[:, :, None] >> shifts) & mask
    return codes.reshape(n, -1)[:, :cfg.group_size].astype(np.uint8)


def _code_stream(codes: np.ndarray, bits: int) -> bytes:
    """Codes as one little-endian bit stream: code k occupies stream bits [k*b, (k+1)*b)."""
    planes = np.unpackbits(codes.astype(np.uint8, copy=False).reshape(-1, 1), axis=1, count=bits,
                           bitorder='little')
    return np.packbits(planes.ravel(), bitorder='little').tobytes()


def _codes_from_stream(payload: bytes, count: int, bits: int) -> np.ndarray:
    stream = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=count * bits, bitorder='little')
    return np.packbits(stream.reshape(count, bits), axis=1, bitorder='little').ravel()


# ---------------------------------------------------------------------------
# Packed matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PackedMatrix:
    """
    Bit-packed quantized matrix.

    Groups are laid out line by line: a line is a row for the Inner axis and a
    column for the Outer axis, and each line holds `groups_per_line` groups of
    G consecutive elements. code_words is group-major with words_per_group
    words per group. mode_mask is True for asymmetric groups.

    Serialized, the codes form one continuous group-major bit stream of
    exactly elements * b bits, so groups narrower than a word share words.
    """
    logical_rows: int
    logical_cols: int
    grouping_axis: GroupingAxis
    config: QuantConfig
    code_words: np.ndarray
    scales: np.ndarray
    aux_words: np.ndarray
    mode_mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'grouping_axis', GroupingAxis(self.grouping_axis))
        grouped = self.logical_cols if self.grouping_axis is GroupingAxis.INNER else self.logical_rows
        if grouped % self.config.group_size:
            raise TensorShapeError(
                f"grouped dimension {grouped} is not divisible by group size {self.config.group_size}")
        n = self.logical_rows * self.logical_cols // self.config.group_size
        arrays = {
            'code_words': (np.uint32, n * self.config.words_per_group),
            'scales': (np.float32, n),
            'aux_words': (np.uint32, n),
            'mode_mask': (bool, n),
        }
        for name, (dtype, expected) in arrays.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=dtype).ravel()
            if arr.size != expected:
                raise TensorShapeError(f"{name}: expected {expected} entries, got {arr.size}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls, rows: int, cols: int, axis: GroupingAxis, cfg: QuantConfig) -> 'PackedMatrix':
        n = rows * cols // cfg.group_size
        return cls(rows, cols, axis, cfg,
                   np.zeros(n * cfg.words_per_group, dtype=np.uint32), np.zeros(n, dtype=np.float32),
                   np.zeros(n, dtype=np.uint32), np.zeros(n, dtype=bool))

    @property
    def n_groups(self) -> int:
        return self.scales.size

    @property
    def lines(self) -> int:
        return self.logical_rows if self.grouping_axis is GroupingAxis.INNER else self.logical_cols

    @property
    def groups_per_line(self) -> int:
        grouped = self.logical_cols if self.grouping_axis is GroupingAxis.INNER else self.logical_rows
        return grouped // self.config.group_size

    @property
    def symmetric_fraction(self) -> float:
        return float(1.0 - self.mode_mask.mean()) if self.n_groups else 0.0

    # -- group access ----------------------------------------------------

    def line_view(self, name: str) -> np.ndarray:
        """Reshape a per-group array to (lines, groups_per_line, ...)."""
        arr = getattr(self, name)
        per_group = arr.size // self.n_groups if self.n_groups else (
            self.config.words_per_group if name == 'code_words' else 1)
        view = arr.reshape(self.lines, self.groups_per_line, per_group)
        return view if name == 'code_words' else view[..., 0]

    def group_codes(self, group_indices) -> np.ndarray:
        idx = np.asarray(group_indices, dtype=np.int64).ravel()
        words = self.code_words.reshape(self.n_groups, self.config.words_per_group)[idx]
        return _unpack_code_rows(words, self.config)

    def dequantize_groups(self, group_indices) -> np.ndarray:
        """Dequantize only the listed groups: (len(indices), G) float32."""
        idx = np.asarray(group_indices, dtype=np.int64).ravel()
        return _dequantize_rows(self.group_codes(idx), self.scales[idx], self.aux_words[idx], self.mode_mask[idx])

    # -- structural operations -------------------------------------------

    def _from_line_views(self, rows: int, cols: int, views: Dict[str, np.ndarray]) -> 'PackedMatrix':
        return PackedMatrix(rows, cols, self.grouping_axis, self.config,
                            views['code_words'].ravel(), views['scales'].ravel(),
                            views['aux_words'].ravel(), views['mode_mask'].ravel())

    def _views(self) -> Dict[str, np.ndarray]:
        return {name: self.line_view(name) for name in ('code_words', 'scales', 'aux_words', 'mode_mask')}

    def select_lines(self, start: int, stop: int) -> 'PackedMatrix':
        if not 0 <= start <= stop <= self.lines:
            raise TensorShapeError(f"line range [{start}, {stop}) outside [0, {self.lines}]")
        views = {k: v[start:stop] for k, v in self._views().items()}
        if self.grouping_axis is GroupingAxis.INNER:
            return self._from_line_views(stop - start, self.logical_cols, views)
        return self._from_line_views(self.logical_rows, stop - start, views)

    def select_line_groups(self, start: int, stop: int) -> 'PackedMatrix':
        if not 0 <= start <= stop <= self.groups_per_line:
            raise TensorShapeError(f"group range [{start}, {stop}) outside [0, {self.groups_per_line}]")
        views = {k: v[:, start:stop] for k, v in self._views().items()}
        span = (stop - start) * self.config.group_size
        if self.grouping_axis is GroupingAxis.INNER:
            return self._from_line_views(self.logical_rows, span, views)
        return self._from_line_views(span, self.logical_cols, views)

    def select_rows(self, start: int, stop: int) -> 'PackedMatrix':
        if self.grouping_axis is GroupingAxis.INNER:
            return self.select_lines(start, stop)
        g = self.config.group_size
        if start % g or stop % g:
            raise TensorShapeError(f"row slice [{start}, {stop}) is not aligned to groups of {g}")
        return self.select_line_groups(start // g, stop // g)

    def select_col_groups(self, start_group: int, stop_group: int) -> 'PackedMatrix':
        """Column slice of an Inner matrix, in whole groups."""
        if self.grouping_axis is not GroupingAxis.INNER:
            raise TensorShapeError("column-group slicing needs the Inner axis")
        return self.select_line_groups(start_group, stop_group)

    def _check_compatible(self, other: 'PackedMatrix') -> None:
        if other.grouping_axis is not self.grouping_axis or other.config != self.config:
            raise TensorShapeError("cannot join packed matrices with different layouts")

    def append_lines(self, other: 'PackedMatrix') -> 'PackedMatrix':
        self._check_compatible(other)
        if other.groups_per_line != self.groups_per_line:
            raise TensorShapeError("appended lines must have the same length")
        a, b = self._views(), other._views()
        views = {k: np.concatenate([a[k], b[k]], axis=0) for k in a}
        if self.grouping_axis is GroupingAxis.INNER:
            return self._from_line_views(self.logical_rows + other.logical_rows, self.logical_cols, views)
        return self._from_line_views(self.logical_rows, self.logical_cols + other.logical_cols, views)

    def extend_lines(self, other: 'PackedMatrix') -> 'PackedMatrix':
        """Append groups to the end of every line."""
        self._check_compatible(other)
        if other.lines != self.lines:
            raise TensorShapeError(f"line count mismatch {self.lines} vs {other.lines}")
        a, b = self._views(), other._views()
        views = {k: np.concatenate([a[k], b[k]], axis=1) for k in a}
        if self.grouping_axis is GroupingAxis.INNER:
            return self._from_line_views(self.logical_rows, self.logical_cols + other.logical_cols, views)
        return self._from_line_views(self.logical_rows + other.logical_rows, self.logical_cols, views)

    def append_rows(self, other: 'PackedMatrix') -> 'PackedMatrix':
        if self.grouping_axis is GroupingAxis.INNER:
            return self.append_lines(other)
        return self.extend_lines(other)

    def append_cols(self, other: 'PackedMatrix') -> 'PackedMatrix':
        if self.grouping_axis is GroupingAxis.INNER:
            return self.extend_lines(other)
        return self.append_lines(other)

    # -- serialization ---------------------------------------------------

    def _sections(self):
        sections = [
            ('code', _code_stream(self.group_codes(np.arange(self.n_groups)), self.config.bits)),
            ('scale', self.scales.astype('<f4').tobytes()),
            ('aux', self.aux_words.astype('<u4').tobytes()),
        ]
        if self.config.mode.stores_mask:
            sections.append(('mask', np.packbits(self.mode_mask, bitorder='little').tobytes()))
        return sections

    def section_sizes(self) -> Dict[str, int]:
        """Serialized byte count of each payload section."""
        sizes = {name: len(payload) for name, payload in self._sections()}
        sizes.setdefault('mask', 0)
        return sizes

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(FORMAT_MAGIC, FORMAT_VERSION, self.config.bits, self.config.group_size,
                              _MODE_CODES[self.config.mode], _AXIS_CODES[self.grouping_axis],
                              self.logical_rows, self.logical_cols)
        return header + b''.join(payload for _, payload in self._sections())

    @classmethod
    def from_bytes(cls, blob: bytes) -> 'PackedMatrix':
        if len(blob) < _HEADER.size:
            raise SnapshotFormatError(f"truncated header: {len(blob)} bytes")
        magic, version, bits, group_size, mode_code, axis_code, rows, cols = _HEADER.unpack_from(blob)
        if magic != FORMAT_MAGIC:
            raise SnapshotFormatError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"unsupported packed-matrix format version {version}")
        modes = {v: k for k, v in _MODE_CODES.items()}
        axes = {v: k for k, v in _AXIS_CODES.items()}
        if mode_code not in modes or axis_code not in axes:
            raise SnapshotFormatError(f"bad mode/axis codes {mode_code}/{axis_code}")
        try:
            cfg = QuantConfig(bits=bits, group_size=group_size, mode=modes[mode_code])
        except QuantConfigError as e:
            raise SnapshotFormatError(f"bad quantization header: {e}")
        grouped = cols if axes[axis_code] is GroupingAxis.INNER else rows
        if grouped % group_size:
            raise SnapshotFormatError(f"grouped dimension {grouped} not divisible by {group_size}")
        n = rows * cols // group_size
        sizes = [('code', n * group_size * bits // 8), ('scale', n * 4), ('aux', n * 4)]
        if cfg.mode.stores_mask:
            sizes.append(('mask', -(-n // 8)))
        expected = _HEADER.size + sum(size for _, size in sizes)
        if len(blob) < expected:
            raise SnapshotFormatError(f"truncated payload: expected {expected} bytes, found {len(blob)}")
        if len(blob) > expected:
            raise SnapshotFormatError(f"{len(blob) - expected} trailing bytes after payload")

        offset = _HEADER.size
        payload = {}
        for name, size in sizes:
            payload[name] = blob[offset:offset + size]
            offset += size
        if cfg.mode.stores_mask:
            mask = np.unpackbits(np.frombuffer(payload['mask'], dtype=np.uint8), bitorder='little')[:n].astype(bool)
        else:
            mask = np.full(n, cfg.mode is QuantMode.ASYM, dtype=bool)
        codes = _codes_from_stream(payload['code'], n * group_size, bits).reshape(n, group_size)
        return cls(rows, cols, axes[axis_code], cfg,
                   _pack_code_rows(codes, cfg),
                   np.frombuffer(payload['scale'], dtype='<f4'),
                   np.frombuffer(payload['aux'], dtype='<u4'),
                   mask)


def _group_rows(m: Matrix, axis: GroupingAxis, group_size: int) -> np.ndarray:
    axis = GroupingAxis(axis)
    x = m.data if axis is GroupingAxis.INNER else m.data.T
    if x.shape[1] % group_size:
        which = 'columns' if axis is GroupingAxis.INNER else 'rows'
        raise TensorShapeError(f"{x.shape[1]} {which} not divisible by group size {group_size}")
    return np.ascontiguousarray(x).reshape(-1, group_size)


def quantize_matrix(m: Matrix, axis: GroupingAxis, cfg: QuantConfig,
                    phase: Optional[str] = None) -> PackedMatrix:
    """Quantize every run of G elements along the grouped axis; no padding."""
    axis = GroupingAxis(axis)
    groups = _group_rows(m, axis, cfg.group_size)
    mode = cfg.effective_mode(phase)
    codes, scales, aux, mask, _ = _quantize_rows(groups, cfg.bits, mode)
    packed = PackedMatrix(m.rows, m.cols, axis, cfg, _pack_code_rows(codes, cfg), scales, aux, mask)
    logger.debug("quantized %dx%d (%s, %s) into %d groups, %.1f%% symmetric",
                 m.rows, m.cols, axis.value, mode.value, packed.n_groups, 100 * packed.symmetric_fraction)
    return packed


def dequantize_matrix(p: PackedMatrix) -> Matrix:
    if p.n_groups == 0:
        return Matrix.zeros(p.logical_rows, p.logical_cols)
    values = p.dequantize_groups(np.arange(p.n_groups))
    if p.grouping_axis is GroupingAxis.INNER:
        return Matrix(values.reshape(p.logical_rows, p.logical_cols))
    return Matrix(values.reshape(p.logical_cols, p.logical_rows).T)


def matrix_group_sse(m: Matrix, p: PackedMatrix) -> np.ndarray:
    """Per-group sum of squared reconstruction error, in group order."""
    if (m.rows, m.cols) != (p.logical_rows, p.logical_cols):
        raise TensorShapeError(f"shape mismatch {m.shape} vs {(p.logical_rows, p.logical_cols)}")
    groups = _group_rows(m, p.grouping_axis, p.config.group_size)
    if groups.shape[0] == 0:
        return np.zeros(0)
    return _sse_rows(groups, p.dequantize_groups(np.arange(p.n_groups)))


def estimate_packed_bits(cfg: QuantConfig, elements: int, phase: Optional[str] = None) -> int:
    """elements*b + groups*(32 + 32), plus one mask bit per group when the mode stores a mask."""
    if elements % cfg.group_size:
        raise TensorShapeError(f"{elements} elements not divisible by group size {cfg.group_size}")
    groups = elements // cfg.group_size
    bits = elements * cfg.bits + groups * (32 + AUX_BITS)
    if cfg.mode.stores_mask and not (cfg.mode is QuantMode.HYBRID_PREFILL and phase == DECODE):
        bits += groups
    return bits
