"""
Multi-head attention over the windowed quantized cache.

Prefill runs full-precision causal attention and builds the cache; decode
scores the new query against three key segments (sink, packed middle,
recent) and mixes the matching value segments. Key channels can be
normalized by a per-pair factor that is folded into W_Q and W_K so future
tokens come out of the projection already normalized.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from exceptions import CacheStateError, NormalizationError, TensorShapeError
from kernels import qgemv_inner
from kv_cache import CacheConfig, QuantizedKVCache
from quantizer import PackedMatrix
from tensor_core import Matrix, Vector, matmul_ref, softmax_row

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelDims:
    d: int
    n_h: int

    def __post_init__(self):
        if self.d <= 0 or self.n_h <= 0:
            raise TensorShapeError(f"model dims must be positive, got d={self.d} n_h={self.n_h}")
        if self.d % self.n_h:
            raise TensorShapeError(f"d={self.d} is not a multiple of n_h={self.n_h}")
        if self.d_h % 2:
            raise TensorShapeError(f"head width {self.d_h} must be even for rotary pairs")

    @property
    def d_h(self) -> int:
        return self.d // self.n_h

    def head_slice(self, head: int) -> slice:
        return slice(head * self.d_h, (head + 1) * self.d_h)

    def check_group_size(self, group_size: int) -> None:
        if self.d % group_size:
            raise TensorShapeError(f"d={self.d} is not divisible by group size {group_size}")


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    """Projection weights, applied as x @ W. `folded` marks weights carrying a key norm."""
    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_o: Matrix
    folded: bool = False

    def check(self, dims: ModelDims) -> None:
        for name in ('w_q', 'w_k', 'w_v', 'w_o'):
            shape = getattr(self, name).shape
            if shape != (dims.d, dims.d):
                raise TensorShapeError(f"{name} has shape {shape}, expected {(dims.d, dims.d)}")


@dataclass(frozen=True, eq=False)
class NormState:
    norm_k: Vector
    folded: bool = False

    def __post_init__(self):
        values = self.norm_k.data
        if values.size % 2:
            raise NormalizationError("norm vector must cover whole channel pairs")
        if np.any(values <= 0):
            raise NormalizationError("norm entries must be positive")
        if not np.array_equal(values[0::2], values[1::2]):
            raise NormalizationError("norm entries must be shared within each rotary pair")


@dataclass(frozen=True)
class RopeParams:
    theta_base: float = 10000.0
    max_positions: int = 1 << 20

    def __post_init__(self):
        if self.theta_base <= 1:
            raise TensorShapeError(f"theta_base must exceed 1, got {self.theta_base}")


@dataclass(frozen=True)
class AttentionConfig:
    cache: CacheConfig = field(default_factory=CacheConfig)
    normalize: bool = True
    rope: RopeParams = field(default_factory=RopeParams)
    head_jobs: int = 1


class PrefillResult(NamedTuple):
    output: Matrix
    cache: QuantizedKVCache
    norm: NormState
    folded_weights: AttentionWeights


class DecodeResult(NamedTuple):
    output: Vector
    cache: QuantizedKVCache


# ---------------------------------------------------------------------------
# Projections, rotary embedding, normalization
# ---------------------------------------------------------------------------

def _project(x: Matrix, w: Matrix) -> Matrix:
    return Matrix((x.data.astype(np.float64) @ w.data.astype(np.float64)).astype(np.float32))


def rope_apply(x: Matrix, positions: Sequence[int], dims: ModelDims, p: RopeParams = RopeParams()) -> Matrix:
    """Rotate channel pair (2i, 2i+1) of every head by pos * theta_base^(-2i/d_h)."""
    if dims.d_h % 2:
        raise TensorShapeError(f"head width {dims.d_h} must be even for rotary pairs")
    pos = np.asarray(positions, dtype=np.int64).ravel()
    if pos.size != x.rows:
        raise TensorShapeError(f"{pos.size} positions for {x.rows} rows")
    if x.cols != dims.d:
        raise TensorShapeError(f"rope_apply expects {dims.d} columns, got {x.cols}")
    if pos.size and (pos.min() < 0 or pos.max() >= p.max_positions):
        raise TensorShapeError(f"positions must lie in [0, {p.max_positions})")

    half = dims.d_h // 2
    inv_freq = p.theta_base ** (-2.0 * np.arange(half, dtype=np.float64) / dims.d_h)
    angles = pos[:, None].astype(np.float64) * inv_freq[None, :]  # (rows, half)
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]
    pairs = x.data.astype(np.float64).reshape(x.rows, dims.n_h, half, 2)
    even, odd = pairs[..., 0], pairs[..., 1]
    out = np.empty_like(pairs)
    out[..., 0] = even * cos - odd * sin
    out[..., 1] = even * sin + odd * cos
    return Matrix(out.reshape(x.rows, dims.d).astype(np.float32))


def compute_key_norm(k: Matrix) -> NormState:
    """sqrt of the max |K| over each rotary pair and all tokens; 1 where that max is 0."""
    if k.cols % 2:
        raise NormalizationError(f"key width {k.cols} must be even")
    if k.rows == 0:
        return NormState(Vector(np.ones(k.cols, dtype=np.float32)))
    channel_max = np.abs(k.data.astype(np.float64)).max(axis=0)
    pair_max = channel_max.reshape(-1, 2).max(axis=1)
    norm = np.where(pair_max > 0, np.sqrt(pair_max), 1.0)
    return NormState(Vector(np.repeat(norm, 2).astype(np.float32)))


def normalize_keys(k: Matrix, norm: NormState) -> Matrix:
    if norm.norm_k.len != k.cols:
        raise NormalizationError(f"norm length {norm.norm_k.len} does not match key width {k.cols}")
    return Matrix((k.data.astype(np.float64) / norm.norm_k.data.astype(np.float64)).astype(np.float32))


def fold_normalization(weights: AttentionWeights, norm: NormState) -> AttentionWeights:
    """W_K columns divided by norm, W_Q columns multiplied by it."""
    if weights.folded or norm.folded:
        raise NormalizationError("weights already carry a folded key norm")
    if norm.norm_k.len != weights.w_k.cols:
        raise NormalizationError(f"norm length {norm.norm_k.len} does not match width {weights.w_k.cols}")
    n = norm.norm_k.data.astype(np.float64)
    return AttentionWeights(
        w_q=Matrix((weights.w_q.data.astype(np.float64) * n).astype(np.float32)),
        w_k=Matrix((weights.w_k.data.astype(np.float64) / n).astype(np.float32)),
        w_v=weights.w_v,
        w_o=weights.w_o,
        folded=True)


def unfold_normalization(weights: AttentionWeights, norm: NormState) -> AttentionWeights:
    if not weights.folded:
        raise NormalizationError("weights carry no folded key norm")
    n = norm.norm_k.data.astype(np.float64)
    return AttentionWeights(
        w_q=Matrix((weights.w_q.data.astype(np.float64) / n).astype(np.float32)),
        w_k=Matrix((weights.w_k.data.astype(np.float64) * n).astype(np.float32)),
        w_v=weights.w_v,
        w_o=weights.w_o,
        folded=False)


# ---------------------------------------------------------------------------
# Prefill
# ---------------------------------------------------------------------------

def _causal_attention(q: Matrix, k: Matrix, v: Matrix, dims: ModelDims) -> np.ndarray:
    """Per-head causal softmax attention in float64; returns the N x d head outputs."""
    n = q.rows
    scale = 1.0 / math.sqrt(dims.d_h)
    future = np.triu(np.ones((n, n), dtype=bool), k=1)
    out = np.empty((n, dims.d), dtype=np.float64)
    for h in range(dims.n_h):
        cols = dims.head_slice(h)
        qh = q.data[:, cols].astype(np.float64)
        kh = k.data[:, cols].astype(np.float64)
        vh = v.data[:, cols].astype(np.float64)
        scores = np.where(future, -np.inf, (qh @ kh.T) * scale)
        scores -= scores.max(axis=1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=1, keepdims=True)
        out[:, cols] = probs @ vh
    return out


def prefill(x: Matrix, weights: AttentionWeights, dims: ModelDims,
            cfg: Optional[AttentionConfig] = None) -> PrefillResult:
    """Full-precision causal attention over the prompt, then cache construction and weight folding."""
    cfg = cfg or AttentionConfig()
    if x.rows < 1:
        raise TensorShapeError("prefill needs at least one token")
    if x.cols != dims.d:
        raise TensorShapeError(f"input width {x.cols} does not match d={dims.d}")
    weights.check(dims)
    dims.check_group_size(cfg.cache.quant.group_size)

    positions = np.arange(x.rows)
    q = rope_apply(_project(x, weights.w_q), positions, dims, cfg.rope)
    k = rope_apply(_project(x, weights.w_k), positions, dims, cfg.rope)
    v = _project(x, weights.w_v)

    heads = _causal_attention(q, k, v, dims)
    output = Matrix((heads @ weights.w_o.data.astype(np.float64)).astype(np.float32))

    if cfg.normalize:
        norm = compute_key_norm(k)
        cache = QuantizedKVCache.init_from_prefill(normalize_keys(k, norm), v, cfg.cache)
        folded = fold_normalization(weights, norm)
        norm = NormState(norm.norm_k, folded=True)
    else:
        norm = NormState(Vector(np.ones(dims.d, dtype=np.float32)))
        cache = QuantizedKVCache.init_from_prefill(k, v, cfg.cache)
        folded = weights

    logger.info("prefill of %d tokens: cache layout %s", x.rows, cache.layout())
    return PrefillResult(output, cache, norm, folded)


# ---------------------------------------------------------------------------
# Decode
# ---------------------------------------------------------------------------

def head_scores(q: Vector, key_views: Tuple[Matrix, PackedMatrix, Matrix], dims: ModelDims, head: int) -> Vector:
    """Unscaled scores of one head's query against sink, packed middle and recent keys, in token order."""
    k_sink, k_hat, k_recent = key_views
    cols = dims.head_slice(head)
    qh = q.data[cols].astype(np.float64)
    parts = [k_sink.data[:, cols].astype(np.float64) @ qh]
    if k_hat.logical_rows:
        g = k_hat.config.group_size
        if dims.d_h % g == 0:
            block = k_hat.select_col_groups(cols.start // g, cols.stop // g)
            parts.append(qgemv_inner(Vector(q.data[cols]), block).output.data.astype(np.float64))
        else:
            masked = np.zeros(dims.d, dtype=np.float32)
            masked[cols] = q.data[cols]
            parts.append(qgemv_inner(Vector(masked), k_hat).output.data.astype(np.float64))
    parts.append(k_recent.data[:, cols].astype(np.float64) @ qh)
    return Vector(np.concatenate(parts).astype(np.float32))


def _head_output(q: Vector, key_views, value_views, dims: ModelDims, head: int) -> np.ndarray:
    probs = softmax_row(head_scores(q, key_views, dims, head), scale=1.0 / math.sqrt(dims.d_h)).data
    v_sink, v_hat, v_recent = value_views
    cols = dims.head_slice(head)
    n_sink, n_mid = v_sink.rows, v_hat.logical_cols

    out = probs[:n_sink].astype(np.float64) @ v_sink.data[:, cols].astype(np.float64)
    if n_mid:
        mid = qgemv_inner(Vector(probs[n_sink:n_sink + n_mid]), v_hat.select_rows(cols.start, cols.stop))
        out = out + mid.output.data.astype(np.float64)
    out = out + probs[n_sink + n_mid:].astype(np.float64) @ v_recent.data[:, cols].astype(np.float64)
    return out


def decode_step(x: Vector, cache: Optional[QuantizedKVCache], weights_folded: AttentionWeights,
                dims: ModelDims, cfg: Optional[AttentionConfig] = None) -> DecodeResult:
    """Project one token, append it to the cache, attend over every cached position."""
    cfg = cfg or AttentionConfig()
    if cache is None or not cache.initialized:
        raise CacheStateError("decode_step needs a cache initialized by prefill")
    if x.len != dims.d:
        raise TensorShapeError(f"input width {x.len} does not match d={dims.d}")
    if cfg.normalize and not weights_folded.folded:
        raise NormalizationError("normalized decode needs the folded weights returned by prefill")
    weights_folded.check(dims)

    row = x.as_row()
    position = [cache.total_tokens]
    q = rope_apply(_project(row, weights_folded.w_q), position, dims, cfg.rope).row(0)
    k = rope_apply(_project(row, weights_folded.w_k), position, dims, cfg.rope).row(0)
    v = _project(row, weights_folded.w_v).row(0)
    cache.append_token(k, v)

    key_views = cache.assemble_key_views()
    value_views = cache.assemble_value_views()
    per_head: List[np.ndarray] = Parallel(n_jobs=cfg.head_jobs, prefer='threads')(
        delayed(_head_output)(q, key_views, value_views, dims, h) for h in range(dims.n_h))
    heads = np.concatenate(per_head)
    output = Vector((heads @ weights_folded.w_o.data.astype(np.float64)).astype(np.float32))
    return DecodeResult(output, cache)


# ---------------------------------------------------------------------------
# Full-precision references
# ---------------------------------------------------------------------------

def reference_mha(x: Matrix, weights: AttentionWeights, dims: ModelDims, rope: RopeParams = RopeParams()) -> Matrix:
    """Plain causal multi-head attention, one softmax per query row through the tensor-core oracles."""
    positions = np.arange(x.rows)
    q = rope_apply(matmul_ref(x, weights.w_q), positions, dims, rope)
    k = rope_apply(matmul_ref(x, weights.w_k), positions, dims, rope)
    v = matmul_ref(x, weights.w_v)
    scale = 1.0 / math.sqrt(dims.d_h)
    heads = np.zeros((x.rows, dims.d), dtype=np.float64)
    for i in range(x.rows):
        for h in range(dims.n_h):
            cols = dims.head_slice(h)
            qh = q.data[i, cols].astype(np.float64)
            scores = k.data[:i + 1, cols].astype(np.float64) @ qh
            probs = softmax_row(Vector(scores.astype(np.float32)), scale).data.astype(np.float64)
            heads[i, cols] = probs @ v.data[:i + 1, cols].astype(np.float64)
    return matmul_ref(Matrix(heads.astype(np.float32)), weights.w_o)


class FullPrecisionShadow:
    """Unquantized, unnormalized incremental attention used to measure decode error."""

    def __init__(self, weights: AttentionWeights, dims: ModelDims, rope: RopeParams = RopeParams()):
        if weights.folded:
            raise NormalizationError("the shadow model runs on unfolded weights")
        weights.check(dims)
        self.weights = weights
        self.dims = dims
        self.rope = rope
        self._k = np.zeros((0, dims.d), dtype=np.float32)
        self._v = np.zeros((0, dims.d), dtype=np.float32)

    @property
    def total_tokens(self) -> int:
        return self._k.shape[0]

    def prefill(self, x: Matrix) -> Matrix:
        positions = np.arange(x.rows)
        q = rope_apply(_project(x, self.weights.w_q), positions, self.dims, self.rope)
        k = rope_apply(_project(x, self.weights.w_k), positions, self.dims, self.rope)
        v = _project(x, self.weights.w_v)
        self._k, self._v = k.data.copy(), v.data.copy()
        heads = _causal_attention(q, k, v, self.dims)
        return Matrix((heads @ self.weights.w_o.data.astype(np.float64)).astype(np.float32))

    def step(self, x: Vector) -> Vector:
        row = x.as_row()
        position = [self.total_tokens]
        q = rope_apply(_project(row, self.weights.w_q), position, self.dims, self.rope).data[0]
        k = rope_apply(_project(row, self.weights.w_k), position, self.dims, self.rope).data
        v = _project(row, self.weights.w_v).data
        self._k = np.concatenate([self._k, k])
        self._v = np.concatenate([self._v, v])
        scale = 1.0 / math.sqrt(self.dims.d_h)
        heads = np.empty(self.dims.d, dtype=np.float64)
        for h in range(self.dims.n_h):
            cols = self.dims.head_slice(h)
            scores = self._k[:, cols].astype(np.float64) @ q[cols].astype(np.float64)
            probs = softmax_row(Vector(scores.astype(np.float32)), scale).data.astype(np.float64)
            heads[cols] = probs @ self._v[:, cols].astype(np.float64)
        return Vector((heads @ self.weights.w_o.data.astype(np.float64)).astype(np.float32))


def random_weights(dims: ModelDims, seed: int = 0) -> AttentionWeights:
    """Gaussian projections with std 1/sqrt(d)."""
    rng = np.random.default_rng(seed)
    std = 1.0 / math.sqrt(dims.d)
    mats = [Matrix((rng.standard_normal((dims.d, dims.d)) * std).astype(np.float32)) for _ in range(4)]
    return AttentionWeights(*mats)


def score_error_bound(q: Vector, k_hat: PackedMatrix, dims: ModelDims, head: int) -> np.ndarray:
    """Per packed key token: sum over the head's channels of |q_c| * S_group / 2."""
    g = k_hat.config.group_size
    weights = np.zeros(dims.d, dtype=np.float64)
    cols = dims.head_slice(head)
    weights[cols] = np.abs(q.data[cols].astype(np.float64))
    per_group = weights.reshape(-1, g).sum(axis=1)  # (d / G,)
    if k_hat.logical_rows == 0:
        return np.zeros(0)
    scales = k_hat.line_view('scales').astype(np.float64)  # (tokens, d / G)
    return scales @ per_group / 2.0
