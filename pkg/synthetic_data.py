"""
Seeded synthetic activations for the benchmarks and error reports.

Rows are generated in fixed-size chunks, each from its own child of one
SeedSequence, so the output depends only on the seed and never on how many
workers produced it.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from joblib import Parallel, delayed

from exceptions import QuantConfigError, TensorShapeError
from tensor_core import Matrix, Vector

logger = logging.getLogger(__name__)

CHUNK_ROWS = 4096


class Distribution(str, Enum):
    GAUSSIAN = 'gaussian'
    CHANNEL_OUTLIERS = 'gaussian_with_channel_outliers'


@dataclass(frozen=True)
class SyntheticDataSpec:
    distribution: Distribution = Distribution.GAUSSIAN
    sigma: float = 1.0
    outlier_channels: int = 0
    outlier_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, 'distribution', Distribution(self.distribution))
        except ValueError:
            raise QuantConfigError(f"unknown distribution {self.distribution!r}")
        if self.sigma <= 0:
            raise QuantConfigError(f"sigma must be positive, got {self.sigma}")
        if self.outlier_scale < 1:
            raise QuantConfigError(f"outlier_scale must be >= 1, got {self.outlier_scale}")
        if self.outlier_channels < 0:
            raise QuantConfigError(f"outlier_channels must be >= 0, got {self.outlier_channels}")

    @classmethod
    def channel_outliers(cls, sigma: float = 1.0, channels: int = 4, scale: float = 50.0,
                         seed: int = 0) -> 'SyntheticDataSpec':
        return cls(Distribution.CHANNEL_OUTLIERS, sigma, channels, scale, seed)


def _chunk(seed_seq: np.random.SeedSequence, rows: int, cols: int, sigma: float) -> np.ndarray:
    rng = np.random.default_rng(seed_seq)
    return (rng.standard_normal((rows, cols)) * sigma).astype(np.float32)


def outlier_channel_indices(spec: SyntheticDataSpec, cols: int) -> np.ndarray:
    """Channels scaled up by the outlier distribution, sorted."""
    if spec.distribution is not Distribution.CHANNEL_OUTLIERS or spec.outlier_channels == 0:
        return np.zeros(0, dtype=np.int64)
    if spec.outlier_channels > cols:
        raise TensorShapeError(f"{spec.outlier_channels} outlier channels requested for width {cols}")
    # dedicated stream, separate from the chunk children
    rng = np.random.default_rng([spec.seed, 1])
    return np.sort(rng.choice(cols, size=spec.outlier_channels, replace=False))


def generate_matrix(spec: SyntheticDataSpec, rows: int, cols: int, n_jobs: int = 1) -> Matrix:
    if rows < 0 or cols < 0:
        raise TensorShapeError(f"negative shape ({rows}, {cols})")
    n_chunks = -(-rows // CHUNK_ROWS)
    children = np.random.SeedSequence(spec.seed).spawn(n_chunks)
    sizes = [min(CHUNK_ROWS, rows - i * CHUNK_ROWS) for i in range(n_chunks)]
    parts = Parallel(n_jobs=n_jobs, prefer='threads')(
        delayed(_chunk)(child, size, cols, spec.sigma) for child, size in zip(children, sizes))
    data = np.concatenate(parts, axis=0) if parts else np.zeros((0, cols), dtype=np.float32)

    outliers = outlier_channel_indices(spec, cols)
    if outliers.size:
        data[:, outliers] *= np.float32(spec.outlier_scale)
    logger.debug("generated %dx%d %s matrix (seed %d, %d outlier channels)",
                 rows, cols, spec.distribution.value, spec.seed, outliers.size)
    return Matrix(data)


def generate_vector(spec: SyntheticDataSpec, length: int) -> Vector:
    return Vector(generate_matrix(spec, 1, length).data[0])


def constant_matrix(rows: int, cols: int, value: float = 1.0) -> Matrix:
    return Matrix(np.full((rows, cols), value, dtype=np.float32))
