"""
Dense single-precision tensors and the reference operations every other module
is checked against.

Values are stored as read-only float32 numpy arrays. Reductions accumulate in
float64 in a fixed left-to-right order and round once, so results are
reproducible bit for bit.
"""

import json
import os
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from exceptions import NonFiniteValueError, SnapshotFormatError, TensorShapeError


def _frozen_float32(data, ndim: int, kind: str) -> np.ndarray:
    arr = np.array(data, dtype=np.float32)
    if arr.ndim != ndim:
        raise TensorShapeError(f"{kind} expects {ndim}-D data, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteValueError(f"{kind} values must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Matrix:
    """Row-major float32 matrix. NaN/Inf are rejected at construction."""
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'data', _frozen_float32(self.data, 2, 'Matrix'))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, rows: int, cols: int) -> 'Matrix':
        return cls(np.zeros((rows, cols), dtype=np.float32))

    def row(self, index: int) -> 'Vector':
        return Vector(self.data[resolve_row_index(index, self.rows, inclusive_end=False)])

    def equals(self, other: 'Matrix') -> bool:
        """Bit-exact comparison, shape included."""
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()


@dataclass(frozen=True, eq=False)
class Vector:
    """1-D float32 vector (decode-phase query and attention-weight rows)."""
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'data', _frozen_float32(self.data, 1, 'Vector'))

    @property
    def len(self) -> int:
        return self.data.shape[0]

    def __len__(self):
        return self.data.shape[0]

    def as_row(self) -> Matrix:
        return Matrix(self.data.reshape(1, -1))


def matmul_ref(a: Matrix, b: Matrix) -> Matrix:
    """Reference product with float64 left-to-right accumulation over k."""
    if a.cols != b.rows:
        raise TensorShapeError(f"matmul_ref: {a.shape} x {b.shape}")
    lhs = a.data.astype(np.float64)
    rhs = b.data.astype(np.float64)
    acc = np.zeros((a.rows, b.cols), dtype=np.float64)
    for k in range(a.cols):
        acc += lhs[:, k:k + 1] * rhs[k:k + 1, :]
    return Matrix(acc.astype(np.float32))


def vecmat_ref(v: Vector, m: Matrix) -> Vector:
    """Vector-matrix product through matmul_ref."""
    return Vector(matmul_ref(v.as_row(), m).data[0])


def softmax_row(s: Vector, scale: float = 1.0) -> Vector:
    """Softmax of scale * s with max-subtraction."""
    if s.len == 0:
        raise TensorShapeError("softmax_row of an empty vector")
    x = s.data.astype(np.float64) * float(scale)
    x -= x.max()
    e = np.exp(x)
    return Vector((e / e.sum()).astype(np.float32))


def resolve_row_index(index: int, rows: int, inclusive_end: bool = True) -> int:
    """Map a possibly negative row index onto [0, rows] (or [0, rows) for element access)."""
    resolved = index + rows if index < 0 else index
    upper = rows if inclusive_end else rows - 1
    if resolved < 0 or resolved > upper:
        raise TensorShapeError(f"row index {index} out of range for {rows} rows")
    return resolved


def slice_rows(m: Matrix, start: int, stop: int) -> Matrix:
    """Rows start..stop-1; negative indices count from the end."""
    lo = resolve_row_index(start, m.rows)
    hi = resolve_row_index(stop, m.rows)
    if lo > hi:
        raise TensorShapeError(f"slice_rows: start {start} after stop {stop}")
    return Matrix(m.data[lo:hi])


def rows_from_end(m: Matrix, count: int) -> Matrix:
    """The last `count` rows, the m[-count:] notation."""
    if count < 0 or count > m.rows:
        raise TensorShapeError(f"cannot take {count} trailing rows of {m.rows}")
    return slice_rows(m, m.rows - count, m.rows)


def concat_rows(a: Matrix, b: Matrix, *rest: Matrix) -> Matrix:
    """Vertical concatenation along the first dimension."""
    parts = (a, b) + rest
    cols = a.cols
    for part in parts:
        if part.cols != cols:
            raise TensorShapeError(f"concat_rows: column mismatch {cols} vs {part.cols}")
    return Matrix(np.concatenate([p.data for p in parts], axis=0))


def transpose(m: Matrix) -> Matrix:
    return Matrix(m.data.T)


def save_tensor(path: str, m: Matrix) -> None:
    """Raw little-endian float32 payload plus a `<path>.json` shape sidecar."""
    with open(path, 'wb') as f:
        f.write(m.data.astype('<f4').tobytes())
    with open(path + '.json', 'w') as f:
        json.dump({'shape': [m.rows, m.cols]}, f)


def load_tensor(path: str) -> Matrix:
    sidecar = path + '.json'
    if not os.path.exists(sidecar):
        raise SnapshotFormatError(f"missing shape sidecar {sidecar}")
    with open(sidecar, 'r') as f:
        meta = json.load(f)
    shape = meta.get('shape')
    if not isinstance(shape, list) or len(shape) != 2:
        raise SnapshotFormatError(f"bad shape in {sidecar}: {shape!r}")
    rows, cols = int(shape[0]), int(shape[1])
    try:
        with open(path, 'rb') as f:
            payload = f.read()
    except OSError as e:
        raise SnapshotFormatError(f"cannot read tensor payload {path}: {e}")
    if len(payload) != rows * cols * 4:
        raise SnapshotFormatError(
            f"{path}: expected {rows * cols * 4} bytes for shape {shape}, found {len(payload)}")
    return Matrix(np.frombuffer(payload, dtype='<f4').reshape(rows, cols))
