"""Error types raised by the quantized KV cache engine."""


class KVQuantError(Exception):
    """Base class for all engine errors."""


class TensorShapeError(KVQuantError, ValueError):
    """Dimension mismatch, out-of-range index or indivisible grouped dimension."""


class NonFiniteValueError(KVQuantError, ValueError):
    """NaN or Inf reached a place that only admits finite values."""


class QuantConfigError(KVQuantError, ValueError):
    """Invalid bit width, group size, mode or window configuration."""


class CodeRangeError(KVQuantError, ValueError):
    """A code does not fit in the configured bit width."""


class CacheStateError(KVQuantError):
    """Cache used before initialization or with the wrong row length."""


class NormalizationError(KVQuantError, ValueError):
    """Invalid key normalization vector or a second fold of the same weights."""


class SnapshotFormatError(KVQuantError):
    """Bad magic, truncated payload or inconsistent snapshot manifest."""


class UnsupportedVersionError(SnapshotFormatError):
    """Snapshot written with a format version this build cannot read."""


class KernelVerificationError(KVQuantError):
    """A kernel disagreed with the reference product on its spot check."""
