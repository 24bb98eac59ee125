"""Exception types shared across the package."""


class GestreamError(Exception):
    """Base class for all package errors."""


class DegenerateInput(GestreamError):
    """Input is numerically degenerate (parallel/zero columns, zero vectors)."""


class InvalidRotation(GestreamError):
    """Matrix fails the rotation-matrix invariants."""


class TopologyError(GestreamError):
    """Skeleton parent array is not a tree."""


class ShapeError(GestreamError):
    """Array shape does not match the declared layout."""


class FormatError(GestreamError):
    """On-disk payload has a bad magic/version."""


class DimensionMismatch(GestreamError):
    """Latent width does not match the codebooks."""


class IndexOutOfRange(GestreamError):
    """Token index outside the codebook."""


class OutOfOrderToken(GestreamError):
    """Streaming decoder received rows out of order."""


class NonFiniteValue(GestreamError):
    """NaN or inf encountered where finite values are required."""


class CacheDesync(GestreamError):
    """Incremental step order violated for a KV cache."""


class SessionClosed(GestreamError):
    """Generation session was disposed."""


class InsufficientSamples(GestreamError):
    """Not enough samples for the requested statistic."""


class NoBeats(GestreamError):
    """No gesture beats detected; score undefined."""


class CheckpointMissing(GestreamError):
    """Required checkpoint file not found."""


class PortInUse(GestreamError):
    """Service port already bound."""
