"""Exception types shared across the codec."""


class CodecError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(CodecError):
    """Malformed file or bitstream container (bad magic, version, truncation)."""


class DimensionError(CodecError):
    """Image dimensions violate a precondition (e.g. not block-aligned)."""


class ShapeError(CodecError):
    """Tensor or parameter shape mismatch; message names the offender."""


class DataError(CodecError):
    """Input data violates a value-level precondition."""


class NumericError(CodecError):
    """Numerical failure: singular system beyond rescue, non-finite values."""


class GraphError(CodecError):
    """Autodiff misuse: backward from a non-scalar, cycle, stale graph."""


class StreamError(CodecError):
    """Entropy stream cannot be decoded (truncated or corrupt payload)."""


class ModelMismatchError(CodecError):
    """Bitstream was produced by a model with a different configuration."""


class HashMismatchError(CodecError):
    """Stored checksum does not match the payload."""
