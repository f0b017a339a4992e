class CnnDecompError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CnnDecompError):
    """Tensor shapes do not conform (kernel/channel/size mismatch)."""


class FormatError(CnnDecompError):
    """A model/dataset/module file could not be parsed."""


class VersionMismatchError(FormatError):
    """File carries an unsupported format version."""


class ValidationError(CnnDecompError):
    """Structurally parseable data violates an invariant."""
