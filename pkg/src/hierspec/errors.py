"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible; kernels never coerce."""


class FiniteError(ArithmeticError):
    """A kernel produced NaN or Inf."""


class CapacityError(RuntimeError):
    """A sequence or cache exceeded its configured maximum length."""


class ContractError(RuntimeError):
    """A caller violated an operation precondition (e.g. rollback below the
    committed frontier, or verifying a token its draft distribution assigns
    zero probability)."""


class WeightFormatError(ValueError):
    """Base class for weight-file load failures."""


class BadMagicError(WeightFormatError):
    """The file does not start with the expected magic bytes."""


class VersionError(WeightFormatError):
    """The file declares an unsupported format version."""


class TruncatedFileError(WeightFormatError):
    """The file ended mid-record."""


class ConfigError(ValueError):
    """An experiment configuration failed validation."""
