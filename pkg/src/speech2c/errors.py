"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class InputTooShortError(ValueError):
    """Input has fewer samples/frames than an operation needs."""


class FormatError(ValueError):
    """A file on disk does not have the expected layout."""


class ContractError(RuntimeError):
    """A caller broke an API precondition (e.g. backward twice)."""


class InfeasibleAlignmentError(ValueError):
    """CTC target cannot be aligned to the given number of frames."""


class IncompatibleConfigError(ValueError):
    """Two model configurations disagree where they must match."""


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN/inf loss."""
