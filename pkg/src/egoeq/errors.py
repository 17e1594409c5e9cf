"""Exception hierarchy shared by every module.

The CLI maps :class:`InputError` (and its subclasses) to exit code 1 and
:class:`DivergenceError` to exit code 2.
"""


class EgoEqError(Exception):
    """Base class for all package errors."""


class InputError(EgoEqError, ValueError):
    """Malformed input data, configuration, or file."""


class SpecificationError(InputError):
    """Inconsistent layer chain or model specification."""


class DimensionError(InputError):
    """Array shape does not match what an operation expects."""


class TapeError(EgoEqError, RuntimeError):
    """A backward pass was given a tape that does not belong to the network state."""


class DivergenceError(EgoEqError, FloatingPointError):
    """Non-finite loss or gradient encountered during optimisation."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []
