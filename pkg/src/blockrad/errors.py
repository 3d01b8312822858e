"""Exception hierarchy.

Input/parameter/resource problems map to CLI exit code 3, numerical
failures to exit code 4 (see :mod:`blockrad.cli`).
"""


class BlockRadError(Exception):
    """Base class for all library errors."""

    exit_code = 3


class InputError(BlockRadError, ValueError):
    """Malformed input: wrong dimension, negative index, bad block sizes."""


class ParameterError(BlockRadError, ValueError):
    """A numeric parameter is outside the supported range."""


class ResourceError(BlockRadError):
    """An enumeration or covering would exceed its configured budget."""


class InsufficientDataError(BlockRadError, ValueError):
    """Too few usable points for a regression."""


class UnsupportedRegimeError(BlockRadError, NotImplementedError):
    """The requested asymptotic regime is not implemented."""


class NumericalError(BlockRadError, ArithmeticError):
    """A numerical routine did not reach its target accuracy."""

    exit_code = 4


class GridQualityError(NumericalError):
    """A discretization grid fails its quality checks."""


class ResolutionError(NumericalError):
    """Test functions are too narrow for the grid."""


class PreconditionWarning(UserWarning):
    """A hypothesis could not be confirmed numerically."""


class InvarianceWarning(UserWarning):
    """A sampled function is not invariant under block rotations."""


class GridResolutionWarning(UserWarning):
    """Counts at the two finest grids disagree."""
