"""Block-radial symmetry reduction on R^d and bound-state counting.

Subpackages follow the workflow: :mod:`blockrad.geometry` (block radii,
weights, trace/extension), :mod:`blockrad.counting` (lattice shells and
ordered cube weights), :mod:`blockrad.seqspace` (sequence norms and
entropy-number bounds), :mod:`blockrad.spectral` (Birman-Schwinger counts)
and :mod:`blockrad.cli`.
"""

from blockrad.errors import (
    BlockRadError,
    GridQualityError,
    InputError,
    InsufficientDataError,
    NumericalError,
    ParameterError,
    ResolutionError,
    ResourceError,
    UnsupportedRegimeError,
)
from blockrad.geometry import BlockDecomposition, DyadicCube, ReducedFunction

__version__ = "0.1.0"

__all__ = [
    "BlockDecomposition",
    "BlockRadError",
    "DyadicCube",
    "GridQualityError",
    "InputError",
    "InsufficientDataError",
    "NumericalError",
    "ParameterError",
    "ReducedFunction",
    "ResolutionError",
    "ResourceError",
    "UnsupportedRegimeError",
    "__version__",
]
