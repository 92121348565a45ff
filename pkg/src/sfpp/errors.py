"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: input problems (bad files,
bad shapes, bad flags) exit 2, numerical failures exit 3, and a
source-based estimator invoked without validation data exits 4.
"""


class SfppError(Exception):
    """Base class for all package errors."""


class InputError(SfppError):
    """Invalid user-supplied data: files, shapes, ranges, manifests."""


class ArrayFormatError(InputError):
    """Array file violates the supported NPY/CSV subset."""


class BundleValidationError(InputError):
    """Arrays are individually fine but inconsistent as a bundle."""


class DegenerateInputError(InputError):
    """Too little or ill-posed data for the requested operation."""


class NumericalError(SfppError):
    """A computation produced NaN or otherwise failed numerically."""


class SingularMatrixError(NumericalError):
    """Matrix not factorizable even after maximal regularization."""


class ConvergenceError(NumericalError):
    """Iterative solver exhausted its budget before converging."""


class MissingValidationDataError(InputError):
    """Source-based estimator called on a bundle without validation arrays."""
