"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: argparse usage errors
exit 2, DataError exits 3, NumericalError exits 4.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DataError(ValueError):
    """Malformed input data: bad schema, non-finite values, empty groups."""


class NumericalError(RuntimeError):
    """A numerical routine failed: non-convergence or non-finite results."""
