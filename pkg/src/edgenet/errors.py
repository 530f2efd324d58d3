"""Exception types shared across the package."""


class EdgeNetError(Exception):
    """Base class for all package-specific errors."""


class DataError(EdgeNetError):
    """A dataset record or input file is invalid."""


class ParseError(DataError):
    """An input file could not be parsed; the message names the line or record."""


class GraphError(EdgeNetError):
    """Graph construction failed (insufficient neighbors, degenerate geometry, ...)."""


class ShapeError(EdgeNetError):
    """Tensor operands have incompatible shapes."""


class NumericalError(EdgeNetError):
    """A non-finite value appeared where finite math was required."""
