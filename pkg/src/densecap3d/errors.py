"""Exception hierarchy shared across the package."""


class DensecapError(Exception):
    """Base class for all errors raised by densecap3d."""


class DimensionError(DensecapError, ValueError):
    pass


class ArgumentError(DensecapError, ValueError):
    pass


class NumericalError(DensecapError, FloatingPointError):
    """A tensor op produced NaN or Inf."""


class FormatError(DensecapError, ValueError):
    pass


class ValidationError(DensecapError, ValueError):
    """Input parsed but violates a data-model invariant.

    ``path`` names the offending field, e.g. ``objects[2].feature``.
    """

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class CompatibilityError(DensecapError):
    pass


class PlacementError(DensecapError):
    pass


class VisibilityError(DensecapError):
    pass


class SelectionError(DensecapError):
    pass
