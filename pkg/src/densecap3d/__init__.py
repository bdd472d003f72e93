"""Relational dense captioning of 3D scenes on a small numpy autodiff core."""

from densecap3d.errors import (ArgumentError, CompatibilityError, DensecapError, DimensionError, FormatError,
                               NumericalError, PlacementError, SelectionError, ValidationError,
                               VisibilityError)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "CompatibilityError", "DensecapError", "DimensionError", "FormatError", "NumericalError",
    "PlacementError", "SelectionError", "ValidationError", "VisibilityError",
]
