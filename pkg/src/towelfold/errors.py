"""Exception hierarchy shared by every stage of the pipeline."""


class TowelFoldError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TowelFoldError, ValueError):
    """Invalid configuration value. The message names the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(TowelFoldError, ValueError):
    """Array shapes are incompatible for the requested operation."""


class NumericalError(TowelFoldError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class RenderError(TowelFoldError):
    """The scene cannot be rendered (e.g. the camera looks away from it)."""


class BehindCameraError(TowelFoldError, ValueError):
    """A point with non-positive depth was projected."""


class DegenerateGeometryError(TowelFoldError, ValueError):
    """Geometry is degenerate: parallel rays, collinear corners, ..."""


class DatasetError(TowelFoldError, OSError):
    """A dataset file is missing, unreadable or malformed."""
