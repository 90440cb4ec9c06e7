"""Exception types raised across the package."""


class InvalidDimensionError(ValueError):
    """Array shapes are inconsistent or a dimension is out of range."""


class InvalidParameterError(ValueError):
    """A scalar parameter is outside its admissible range."""


class UnsupportedLayoutError(ValueError):
    pass


class InvalidDistanceError(ValueError):
    pass


class NumericalGuardError(ArithmeticError):
    """A denominator that must stay positive did not."""


class ConfigError(ValueError):
    """Experiment configuration could not be parsed or validated."""
