"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (unknown shape kind, mismatched depths, bad schema)."""


class InputError(ValueError):
    """Invalid input data (empty cloud, out-of-range request)."""


class DomainError(ValueError):
    """Value outside its admissible domain (point outside cube, index overflow)."""


class ShapeMismatchError(ValueError):
    """Array shapes incompatible with the requested operation."""


class FormatError(ValueError):
    """Malformed file content (bad magic, parse failure)."""


class NumericError(ArithmeticError):
    """Non-finite value encountered where finiteness is required."""
