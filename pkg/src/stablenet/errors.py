"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions are incompatible with the requested operation."""


class ConstraintViolation(ValueError):
    """A structural parameter constraint (e.g. nonnegative filter) is broken."""


class ConvergenceError(RuntimeError):
    """An iterative estimate did not converge.

    The last available estimate is kept on ``estimate`` so callers can still
    report it.
    """

    def __init__(self, message, estimate=None, iterations=None):
        super().__init__(message)
        self.estimate = estimate
        self.iterations = iterations


class NumericalError(RuntimeError):
    """NaN or overflow encountered; ``step`` records where."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class LayerError(RuntimeError):
    """Wraps an error raised inside a network layer with the layer index."""

    def __init__(self, layer, kind, cause):
        super().__init__(f"layer {layer} ({kind}): {cause}")
        self.layer = layer
        self.kind = kind
        self.cause = cause


class ConfigError(ValueError):
    """Invalid or unknown configuration."""
