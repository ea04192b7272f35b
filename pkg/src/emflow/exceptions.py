"""Exception types shared across the package."""


class EmflowError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(EmflowError, ValueError):
    """Malformed input: bad shapes, non-finite values, invalid options."""


class ConfigError(EmflowError, ValueError):
    """Invalid configuration field(s). ``fields`` lists every offender."""

    def __init__(self, fields):
        self.fields = list(fields)
        super().__init__("invalid config: " + "; ".join(self.fields))


class NotPositiveDefiniteError(EmflowError, ValueError):
    """Covariance not positive definite even after diagonal jitter."""

    def __init__(self, message, smallest_eigenvalue=None):
        if smallest_eigenvalue is not None:
            message = f"{message} (smallest eigenvalue ~ {smallest_eigenvalue:.3e})"
        self.smallest_eigenvalue = smallest_eigenvalue
        super().__init__(message)


class NonFiniteError(EmflowError, FloatingPointError):
    """A loss, activation, or gradient became NaN/inf during training."""

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"{message} (coupling layer {layer_index})"
        self.layer_index = layer_index
        super().__init__(message)
