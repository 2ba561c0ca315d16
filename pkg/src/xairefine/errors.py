"""Exception types shared across the package."""


class InputError(ValueError):
    """Argument has the wrong shape, range or type."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during a computation."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class FormatError(ValueError):
    """A serialized file could not be parsed."""


class TruncationError(FormatError):
    """A serialized payload ended before the header said it would."""


class DegenerateDesignError(ArithmeticError):
    """The surrogate design matrix is singular and no ridge was given."""


class DegenerateAttributionError(ValueError):
    """An attribution vector has zero total mass."""


class UndefinedAlignmentError(ValueError):
    """Alignment requested for a zero-norm vector."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(ValueError):
    """Invalid experiment configuration. ``key`` holds the dotted key path."""

    def __init__(self, message, key=None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key
