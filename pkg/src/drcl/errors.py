"""Exception hierarchy shared by every drcl module."""


class DRCLError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DRCLError, ValueError):
    """Invalid configuration or hyperparameter."""


class DataError(DRCLError, ValueError):
    """Malformed or empty data (bad labels, empty datasets)."""


class NumericalError(DRCLError, ArithmeticError):
    """Non-finite values encountered during computation.

    Attributes:
        layer (int or None): index of the layer that produced the value, when known.
    """

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class DivergenceError(NumericalError):
    """The splitting iteration blew up.

    Attributes:
        iteration (int): solver iteration at which divergence was detected.
    """

    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration


class StateError(DRCLError, ValueError):
    """A metric or operation was requested on incompletely populated state."""


class UndefinedMetricError(DRCLError, ValueError):
    """Metric is undefined for the given input (e.g. forgetting with one task)."""


class FormatError(DRCLError, ValueError):
    """A file on disk does not follow the expected binary layout."""


class TruncatedFileError(FormatError):
    """File ended before the declared payload was read."""

    def __init__(self, message, expected, actual):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class CheckpointVersionError(FormatError):
    """Checkpoint written by an unsupported container version."""


class CheckpointHashError(FormatError):
    """Checkpoint payload or config hash does not match."""
