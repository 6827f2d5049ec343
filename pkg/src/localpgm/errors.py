"""Exception types raised across the package."""


class InvalidCliqueError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


class TableTooLargeError(MemoryError):
    """The full contingency table exceeds the configured cell limit."""


class InvalidDistributionError(ValueError):
    pass


class IncompleteVectorError(LookupError):
    pass


class InvalidCountingNumbersError(ValueError):
    pass


class UnsupportedCliqueError(ValueError):
    """A measured clique is not contained in any region-graph vertex."""


class StepSizeTooLargeError(ArithmeticError):
    """Prox-PGM loss grew past the divergence guard."""
