"""Exception hierarchy shared by all modules."""


class QksTtnError(Exception):
    """Base class for errors raised by this package."""


class DomainError(QksTtnError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ParameterShapeError(QksTtnError, ValueError):
    """Parameter array with the wrong shape."""


class ConfigError(QksTtnError, ValueError):
    """Invalid configuration, detected before any compute."""


class BatchCompositionError(QksTtnError, ValueError):
    """A batch lacks an example of some class required by the objective."""


class CapacityError(QksTtnError, ValueError):
    """Problem too large for the dense reference simulator."""


class IngestionError(QksTtnError, ValueError):
    """Malformed or inconsistent dataset files."""


class SamplingError(QksTtnError, ValueError):
    """Subsampling would drop a class."""


class FitDomainError(QksTtnError, ValueError):
    """Data outside the domain of a curve fit."""


class DivergenceError(QksTtnError, RuntimeError):
    """Training produced a non-finite objective."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
