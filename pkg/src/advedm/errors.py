"""Exception types raised across the package."""


class AdvEDMError(Exception):
    """Base class for package errors."""


class DimensionMismatchError(AdvEDMError, ValueError):
    pass


class EmptyQueryError(AdvEDMError, ValueError):
    pass


class ZeroVectorError(AdvEDMError, ValueError):
    pass


class NotDifferentiableError(AdvEDMError, TypeError):
    pass


class EmptySelectionError(AdvEDMError, ValueError):
    pass


class GeometryError(AdvEDMError, ValueError):
    pass


class CountMismatchError(AdvEDMError, ValueError):
    pass


class NonFiniteLossError(AdvEDMError, FloatingPointError):
    pass


class UndefinedMetricError(AdvEDMError, ValueError):
    pass


class JudgeError(AdvEDMError, RuntimeError):
    """Transport or parse failure in a remote judge."""


class ManifestError(AdvEDMError, ValueError):
    pass
