"""Exception hierarchy shared by every impactx module."""


class ImpactxError(Exception):
    """Base class for all library errors."""


class DimensionError(ImpactxError, ValueError):
    pass


class LabelError(ImpactxError, ValueError):
    pass


class ConfigError(ImpactxError, ValueError):
    pass


class DataError(ImpactxError, ValueError):
    pass


class FormatError(DataError):
    pass


class CompatibilityError(ImpactxError, ValueError):
    pass


class SizeError(ImpactxError, ValueError):
    pass


class NumericError(ImpactxError, ArithmeticError):
    pass


class StateError(ImpactxError, RuntimeError):
    pass


class StaleTapeError(StateError):
    pass
