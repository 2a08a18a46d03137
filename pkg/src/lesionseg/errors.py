"""Exception types shared across the package."""


class LesionSegError(Exception):
    """Base class for all package errors."""


class ShapeError(LesionSegError, ValueError):
    pass


class InvalidArgumentError(LesionSegError, ValueError):
    pass


class NumericError(LesionSegError, ArithmeticError):
    """Non-finite values or an ill-conditioned solve."""


class ConfigurationError(LesionSegError, ValueError):
    pass


class ContractError(LesionSegError, RuntimeError):
    """A caller broke a pre-condition that cannot be expressed in types."""


class FormatError(LesionSegError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DataError(LesionSegError, OSError):
    pass
