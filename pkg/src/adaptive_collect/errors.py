"""Exception types shared across the package."""


class CollectError(Exception):
    """Base class for every error raised by this package."""


class ParseError(CollectError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StructuralError(CollectError, ValueError):
    pass


class DimensionError(CollectError, ValueError):
    pass


class DegenerateScaleError(CollectError, ValueError):
    pass


class UndefinedMetricError(CollectError, ValueError):
    pass


class AssemblyError(CollectError, ValueError):
    pass


class UsageError(CollectError, RuntimeError):
    pass


class NumericalError(CollectError, ArithmeticError):
    pass


class ConfigError(CollectError, ValueError):
    pass
