"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value violates a precondition."""


class StateError(RuntimeError):
    """An object was used in a state that does not permit the call."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class InputError(ValueError):
    """Bad user-supplied data (tokens, labels, target ids, files)."""


class ParseError(InputError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
