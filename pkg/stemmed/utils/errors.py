class StemmedError(Exception):
    """Base class for every error raised by the engine."""


class InvalidInputError(StemmedError, ValueError):
    pass


class OverflowGuardError(StemmedError, ArithmeticError):
    """An exponent argument left the [-700, 700] window."""


class NumericDegenerateError(StemmedError, ArithmeticError):
    """The intensity vanished at an observed event time."""


class InvalidInitError(InvalidInputError):
    pass


class MalformedFileError(InvalidInputError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")
