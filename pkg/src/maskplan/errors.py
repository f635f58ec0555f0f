"""Exception hierarchy. ``exit_code`` is what the CLI returns for each class."""


class MaskplanError(Exception):
    exit_code = 1


class ValidationError(MaskplanError, ValueError):
    exit_code = 3


class ShapeError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TokenizationError(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass


class IncompleteDecodeError(ValidationError):
    pass


class IntegrityError(MaskplanError):
    exit_code = 4


class FormatError(IntegrityError):
    """Corrupt, truncated, or wrong-version artifact file."""


class NumericError(MaskplanError, ArithmeticError):
    exit_code = 5


class TrainingError(NumericError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)


class SchedulerInvariantError(MaskplanError, AssertionError):
    exit_code = 6
