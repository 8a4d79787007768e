class RetrievalError(Exception):
    """Base error. `exit_code` is what the CLI returns when this escapes."""
    exit_code = 2


class ConfigError(RetrievalError, ValueError):
    exit_code = 1


class DimensionError(RetrievalError, ValueError):
    pass


class ContractError(RetrievalError, ValueError):
    pass


class GroundTruthError(RetrievalError, ValueError):
    pass


class EmptyEvaluationError(RetrievalError, ValueError):
    pass


class FormatError(RetrievalError, ValueError):
    def __init__(self, field: str, offset: int, expected: object = None, actual: object = None):
        self.field = field
        self.offset = offset
        self.expected = expected
        self.actual = actual
        msg = f"{field} at byte {offset}"
        if expected is not None or actual is not None:
            msg += f": expected {expected}, got {actual}"
        super().__init__(msg)


class NumericalError(RetrievalError, ArithmeticError):
    exit_code = 3
