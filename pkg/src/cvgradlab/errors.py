"""Exception hierarchy.

Every error carries a short machine-readable ``code`` (the class name unless
overridden) which the CLI prints as a prefix on the diagnostic stream.
"""


class CVGradLabError(Exception):
    code = "Error"

    def __init__(self, message: str = ""):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return f"{self.code}: {self.message}" if self.message else self.code


class RowNotStochastic(CVGradLabError, ValueError):
    code = "RowNotStochastic"


class BadShape(CVGradLabError, ValueError):
    code = "BadShape"


class BadGamma(CVGradLabError, ValueError):
    code = "BadGamma"


class IndexOutOfRange(CVGradLabError, IndexError):
    code = "IndexOutOfRange"


class DimensionMismatch(CVGradLabError, ValueError):
    code = "DimensionMismatch"


class EmptySequence(CVGradLabError, ValueError):
    code = "EmptySequence"


class BudgetExceeded(CVGradLabError):
    code = "BudgetExceeded"


class DegenerateControl(CVGradLabError, ValueError):
    code = "DegenerateControl"


class LengthMismatch(CVGradLabError, ValueError):
    code = "LengthMismatch"


class SingularGram(CVGradLabError, ValueError):
    code = "SingularGram"


class OracleUnavailable(CVGradLabError):
    code = "OracleUnavailable"


class MissingEstimator(CVGradLabError, KeyError):
    code = "MissingEstimator"


class ParseError(CVGradLabError, ValueError):
    code = "ParseError"


class UnknownKey(CVGradLabError, KeyError):
    code = "UnknownKey"


class ConfigTypeError(CVGradLabError, TypeError):
    code = "TypeError"
