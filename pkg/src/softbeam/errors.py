"""Exception hierarchy.

Every error carries a short machine-parsable ``category`` that the CLI prints
on failure.
"""


class SoftBeamError(Exception):
    category = "error"


class ShapeError(SoftBeamError, ValueError):
    category = "dimension"


class NumericError(SoftBeamError, ArithmeticError):
    category = "numeric"


class GraphError(SoftBeamError, RuntimeError):
    category = "contract"


class ContractError(SoftBeamError, ValueError):
    category = "contract"


class InputError(SoftBeamError, ValueError):
    category = "input"


class VocabularyError(SoftBeamError, KeyError):
    category = "vocabulary"

    def __str__(self):
        return Exception.__str__(self)


class ParseError(SoftBeamError, ValueError):
    category = "parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(SoftBeamError, ValueError):
    category = "config"


class CheckpointError(SoftBeamError, ValueError):
    category = "checkpoint"


class DivergenceError(SoftBeamError, FloatingPointError):
    category = "divergence"
