"""Exception types raised across the package."""


class CsaError(Exception):
    """Base class for all package errors."""


class ShapeError(CsaError, ValueError):
    """Operand shapes do not conform."""


class EmptyReductionError(CsaError, ValueError):
    """Reduction over an axis of extent zero."""


class NonFiniteError(CsaError, FloatingPointError):
    """A forward op produced NaN or inf from finite inputs."""


class ContractError(CsaError, RuntimeError):
    """A caller violated an operation's precondition."""


class ConfigurationError(CsaError, ValueError):
    """Invalid model or experiment configuration."""


class LabelError(CsaError, ValueError):
    """Class label outside ``[0, C)``."""


class BatchStatisticsError(CsaError, ValueError):
    """Too few values to compute batch-norm statistics."""


class UnseenClassError(CsaError, RuntimeError):
    """Global attention is unusable because a class was never trained on."""


class UnsupportedVariantError(CsaError, ValueError):
    """Operation not available for the given model variant."""


class TsFormatError(CsaError, ValueError):
    """Malformed time-series file."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class UnequalLengthError(TsFormatError):
    """Series of unequal length (not supported)."""


class VocabularyError(TsFormatError):
    """Label not in the declared class vocabulary."""


class EmptyEpochError(CsaError, ValueError):
    """Batch plan yields no batches."""


class UndefinedImprovementError(CsaError, ZeroDivisionError):
    """Accuracy improvement relative to a zero baseline."""


class DegenerateTableError(CsaError, ValueError):
    """Contingency table with a zero marginal."""
