"""Exception hierarchy shared by every module.

Each error carries a stable machine-readable ``code`` that the command line
front end writes into its JSON error payload.
"""

from __future__ import annotations


class SourceBiasError(Exception):
    """Base class for data and estimation failures (CLI exit code 2)."""

    code = "error"

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self) -> dict:
        out = {"error": self.code, "message": str(self)}
        out.update(self.details)
        return out


class ParseError(SourceBiasError):
    code = "parse_error"


class ValidationError(SourceBiasError):
    code = "validation_error"


class DuplicateKeyError(ValidationError):
    code = "duplicate_key"


class InsufficientDataError(SourceBiasError):
    code = "insufficient_data"


class WeakInstrumentError(SourceBiasError):
    """The instrument takes a single value, so no first stage exists."""

    code = "weak_instrument"


class DegenerateInstrumentError(SourceBiasError):
    """Both instrument groups share the same mean perplexity."""

    code = "degenerate_instrument"


class SingularDesignError(SourceBiasError):
    code = "singular_design"


class UndefinedCorrelationError(SourceBiasError):
    code = "undefined_correlation"


class DegenerateTestError(SourceBiasError):
    code = "degenerate_test"


class UndefinedDeltaError(SourceBiasError):
    code = "undefined_delta"


class MissingValueError(SourceBiasError):
    code = "missing_value"


class RunMismatchError(SourceBiasError):
    code = "run_mismatch"


class DomainError(SourceBiasError):
    code = "domain_error"


class AssumptionViolation(SourceBiasError):
    code = "assumption_violation"


class WeakInstrumentWarning(UserWarning):
    """First-stage |t| below 2; the estimate is still returned."""
