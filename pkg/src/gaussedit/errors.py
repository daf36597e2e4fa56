"""Exception hierarchy shared across the editing pipeline.

Exit-code mapping for the CLI lives in cli.py: validation-type errors map to 2,
service errors to 3, numerical errors to 4.
"""


class GaussEditError(Exception):
    """Base class for all package errors."""


class ValidationError(GaussEditError):
    """Bad user input: config values, prompts, shapes, missing captions."""


class InvalidParameterError(ValidationError):
    """Non-finite or out-of-domain numeric parameter."""


class FormatError(ValidationError):
    """A file does not follow the expected on-disk layout."""


class PreconditionError(ValidationError):
    """A pipeline stage is missing its prerequisite artifacts."""

    def __init__(self, missing_stage: str, message: str | None = None):
        self.missing_stage = missing_stage
        super().__init__(message or f"missing prerequisite stage: {missing_stage}")


class ContractViolationError(GaussEditError):
    """An internal calling contract was broken (debug-mode checks)."""


class NumericalError(GaussEditError):
    """Numerical degeneracy or non-finite values in computation."""


class NumericalDegeneracyError(NumericalError):
    """A matrix stayed singular after regularization."""


class GradientPropagationError(NumericalError):
    """Non-finite upstream gradient fed into the backward pass."""


class ServiceError(GaussEditError):
    """Guidance service failure.

    retryable=True marks transport-level failures worth retrying; protocol and
    model-reported errors are permanent for the current request.
    """

    def __init__(self, message: str, retryable: bool = False):
        self.retryable = retryable
        super().__init__(message)


class ProtocolError(ServiceError):
    """Malformed response from the guidance service."""

    def __init__(self, message: str):
        super().__init__(message, retryable=False)
