"""Exception taxonomy shared across the package.

The split mirrors how failures are reported downstream: usage and data-schema
problems are caller mistakes, domain errors are invalid numeric inputs, and
numeric errors are runtime failures of a well-posed computation (non-positive
definite assemblies, impossible conditioning events). The CLI maps these onto
distinct exit codes.
"""


class JointModelError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(JointModelError, ValueError):
    """The caller violated an API contract (shapes, layouts, invalid options)."""


class DataError(UsageError):
    """A dataset or config file violates the documented schema."""


class DomainError(JointModelError, ValueError):
    """A numeric argument lies outside the mathematical domain of an operation."""


class NumericError(JointModelError, RuntimeError):
    """A numerically degenerate state was reached (e.g. a non-PD correlation
    assembly). Carries enough context to identify the offending subject."""

    def __init__(self, message, subject_id=None):
        if subject_id is not None:
            message = f"{message} (subject id={subject_id!r})"
        super().__init__(message)
        self.subject_id = subject_id
