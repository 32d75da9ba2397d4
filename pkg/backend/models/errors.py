"""
Error hierarchy shared by every service.
The CLI maps these onto exit codes (1 for rejected input / validation, 2 for numeric failure).
"""

from typing import Optional


class TGRError(Exception):
    """Base class for pipeline errors"""


class RejectedInputError(TGRError, ValueError):
    """An operation was called outside its contract (shape, range, length...)"""


class InsufficientBankError(RejectedInputError):
    """The memory bank cannot supply a legal replay episode yet"""


class NumericFailureError(TGRError, RuntimeError):
    """A loss or gradient became non-finite."""

    def __init__(self, message: str, term: Optional[str] = None):
        self.term = term
        super().__init__(f"{message} (term: {term})" if term else message)


class ConfigValidationError(TGRError, ValueError):
    """Bad run config or missing upstream artifact. `stage` names what to run first."""

    def __init__(self, message: str, stage: Optional[str] = None):
        self.stage = stage
        super().__init__(message)
