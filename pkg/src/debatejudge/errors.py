"""Exception hierarchy shared across the package."""

from __future__ import annotations


class DebateJudgeError(Exception):
    """Base class for all package errors."""


class DomainError(DebateJudgeError, ValueError):
    """An argument lies outside the domain of a function."""


class ContractError(DebateJudgeError, ValueError):
    """Inputs are individually valid but inconsistent with each other."""


class InsufficientDataError(DebateJudgeError, ValueError):
    pass


class DegenerateModelError(DebateJudgeError, ArithmeticError):
    pass


class FitError(DebateJudgeError, RuntimeError):
    """The mixture optimizer failed; ``last_valid`` holds the last good parameters."""

    def __init__(self, message: str, last_valid=None):
        super().__init__(message)
        self.last_valid = last_valid


class ExtractionError(DebateJudgeError, ValueError):
    """No legal ``Final Answer:`` judgment could be parsed from a response."""


class AgentFailure(DebateJudgeError, RuntimeError):
    """An agent could not produce a response after exhausting its retries."""


class TemplateError(DebateJudgeError, ValueError):
    pass


class AuthError(DebateJudgeError, PermissionError):
    """Endpoint rejected the credentials; never retried."""


class TransportError(DebateJudgeError, IOError):
    """A retryable transport failure (timeout, 5xx, 429, connection reset)."""


class ConfigError(DebateJudgeError, ValueError):
    pass
