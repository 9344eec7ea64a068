"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for usage and
validation problems, 3 for transport, 4 for the LLM gateway.
"""

from __future__ import annotations


class TraceLLMError(Exception):
    exit_code = 1


class ValidationError(TraceLLMError, ValueError):
    exit_code = 2


class ContractViolation(ValidationError):
    """A caller broke an operation's precondition (wrong dimension, foreign path, ...)."""


class ParseError(ValidationError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TrainingError(ValidationError):
    pass


class ScopeError(ValidationError):
    pass


class NotFoundError(TraceLLMError, LookupError):
    exit_code = 2


class TransportError(TraceLLMError):
    """Network-class failure. Only these are retried."""

    exit_code = 3


class RateLimitError(TransportError):
    pass


class DecodeError(TraceLLMError):
    """The node or explorer answered, but with something we cannot parse."""

    exit_code = 3


class RpcError(TraceLLMError):
    """JSON-RPC error object returned by the node."""

    exit_code = 3

    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(f"rpc error {code}: {message}")


class DecompileError(TraceLLMError):
    pass


class GatewayError(TraceLLMError):
    exit_code = 4

    def __init__(self, message: str, prompt: str | None = None):
        self.prompt = prompt
        super().__init__(message)
