"""Exception hierarchy shared by every qvote module."""

from __future__ import annotations


class QVoteError(Exception):
    """Base class for all qvote failures."""


class InvalidArgument(QVoteError, ValueError):
    pass


class InvalidKey(QVoteError, ValueError):
    pass


class KeyTooShort(QVoteError):
    """Sifted material cannot cover the requested key lengths."""

    def __init__(self, available: int, required: int) -> None:
        super().__init__(f"sifted key has {available} bits, {required} required")
        self.available = available
        self.required = required


class KeyReuseError(QVoteError):
    """A single-use key was offered for a second encryption."""


class InvalidReceipt(QVoteError, ValueError):
    pass


class QasmParseError(QVoteError):
    """Raised for documents outside the preparation-only QASM subset.

    ``kind`` is one of ``header``, ``undeclared-register``, ``out-of-range``,
    ``unsupported-statement``, ``gate-order`` or ``syntax``.
    """

    def __init__(self, kind: str, message: str, line: int | None = None) -> None:
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{kind}: {message}")
        self.kind = kind
        self.line = line


class ChannelError(QVoteError):
    def __init__(self, message: str, retry_after: float | None = None) -> None:
        super().__init__(message)
        self.retry_after = retry_after


class PayloadTooLarge(QVoteError):
    pass


class SessionFailed(QVoteError):
    """QKD attempt cap exhausted without a confirmed key."""

    def __init__(self, attempts: int, reasons: list[str]) -> None:
        super().__init__(f"QKD failed after {attempts} attempt(s): {', '.join(reasons)}")
        self.attempts = attempts
        self.reasons = reasons


class LedgerError(QVoteError):
    pass


class NotFound(QVoteError, LookupError):
    pass


class BadKey(InvalidKey):
    """A revealed identity key does not fit the sealed ciphertext."""
