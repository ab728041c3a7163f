"""Exception hierarchy.

Every error carries a stable numeric ``code``. The CLI uses it as the process
exit status and the provisioning protocol uses it in Error frames, so the
values below are part of the public interface and must not be renumbered.
"""

from __future__ import annotations


class CapsuleError(Exception):
    code = 1


# -- data plane ---------------------------------------------------------------
class ShapeMismatch(CapsuleError, ValueError):
    code = 10


class SchemaError(CapsuleError, ValueError):
    code = 11


class ParseError(CapsuleError, ValueError):
    code = 12


class DivergenceError(CapsuleError, ArithmeticError):
    code = 13


# -- crypto / sealing -----------------------------------------------------------
class IntegrityFailure(CapsuleError):
    code = 20


class IdentityMismatch(IntegrityFailure):
    code = 21


class TruncatedBlob(IntegrityFailure):
    code = 22


class ChunkOutOfOrder(IntegrityFailure):
    code = 23


class MemoryBudgetExceeded(CapsuleError):
    code = 24


# -- simulated hardware ---------------------------------------------------------------
class HandleNotFound(CapsuleError, KeyError):
    code = 30

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class ProgramError(CapsuleError):
    """A program step failed; ``payload`` is the exception the program raised."""

    code = 31

    def __init__(self, payload: BaseException):
        super().__init__(f"program failed: {type(payload).__name__}: {payload}")
        self.payload = payload


class MalformedProgram(CapsuleError, TypeError):
    code = 32


# -- protocol ---------------------------------------------------------------------
class QuoteInvalid(CapsuleError):
    code = 40


class TagMismatch(CapsuleError):
    code = 41


class NoKey(CapsuleError):
    code = 42


class UnknownCommand(CapsuleError):
    code = 43


class ProtocolError(CapsuleError):
    code = 44


class FrameTooLarge(ProtocolError):
    code = 45


class TransportError(CapsuleError, OSError):
    code = 46


class QueryBudgetExhausted(CapsuleError):
    code = 47


# -- access guard -----------------------------------------------------------------
class QuotaExceeded(CapsuleError):
    code = 50


class RollbackDetected(CapsuleError):
    code = 51


class CounterUnavailable(CapsuleError):
    code = 52


class BadSignature(CapsuleError):
    code = 53


class TicketReused(CapsuleError):
    code = 54


class DigestMismatch(CapsuleError):
    code = 55


# -- defenses ---------------------------------------------------------------------
class Detected(CapsuleError):
    """The reverse-engineering detector classified the query as crafted."""

    code = 60


class StealingDetected(CapsuleError):
    code = 61


class ConfigError(CapsuleError, ValueError):
    code = 3


def all_errors() -> list[type[CapsuleError]]:
    """Every concrete error class, ordered by code."""
    seen: dict[int, type[CapsuleError]] = {}
    stack = [CapsuleError]
    while stack:
        cls = stack.pop()
        seen.setdefault(cls.code, cls)
        stack.extend(cls.__subclasses__())
    return [seen[k] for k in sorted(seen)]


def by_code(code: int) -> type[CapsuleError]:
    for cls in all_errors():
        if cls.code == code:
            return cls
    return CapsuleError
