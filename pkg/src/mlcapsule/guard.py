"""Pay-per-query enforcement with rollback protection, plus signed query tickets.

The guard keeps its state (queries used, threshold, version) sealed on the
host and binds it to a monotonic counter kept in a separate file. A query is
committed in this order:

1. load sealed state at version ``v`` and read the counter ``m``;
2. reject ``v < m`` (stale file restored) and ``v > m + 1`` (counter regressed);
   ``v == m + 1`` means a crash hit between steps 5 and 6, so roll forward;
3. refuse when the quota is used up;
4. compute the answer;
5. persist the sealed state with ``counter + 1`` and ``version + 1``;
6. increment the monotonic counter;
7. release the answer.

A posterior only leaves after step 6, so killing the process at any point
never yields an uncharged answer. The committed answer is kept in the sealed
state under the caller's request id: retrying the same request after a crash
returns it again without a second charge.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from . import crypto
from ._framing import Reader, pack_fields
from .errors import (
    BadSignature,
    CounterUnavailable,
    DigestMismatch,
    ParseError,
    QuotaExceeded,
    RollbackDetected,
    TicketReused,
)

STATE_MAGIC = b"MLCG"
STATE_VERSION = 1
COUNTER_MAGIC = b"MLCC"
TICKET_MAGIC = b"MLCT"
_U64 = struct.Struct("<Q")

STATE_FILE = "guard.sealed"
COUNTER_FILE = "counter.mlcc"


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


@dataclass(frozen=True)
class GuardState:
    counter: int = 0
    threshold: int = 0
    version: int = 0
    last_request_id: bytes = b""
    last_output: bytes = b""
    spent: frozenset[bytes] = field(default_factory=frozenset)

    @property
    def remaining(self) -> int:
        return max(0, self.threshold - self.counter)

    def to_bytes(self) -> bytes:
        head = STATE_MAGIC + struct.pack("<HQQQ", STATE_VERSION, self.counter, self.threshold, self.version)
        spent = b"".join(sorted(self.spent))
        return head + pack_fields(self.last_request_id, self.last_output, spent)

    @classmethod
    def from_bytes(cls, data: bytes) -> "GuardState":
        r = Reader(data)
        if r.take(4) != STATE_MAGIC:
            raise ParseError("not a guard state")
        ver, counter, threshold, version = r.unpack("<HQQQ")
        if ver != STATE_VERSION:
            raise ParseError(f"unsupported guard state version {ver}")
        rid, out, spent = r.field(), r.field(), r.field()
        r.expect_end()
        if len(spent) % crypto.DIGEST_SIZE:
            raise ParseError("spent digest list is not a multiple of 32 bytes")
        digests = frozenset(spent[i:i + 32] for i in range(0, len(spent), 32))
        return cls(counter, threshold, version, rid, out, digests)


class MonotonicCounter:
    """File-backed counter standing in for a hardware monotonic counter.

    Layout: ``"MLCC" || u64 value || HMAC-SHA256(key, magic || value)``. A
    missing, truncated or forged file fails closed with CounterUnavailable.
    """

    def __init__(self, path: Path | str, seal_key: crypto.SealKey):
        self.path = Path(path)
        self._key = seal_key.key
        self._lock = threading.Lock()

    def _encode(self, value: int) -> bytes:
        body = COUNTER_MAGIC + _U64.pack(value)
        return body + crypto.mac(self._key, body)

    def create(self, value: int = 0) -> None:
        if self.path.exists():
            raise CounterUnavailable(f"{self.path} already exists")
        _atomic_write(self.path, self._encode(value))

    def read(self) -> int:
        try:
            raw = self.path.read_bytes()
        except OSError as exc:
            raise CounterUnavailable(f"counter unreadable: {exc}") from exc
        if len(raw) != 44 or raw[:4] != COUNTER_MAGIC or not crypto.mac_ok(self._key, raw[:12], raw[12:]):
            raise CounterUnavailable(f"{self.path} is not a valid counter for this capsule")
        return _U64.unpack(raw[4:12])[0]

    def increment(self) -> int:
        with self._lock:
            value = self.read() + 1
            _atomic_write(self.path, self._encode(value))
            return value


class Crash(BaseException):
    """Injected process death; deliberately not an Exception subclass."""


CRASH_POINTS = ("before_persist", "after_persist", "after_increment")


class Guard:
    """Sealed query counter for one capsule identity, stored in ``directory``."""

    def __init__(self, directory: Path | str, seal_key: crypto.SealKey,
                 crash: Callable[[str], None] | None = None):
        self.dir = Path(directory)
        self._key = seal_key
        self.counter = MonotonicCounter(self.dir / COUNTER_FILE, seal_key)
        self._crash = crash or (lambda point: None)
        self._lock = threading.Lock()

    @property
    def state_path(self) -> Path:
        return self.dir / STATE_FILE

    @classmethod
    def create(cls, directory: Path | str, seal_key: crypto.SealKey, threshold: int, **kw) -> "Guard":
        g = cls(directory, seal_key, **kw)
        g.dir.mkdir(parents=True, exist_ok=True)
        g.counter.create(0)
        g._persist(GuardState(threshold=threshold))
        return g

    def _persist(self, state: GuardState) -> None:
        blob = crypto.seal(self._key, self._key.measurement, state.to_bytes())
        _atomic_write(self.state_path, blob)

    def load(self) -> GuardState:
        """Unseal the state and reconcile it with the monotonic counter."""
        m = self.counter.read()
        try:
            blob = self.state_path.read_bytes()
        except OSError as exc:
            raise CounterUnavailable(f"guard state unreadable: {exc}") from exc
        state = GuardState.from_bytes(crypto.unseal(self._key, self._key.measurement, blob))
        if state.version < m:
            raise RollbackDetected(f"sealed state version {state.version} behind counter {m}")
        if state.version > m + 1:
            raise RollbackDetected(f"counter {m} behind sealed state version {state.version}")
        if state.version == m + 1:
            self.counter.increment()
        return state

    def status(self) -> GuardState:
        with self._lock:
            return self.load()

    def _commit(self, state: GuardState, request_id: bytes, compute: Callable[[], bytes],
                spend: bytes | None = None) -> bytes:
        if state.counter >= state.threshold:
            raise QuotaExceeded(f"query quota of {state.threshold} used up")
        out = bytes(compute())
        spent = state.spent | {spend} if spend is not None else state.spent
        new = replace(state, counter=state.counter + 1, version=state.version + 1,
                      last_request_id=request_id, last_output=out, spent=spent)
        self._crash("before_persist")
        self._persist(new)
        self._crash("after_persist")
        self.counter.increment()
        self._crash("after_increment")
        return out

    def admit(self, compute: Callable[[], bytes], request_id: bytes = b"") -> bytes:
        """Charge one query and return ``compute()``; see the module docstring."""
        with self._lock:
            state = self.load()
            if request_id and request_id == state.last_request_id:
                return state.last_output
            return self._commit(state, request_id, compute)

    def admit_ticket(self, sp_pk: bytes, ticket: "QueryTicket", query: bytes,
                     compute: Callable[[], bytes]) -> bytes:
        """Ticket mode: one answer per SP-signed query digest, tracked in sealed state."""
        with self._lock:
            state = self.load()
            check_ticket(sp_pk, ticket, query)
            if ticket.query_digest == state.last_request_id:
                return state.last_output
            if ticket.query_digest in state.spent:
                raise TicketReused("ticket already redeemed")
            # tickets are prepaid, so the quota is the ticket itself
            state = replace(state, threshold=max(state.threshold, state.counter + 1))
            return self._commit(state, ticket.query_digest, compute, spend=ticket.query_digest)


# -- fine-grained signed queries --------------------------------------------------

@dataclass(frozen=True)
class QueryTicket:
    query_digest: bytes
    sp_signature: bytes

    def to_bytes(self) -> bytes:
        return TICKET_MAGIC + pack_fields(self.query_digest, self.sp_signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "QueryTicket":
        r = Reader(data)
        if r.take(4) != TICKET_MAGIC:
            raise ParseError("not a query ticket")
        t = cls(r.field(), r.field())
        r.expect_end()
        return t


def issue_ticket(sp_signing_key: bytes, query: bytes) -> QueryTicket:
    d = crypto.digest(query)
    return QueryTicket(d, crypto.sign(sp_signing_key, d))


def check_ticket(sp_pk: bytes, ticket: QueryTicket, query: bytes) -> None:
    if crypto.verify(sp_pk, ticket.query_digest, ticket.sp_signature) != 1:
        raise BadSignature("ticket signature does not verify")
    if crypto.digest(query) != ticket.query_digest:
        raise DigestMismatch("ticket was issued for a different query")


class SpentSet:
    """Thread-safe set of redeemed digests; the first redeemer wins."""

    def __init__(self):
        self._seen: set[bytes] = set()
        self._lock = threading.Lock()

    def add(self, d: bytes) -> bool:
        with self._lock:
            if d in self._seen:
                return False
            self._seen.add(d)
            return True

    def __contains__(self, d: bytes) -> bool:
        return d in self._seen

    def __len__(self) -> int:
        return len(self._seen)


def redeem_ticket(sp_pk: bytes, ticket: QueryTicket, query: bytes, spent: SpentSet) -> bool:
    check_ticket(sp_pk, ticket, query)
    if not spent.add(ticket.query_digest):
        raise TicketReused("ticket already redeemed")
    return True
