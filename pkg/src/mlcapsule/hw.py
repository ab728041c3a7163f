"""Software simulation of attested-execution hardware.

A :class:`Hardware` instance owns a quote-signing key and a table of loaded
enclaves. Programs only see their own state and an :class:`EnclaveContext`
that hands out coins, the enclave's seal key and the platform's untrusted
storage, which is all a real enclave could reach.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Protocol

from . import crypto
from ._framing import Reader, pack_fields
from .errors import ConfigError, HandleNotFound, MalformedProgram, ParseError, ProgramError

HANDLE_SIZE = 16
PARAMS_MAGIC = b"MLCP"
QUOTE_MAGIC = b"MLCQ"


@dataclass(frozen=True)
class HwParams:
    verification_key: bytes
    scheme_id: str = crypto.SIG_SCHEME

    def to_bytes(self) -> bytes:
        return PARAMS_MAGIC + pack_fields(self.scheme_id.encode(), self.verification_key)

    @classmethod
    def read(cls, r: Reader) -> "HwParams":
        if r.take(4) != PARAMS_MAGIC:
            raise ParseError("not serialized HwParams")
        scheme = r.field().decode("utf-8", "replace")
        vk = r.field()
        if scheme != crypto.SIG_SCHEME or len(vk) != 32:
            raise ParseError(f"unsupported verification key ({scheme}, {len(vk)} bytes)")
        return cls(vk, scheme)

    @classmethod
    def from_bytes(cls, data: bytes) -> "HwParams":
        r = Reader(data)
        p = cls.read(r)
        r.expect_end()
        return p


@dataclass(frozen=True)
class EnclaveHandle:
    id: bytes


class Program(Protocol):
    """Anything with canonical ``code_bytes`` and a ``step`` transition."""

    code_bytes: bytes

    def step(self, state: Any, input: bytes, ctx: "EnclaveContext") -> tuple[Any, bytes]: ...


@dataclass
class FunctionProgram:
    """Adapter turning a plain function into a :class:`Program`."""

    code_bytes: bytes
    fn: Callable[[Any, bytes, "EnclaveContext"], tuple[Any, bytes]]

    def step(self, state, input, ctx):
        return self.fn(state, input, ctx)


@dataclass
class EnclaveRecord:
    program: Program
    measurement: bytes
    state: Any = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


class EnclaveContext:
    """Capabilities available to a program while it runs."""

    def __init__(self, hw: "Hardware", measurement: bytes):
        self._hw = hw
        self.measurement = measurement

    def coins(self, n: int) -> bytes:
        return self._hw._coins(n)

    @property
    def platform(self) -> crypto.Platform:
        return self._hw.platform

    def seal_key(self) -> crypto.SealKey:
        return self._hw.platform.seal_key(self.measurement)


@dataclass(frozen=True)
class Quote:
    md_hdl: bytes
    tag_q: bytes
    input: bytes
    output: bytes
    sigma: bytes

    def signed_tuple(self) -> tuple[bytes, bytes, bytes, bytes]:
        return (self.md_hdl, self.tag_q, self.input, self.output)

    def to_bytes(self) -> bytes:
        return QUOTE_MAGIC + pack_fields(*self.signed_tuple(), self.sigma)

    @classmethod
    def read(cls, r: Reader) -> "Quote":
        if r.take(4) != QUOTE_MAGIC:
            raise ParseError("not a serialized quote")
        return cls(r.field(), r.field(), r.field(), r.field(), r.field())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Quote":
        r = Reader(data)
        q = cls.read(r)
        r.expect_end()
        return q

    @property
    def measurement(self) -> bytes:
        return self.md_hdl[:crypto.DIGEST_SIZE]


def canonical_quote_bytes(md_hdl: bytes, tag_q: bytes, input: bytes, output: bytes) -> bytes:
    return pack_fields(md_hdl, tag_q, input, output)


def program_tag(program: Program) -> bytes:
    return crypto.digest(program.code_bytes)


class Hardware:
    """One simulated platform: signing key, enclave table, seal-key root."""

    def __init__(self, security_level: int = 128, *, platform: crypto.Platform | None = None,
                 coins: Callable[[int], bytes] | None = None, aux: bytes = b""):
        if security_level != 128:
            raise ConfigError(f"unsupported security level {security_level}")
        self._sk_quote, vk = crypto.sig_keygen()
        self.params = HwParams(vk)
        self.platform = platform or crypto.Platform()
        self._coins = coins or os.urandom
        self._table: dict[bytes, EnclaveRecord] = {}
        self._table_lock = threading.Lock()

    def load(self, params: HwParams, program: Program) -> EnclaveHandle:
        if params != self.params:
            raise ConfigError("params belong to a different hardware instance")
        code = getattr(program, "code_bytes", None)
        if not isinstance(code, (bytes, bytearray)) or not callable(getattr(program, "step", None)):
            raise MalformedProgram("program needs bytes code_bytes and a callable step")
        record = EnclaveRecord(program, crypto.digest(bytes(code)))
        with self._table_lock:
            hid = os.urandom(HANDLE_SIZE)
            while hid in self._table:
                hid = os.urandom(HANDLE_SIZE)
            self._table[hid] = record
        return EnclaveHandle(hid)

    def _record(self, hdl: EnclaveHandle) -> EnclaveRecord:
        try:
            return self._table[hdl.id]
        except (KeyError, AttributeError):
            raise HandleNotFound(f"no enclave with handle {getattr(hdl, 'id', hdl)!r}") from None

    def _execute(self, hdl: EnclaveHandle, input: bytes) -> tuple[EnclaveRecord, bytes]:
        rec = self._record(hdl)
        with rec.lock:
            ctx = EnclaveContext(self, rec.measurement)
            try:
                state, out = rec.program.step(rec.state, bytes(input), ctx)
            except Exception as exc:
                raise ProgramError(exc) from exc
            rec.state = state
        return rec, bytes(out)

    def run(self, hdl: EnclaveHandle, input: bytes) -> bytes:
        return self._execute(hdl, input)[1]

    def run_quote(self, hdl: EnclaveHandle, input: bytes) -> Quote:
        rec, out = self._execute(hdl, input)
        md_hdl = rec.measurement + hdl.id
        body = canonical_quote_bytes(md_hdl, rec.measurement, bytes(input), out)
        sigma = crypto.sign(self._sk_quote, crypto.digest(body))
        return Quote(md_hdl, rec.measurement, bytes(input), out, sigma)

    def measurement(self, hdl: EnclaveHandle) -> bytes:
        return self._record(hdl).measurement

    def __len__(self) -> int:
        return len(self._table)


def hw_setup(security_level: int = 128, aux: bytes = b"", **kwargs) -> tuple[HwParams, Hardware]:
    hw = Hardware(security_level, aux=aux, **kwargs)
    return hw.params, hw


def hw_load(hw: Hardware, params: HwParams, program: Program) -> EnclaveHandle:
    return hw.load(params, program)


def hw_run(hw: Hardware, hdl: EnclaveHandle, input: bytes) -> bytes:
    return hw.run(hdl, input)


def hw_run_quote(hw: Hardware, hdl: EnclaveHandle, input: bytes) -> Quote:
    return hw.run_quote(hdl, input)


def quote_verify(params: HwParams, quote: Quote | bytes) -> int:
    """1 iff the quote's signature is valid under ``params``; never raises."""
    try:
        if not isinstance(quote, Quote):
            quote = Quote.from_bytes(quote)
        body = canonical_quote_bytes(*quote.signed_tuple())
        return crypto.verify(params.verification_key, crypto.digest(body), quote.sigma)
    except Exception:
        return 0


# -- remote-attestation unforgeability game ---------------------------------------

class QuoteOracle:
    """Public API handed to a forging adversary; records every RunQuote."""

    def __init__(self, hw: Hardware):
        self._hw = hw
        self.params = hw.params
        self.query: set[tuple[bytes, bytes, bytes, bytes]] = set()
        self.honest: list[Quote] = []

    def load(self, program: Program) -> EnclaveHandle:
        return self._hw.load(self.params, program)

    def run(self, hdl: EnclaveHandle, input: bytes) -> bytes:
        return self._hw.run(hdl, input)

    def run_quote(self, hdl: EnclaveHandle, input: bytes) -> Quote:
        q = self._hw.run_quote(hdl, input)
        self.query.add(q.signed_tuple())
        self.honest.append(q)
        return q


Adversary = Callable[[QuoteOracle, int], "Quote | bytes | None"]


@dataclass
class GameResult:
    attempts: int
    accepted: int  # forgeries: verify == 1 and tuple not queried
    replays: int  # verify == 1 but tuple was queried
    honest_failures: int  # honest quotes that did not verify


def unforgeability_game(attempts: int, adversary: Adversary, aux: bytes = b"") -> GameResult:
    params, hw = hw_setup(128, aux=aux)
    oracle = QuoteOracle(hw)
    accepted = replays = 0
    for i in range(attempts):
        candidate = adversary(oracle, i)
        if candidate is None or not quote_verify(params, candidate):
            continue
        if not isinstance(candidate, Quote):
            candidate = Quote.from_bytes(candidate)
        if candidate.signed_tuple() in oracle.query:
            replays += 1
        else:
            accepted += 1
    honest_failures = sum(1 - quote_verify(params, q) for q in oracle.honest)
    return GameResult(attempts, accepted, replays, honest_failures)


ECHO = FunctionProgram(b"mlcapsule/echo/v1", lambda s, x, ctx: (s, x))


class RandomForger:
    """Emits well-formed quotes with random fields and a random signature,
    and every few attempts a raw random byte string."""

    def __init__(self, rng):
        self.rng = rng

    def __call__(self, oracle: QuoteOracle, i: int):
        rb = self.rng.randbytes
        if i % 10 == 9:
            return rb(self.rng.randrange(0, 256))
        return Quote(rb(48), rb(32), rb(self.rng.randrange(0, 64)), rb(self.rng.randrange(0, 64)), rb(64))


class ReplayAdversary:
    """Obtains one honest quote per attempt and submits it unchanged."""

    def __init__(self, program: Program = ECHO):
        self.program = program
        self._hdl: EnclaveHandle | None = None

    def __call__(self, oracle: QuoteOracle, i: int):
        if self._hdl is None:
            self._hdl = oracle.load(self.program)
        return oracle.run_quote(self._hdl, i.to_bytes(8, "little"))


class MauledForger:
    """Takes an honest quote and rewrites one signed field, keeping sigma."""

    def __init__(self, rng, program: Program = ECHO):
        self.rng = rng
        self.program = program
        self._hdl: EnclaveHandle | None = None

    def __call__(self, oracle: QuoteOracle, i: int):
        if self._hdl is None:
            self._hdl = oracle.load(self.program)
        q = oracle.run_quote(self._hdl, self.rng.randbytes(16))
        fields = list(q.signed_tuple())
        k = i % 4
        fields[k] = self.rng.randbytes(len(fields[k]) or 1)
        return Quote(*fields, q.sigma)


def honest_quotes(oracle: QuoteOracle, program: Program, inputs: Iterable[bytes]) -> list[Quote]:
    hdl = oracle.load(program)
    return [oracle.run_quote(hdl, x) for x in inputs]
