"""Train / Obtain / Provide / Classify, plus the offline sealed path.

The client runs :func:`obtain` to set up an enclave and produce an attested
request; the service provider answers with :func:`provide`; from then on the
client classifies locally with :func:`classify` (decrypting on every call) or
installs the model once with :func:`install` and uses :func:`classify_sealed`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .. import crypto, hw
from .._framing import Reader, pack_fields, unpack_fields
from ..errors import CapsuleError, ParseError, ProgramError, QuoteInvalid, TagMismatch
from ..nn.model import ModelDef, ModelSecrets
from ..nn.train import train_toy
from .program import (
    DefenseConfig,
    ProgramQ,
    decode_posterior,
    encode_command,
    encode_tensor,
)

HIDDEN_MAGIC = b"MLCH"
SETUP_INPUT = encode_command("setup")


@dataclass(frozen=True)
class ModelRequest:
    hw_params: hw.HwParams
    setup_quote: hw.Quote

    def to_bytes(self) -> bytes:
        return self.hw_params.to_bytes() + self.setup_quote.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelRequest":
        r = Reader(data)
        req = cls(hw.HwParams.read(r), hw.Quote.read(r))
        r.expect_end()
        return req


@dataclass(frozen=True)
class HiddenModel:
    model_def: ModelDef
    c: crypto.Ciphertext

    def to_bytes(self) -> bytes:
        return HIDDEN_MAGIC + pack_fields(self.model_def.to_bytes(), self.c.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "HiddenModel":
        if data[:4] != HIDDEN_MAGIC:
            raise ParseError("not a hidden model")
        d, c = unpack_fields(data[4:], 2)
        return cls(ModelDef.from_json(d), crypto.Ciphertext.from_bytes(c))


@dataclass
class ClientSession:
    hardware: hw.Hardware
    handle: hw.EnclaveHandle
    program: ProgramQ

    @property
    def params(self) -> hw.HwParams:
        return self.hardware.params

    def run(self, payload: bytes) -> bytes:
        """Run Program Q, surfacing the program's own error instead of the wrapper."""
        try:
            return self.hardware.run(self.handle, payload)
        except ProgramError as exc:
            if isinstance(exc.payload, CapsuleError):
                raise exc.payload from None
            raise


def train(X, y, model_def: ModelDef, **kw) -> tuple[ModelDef, ModelSecrets]:
    """Service-provider training; returns the public definition and secret weights."""
    return model_def, train_toy(X, y, model_def, **kw)


def enclave_train(session: ClientSession, X, y, model_def: ModelDef, epochs=200, lr=0.1, seed=0):
    """Training inside the enclave through the ``train`` command."""
    opts = json.dumps({"epochs": epochs, "lr": lr, "seed": seed}).encode()
    out = session.run(encode_command("train", model_def.to_bytes(), encode_tensor(X),
                                     encode_tensor(np.asarray(y, np.float32)), opts))
    d, s = unpack_fields(out, 2)
    md = ModelDef.from_json(d)
    return md, ModelSecrets.from_bytes(s, md)


def open_session(config: DefenseConfig | None = None, platform: crypto.Platform | None = None,
                 coins=None) -> ClientSession:
    params, hardware = hw.hw_setup(128, platform=platform, coins=coins)
    program = ProgramQ(config)
    return ClientSession(hardware, hardware.load(params, program), program)


def obtain(model_def: ModelDef, config: DefenseConfig | None = None,
           platform: crypto.Platform | None = None, coins=None) -> tuple[ModelRequest, ClientSession]:
    session = open_session(config, platform, coins)
    quote = session.hardware.run_quote(session.handle, SETUP_INPUT)
    return ModelRequest(session.params, quote), session


def provide(model_def: ModelDef, secrets: ModelSecrets, req: ModelRequest,
            expected_tag: bytes | None = None) -> HiddenModel:
    """Encrypt the weights to the attested enclave key.

    ``expected_tag`` is the program tag the provider is willing to serve;
    by default the tag of Program Q with the default defense configuration.
    """
    if hw.quote_verify(req.hw_params, req.setup_quote) != 1:
        raise QuoteInvalid("setup quote does not verify")
    want = expected_tag if expected_tag is not None else ProgramQ().tag
    if req.setup_quote.tag_q != want or req.setup_quote.measurement != want:
        raise TagMismatch("quote was produced by a different program")
    if req.setup_quote.input != SETUP_INPUT:
        raise QuoteInvalid("quote does not attest a setup command")
    secrets.check(model_def)
    return HiddenModel(model_def, crypto.pke_enc(req.setup_quote.output, secrets.to_bytes()))


def classify(session: ClientSession, hidden: HiddenModel, x) -> np.ndarray:
    out = session.run(encode_command("classify", hidden.model_def.to_bytes(), hidden.c.to_bytes(),
                                     encode_tensor(x)))
    return decode_posterior(out)


def install(session: ClientSession, hidden: HiddenModel) -> bytes:
    """Decrypt once inside the enclave and keep the model sealed per layer on the host."""
    return session.run(encode_command("seal", hidden.model_def.to_bytes(), hidden.c.to_bytes()))


def classify_sealed(session: ClientSession, x, request_id: bytes | None = None,
                    ticket: bytes = b"") -> np.ndarray:
    """Offline classification; ``ticket`` is a serialized QueryTicket over ``encode_tensor(x)``."""
    rid = request_id if request_id is not None else os.urandom(16)
    return decode_posterior(session.run(encode_command("classify-sealed", encode_tensor(x), rid, ticket)))


def status(session: ClientSession) -> dict:
    return json.loads(session.run(encode_command("status")))
