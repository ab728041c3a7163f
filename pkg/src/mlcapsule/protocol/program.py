"""The hardware program run inside every capsule enclave.

Commands (input = length-prefixed fields, the first being the command name):

``setup``            generate the enclave key pair, keep ``sk``, output ``pk``.
``train``            train a dense model on supplied data, keep it, output it.
``classify``         decrypt ``c`` and classify one input (online path).
``seal``             decrypt ``c`` once, re-seal it layer by layer to host storage
                     and initialize the query guard (enables offline use).
``classify-sealed``  offline classification from the sealed layers; under a
                     ticket policy the third field must be an SP-signed
                     ticket over the encoded input.
``status``           guard counters as JSON.

Every classification runs the same hook chain: quota check, reverse-engineering
detector, stealing archive, inference, posterior noising. The defense
configuration is part of ``code_bytes`` so the program tag (and therefore the
attestation and the seal key) commits to it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .. import crypto
from .._framing import pack_fields, unpack_fields
from ..defense.membership import NoiseConfig, noise_posterior
from ..defense.redetect import MALICIOUS, DetectorModel
from ..defense.stealing import StealingMonitor, QueryArchive, stealing_alarm, ATTACK
from ..errors import (
    BadSignature,
    ConfigError,
    Detected,
    NoKey,
    ParseError,
    QuotaExceeded,
    StealingDetected,
    UnknownCommand,
)
from ..guard import Guard, QueryTicket
from ..nn import capsule
from ..nn.model import ModelDef, ModelSecrets, check_input, forward
from ..nn.train import train_toy
from ..nn.weights import decode_tensors, encode_tensors

PROGRAM_ID = b"mlcapsule/program-q/v1"
COMMANDS = ("setup", "train", "classify", "seal", "classify-sealed", "status")


@dataclass(frozen=True)
class DefenseConfig:
    """Per-capsule policy, fixed at load time and measured with the program."""

    threshold: int | None = None
    noise_c: float = 0.0
    noise_T: tuple[float, ...] | None = None
    tau: float | None = None
    rho: float = 0.5
    window: int = 100
    detector: DetectorModel | None = field(default=None, compare=False)
    ticket_pk: bytes | None = None

    def __post_init__(self):
        if self.threshold is not None and self.threshold < 0:
            raise ConfigError("threshold must be non-negative")
        if not 0.0 <= self.noise_c <= 1.0:
            raise ConfigError("noise level c must lie in [0, 1]")
        if self.window <= 0:
            raise ConfigError("window must be positive")

    def to_dict(self) -> dict:
        d = {"threshold": self.threshold, "noise_c": self.noise_c,
             "noise_T": list(self.noise_T) if self.noise_T is not None else None,
             "tau": self.tau, "rho": self.rho, "window": self.window, "detector": None,
             "ticket_pk": self.ticket_pk.hex() if self.ticket_pk is not None else None}
        if self.detector is not None:
            d["detector"] = {"def": self.detector.model_def.to_dict(),
                             "weights_digest": crypto.digest(self.detector.secrets.to_bytes()).hex()}
        return d

    def noise_config(self, classes: int) -> NoiseConfig | None:
        if self.noise_c == 0.0:
            return None
        if self.noise_T is None:
            return NoiseConfig.uniform(self.noise_c, classes)
        return NoiseConfig(self.noise_c, tuple(self.noise_T))


def encode_command(command: str, *fields: bytes) -> bytes:
    return pack_fields(command.encode(), *fields)


def decode_command(data: bytes) -> tuple[str, list[bytes]]:
    fields = unpack_fields(data)
    if not fields:
        raise UnknownCommand("empty command")
    try:
        return fields[0].decode(), fields[1:]
    except UnicodeDecodeError:
        raise UnknownCommand("command name is not UTF-8") from None


def encode_tensor(x) -> bytes:
    return encode_tensors([np.asarray(x, dtype=np.float32)])


def decode_tensor(data: bytes) -> np.ndarray:
    ts = decode_tensors(data)
    if len(ts) != 1:
        raise ParseError(f"expected one tensor, got {len(ts)}")
    return ts[0]


def encode_posterior(p) -> bytes:
    return np.asarray(p, dtype="<f4").tobytes()


def decode_posterior(data: bytes) -> np.ndarray:
    if len(data) % 4:
        raise ParseError("posterior length is not a multiple of 4")
    return np.frombuffer(data, dtype="<f4").astype(np.float32)


@dataclass
class QState:
    sk: bytes | None = None
    pk: bytes | None = None
    trained: tuple[ModelDef, ModelSecrets] | None = None
    archive: QueryArchive | None = None
    queries: int = 0
    sealed: Any = None


def _args(fields: list[bytes], n: int, command: str) -> list[bytes]:
    if len(fields) != n:
        raise ParseError(f"{command} takes {n} fields, got {len(fields)}")
    return fields


class SealedStore:
    """Host-side files of one capsule identity: sealed layers, guard, archive."""

    def __init__(self, root: Path, seal_key: crypto.SealKey):
        self.root = root
        self.key = seal_key

    @classmethod
    def for_context(cls, ctx) -> "SealedStore":
        base = ctx.platform.state_dir
        if base is None:
            raise ConfigError("sealed storage needs a platform state directory")
        return cls(Path(base) / "enclave" / ctx.measurement.hex()[:32], ctx.seal_key())

    @property
    def def_path(self) -> Path:
        return self.root / "model.json"

    def layer_path(self, i: int) -> Path:
        return self.root / "layers" / f"{i:03d}.sealed"

    @property
    def archive_path(self) -> Path:
        return self.root / "archive.sealed"

    def guard(self) -> Guard:
        return Guard(self.root / "guard", self.key)

    def write_model(self, model_def: ModelDef, layers: list[capsule.CapsuleLayer]) -> None:
        (self.root / "layers").mkdir(parents=True, exist_ok=True)
        self.def_path.write_text(model_def.to_json())
        for layer in layers:
            if layer.blob is not None:
                self.layer_path(layer.layer.index).write_bytes(layer.blob)

    def read_model(self) -> tuple[ModelDef, list[capsule.CapsuleLayer]]:
        if not self.def_path.exists():
            raise NoKey("no sealed model installed; run the seal command first")
        model_def = ModelDef.from_json(self.def_path.read_text())
        layers = []
        for r in model_def.resolved:
            blob = self.layer_path(r.index).read_bytes() if r.param_shapes else None
            layers.append(capsule.CapsuleLayer(r, blob))
        return model_def, layers

    def save_archive(self, archive: QueryArchive) -> None:
        points, history = archive.to_arrays()
        blob = encode_tensors([points, history.astype(np.float32),
                               np.array([archive.tau], dtype=np.float32)])
        self.archive_path.write_bytes(crypto.seal(self.key, self.key.measurement, blob))

    def load_archive(self) -> QueryArchive:
        raw = crypto.unseal(self.key, self.key.measurement, self.archive_path.read_bytes())
        points, history, tau = decode_tensors(raw)
        return QueryArchive.from_arrays(points, history > 0.5, float(tau[0]))


class ProgramQ:
    def __init__(self, config: DefenseConfig | None = None):
        self.config = config or DefenseConfig()
        doc = json.dumps(self.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        self.code_bytes = PROGRAM_ID + b"\n" + doc

    @property
    def tag(self) -> bytes:
        return crypto.digest(self.code_bytes)

    def step(self, state: QState | None, input: bytes, ctx) -> tuple[QState, bytes]:
        state = state or QState()
        command, fields = decode_command(input)
        handler = getattr(self, "_cmd_" + command.replace("-", "_"), None)
        if command not in COMMANDS or handler is None:
            raise UnknownCommand(f"unknown command {command!r}")
        return state, handler(state, fields, ctx)

    # -- commands ------------------------------------------------------------------

    def _cmd_setup(self, state: QState, fields, ctx) -> bytes:
        _args(fields, 0, "setup")
        kp = crypto.pke_keygen(128, coins=ctx.coins(32))
        state.sk, state.pk = kp.sk, kp.pk
        return kp.pk

    def _cmd_train(self, state: QState, fields, ctx) -> bytes:
        def_json, X, y, opts = _args(fields, 4, "train")
        model_def = ModelDef.from_json(def_json)
        o = json.loads(opts or b"{}")
        secrets = train_toy(decode_tensor(X), decode_tensor(y).astype(np.int64), model_def,
                            epochs=int(o.get("epochs", 200)), lr=float(o.get("lr", 0.1)),
                            rng_seed=int(o.get("seed", 0)))
        state.trained = (model_def, secrets)
        return pack_fields(model_def.to_bytes(), secrets.to_bytes())

    def _decrypt(self, state: QState, model_def: ModelDef, c: bytes) -> ModelSecrets:
        if state.sk is None:
            raise NoKey("classify before setup: the enclave holds no key")
        plain = crypto.pke_dec(state.sk, c)
        return ModelSecrets.from_bytes(plain, model_def)

    def _screen(self, x: np.ndarray, archive: QueryArchive | None) -> None:
        """Detector and stealing archive; either may veto the query."""
        det = self.config.detector
        if det is not None and det.score(x) == MALICIOUS:
            raise Detected("query classified as crafted input; service denied")
        if archive is not None:
            archive.update(x.reshape(-1))
            h = archive.history
            if len(h) >= self.config.window and stealing_alarm(h, self.config.window, self.config.rho) == ATTACK:
                raise StealingDetected("query set stopped growing; model stealing suspected")

    def _release(self, model_def: ModelDef, p: np.ndarray) -> bytes:
        cfg = self.config.noise_config(model_def.classes)
        if cfg is not None:
            p = noise_posterior(p, cfg)
        return encode_posterior(p)

    def _new_archive(self, model_def: ModelDef) -> QueryArchive | None:
        if self.config.tau is None:
            return None
        return StealingMonitor(int(np.prod(model_def.input_shape)), self.config.tau,
                               self.config.rho, self.config.window).archive

    def _cmd_classify(self, state: QState, fields, ctx) -> bytes:
        def_json, c, x = _args(fields, 3, "classify")
        model_def = ModelDef.from_json(def_json)
        secrets = self._decrypt(state, model_def, c)
        x = check_input(model_def, decode_tensor(x))
        if self.config.threshold is not None and state.queries >= self.config.threshold:
            raise QuotaExceeded(f"query quota of {self.config.threshold} used up")
        if state.archive is None:
            state.archive = self._new_archive(model_def)
        self._screen(x, state.archive)
        out = self._release(model_def, forward(model_def, secrets, x))
        state.queries += 1
        return out

    def _cmd_seal(self, state: QState, fields, ctx) -> bytes:
        def_json, c = _args(fields, 2, "seal")
        model_def = ModelDef.from_json(def_json)
        secrets = self._decrypt(state, model_def, c)
        store = SealedStore.for_context(ctx)
        if store.def_path.exists():
            raise ConfigError(f"a sealed model is already installed in {store.root}")
        key = store.key
        store.write_model(model_def, capsule.seal_model(model_def, secrets, key, key.measurement))
        Guard.create(store.root / "guard", key, self.config.threshold if self.config.threshold is not None else 2**63)
        archive = self._new_archive(model_def)
        if archive is not None:
            store.save_archive(archive)
        return model_def.digest()

    def _cmd_classify_sealed(self, state: QState, fields, ctx) -> bytes:
        if len(fields) == 2:
            fields = [*fields, b""]
        x_raw, request_id, ticket = _args(fields, 3, "classify-sealed")
        store = SealedStore.for_context(ctx)
        model_def, layers = store.read_model()
        x = check_input(model_def, decode_tensor(x_raw))
        key = store.key

        def compute() -> bytes:
            archive = store.load_archive() if self.config.tau is not None else None
            try:
                self._screen(x, archive)
            finally:
                if archive is not None:
                    store.save_archive(archive)
            p = capsule.capsule_forward(layers, key, key.measurement, x)
            return self._release(model_def, p)

        if self.config.ticket_pk is not None:
            if not ticket:
                raise BadSignature("this capsule only answers ticketed queries")
            return store.guard().admit_ticket(self.config.ticket_pk, QueryTicket.from_bytes(ticket), x_raw, compute)
        return store.guard().admit(compute, request_id=request_id)

    def _cmd_status(self, state: QState, fields, ctx) -> bytes:
        _args(fields, 0, "status")
        s = SealedStore.for_context(ctx).guard().status()
        return json.dumps({"counter": s.counter, "threshold": s.threshold,
                           "remaining": s.remaining, "version": s.version}).encode()
