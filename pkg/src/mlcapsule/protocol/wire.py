"""Provisioning over a byte stream.

Frame: ``"MLC1" | u8 type | u32 LE payload length | payload``. A client sends
one ProvisionRequest (HwParams bytes followed by the setup Quote bytes) and
gets back either a ProvisionResponse (a serialized HiddenModel) or an Error
frame carrying ``u16 code`` and a UTF-8 message.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass

from ..errors import CapsuleError, FrameTooLarge, ParseError, ProtocolError, TransportError, by_code
from ..nn.model import ModelDef, ModelSecrets
from .algorithms import HiddenModel, ModelRequest, provide

log = logging.getLogger(__name__)

MAGIC = b"MLC1"
REQUEST, RESPONSE, ERROR = 0x01, 0x02, 0x7F
_HEADER = struct.Struct("<4sBI")
DEFAULT_MAX_FRAME = 64 * 1024 * 1024


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    return _HEADER.pack(MAGIC, msg_type, len(payload)) + payload


def encode_error(err: CapsuleError | int, message: str = "") -> bytes:
    code = err if isinstance(err, int) else err.code
    text = message or (str(err) if not isinstance(err, int) else "")
    return encode_frame(ERROR, struct.pack("<H", code) + text.encode("utf-8", "replace"))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(min(n - len(buf), 1 << 20))
        except OSError as exc:
            raise TransportError(f"receive failed: {exc}") from exc
        if not chunk:
            raise TransportError(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_header(sock: socket.socket, max_frame: int) -> tuple[int, int]:
    magic, msg_type, length = _HEADER.unpack(_recv_exact(sock, _HEADER.size))
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    if msg_type not in (REQUEST, RESPONSE, ERROR):
        raise ProtocolError(f"unknown message type 0x{msg_type:02x}")
    if length > max_frame:
        raise FrameTooLarge(f"frame of {length} bytes exceeds the {max_frame}-byte limit")
    return msg_type, length


def read_frame(sock: socket.socket, max_frame: int = DEFAULT_MAX_FRAME) -> tuple[int, bytes]:
    msg_type, length = read_header(sock, max_frame)
    return msg_type, _recv_exact(sock, length)


def decode_error(payload: bytes) -> CapsuleError:
    if len(payload) < 2:
        return ProtocolError("truncated error frame")
    (code,) = struct.unpack_from("<H", payload)
    cls = by_code(code) or CapsuleError
    return cls(payload[2:].decode("utf-8", "replace"))


@dataclass
class EndpointConfig:
    host: str = "127.0.0.1"
    port: int = 0
    max_frame: int = DEFAULT_MAX_FRAME
    timeout: float = 10.0


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv: ProvisionServer = self.server  # type: ignore[assignment]
        sock = self.request
        sock.settimeout(srv.config.timeout)
        try:
            msg_type, payload = read_frame(sock, srv.config.max_frame)
            if msg_type != REQUEST:
                raise ProtocolError(f"expected a provision request, got type 0x{msg_type:02x}")
            req = ModelRequest.from_bytes(payload)
            hidden = provide(srv.model_def, srv.secrets, req, expected_tag=srv.expected_tag)
            reply = encode_frame(RESPONSE, hidden.to_bytes())
        except CapsuleError as exc:
            log.info("provisioning refused: %s", exc)
            reply = encode_error(exc)
        except Exception as exc:  # a malformed struct or similar must not kill the server
            log.warning("provisioning failed: %r", exc)
            reply = encode_error(ProtocolError(str(exc)))
        try:
            sock.sendall(reply)
        except OSError:
            return
        if reply[4] == RESPONSE:
            with srv.lock:
                srv.served += 1


class ProvisionServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, model_def: ModelDef, secrets: ModelSecrets, expected_tag: bytes,
                 config: EndpointConfig | None = None):
        self.config = config or EndpointConfig()
        self.model_def, self.secrets, self.expected_tag = model_def, secrets.check(model_def), expected_tag
        self.served = 0
        self.lock = threading.Lock()
        super().__init__((self.config.host, self.config.port), _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> "ProvisionServer":
        threading.Thread(target=self.serve_forever, daemon=True).start()
        return self

    def __exit__(self, *exc):
        self.shutdown()
        super().__exit__(*exc)


def serve_provision(model_def: ModelDef, secrets: ModelSecrets, expected_tag: bytes,
                    config: EndpointConfig | None = None) -> ProvisionServer:
    """Bind and start the provisioning endpoint in a background thread."""
    return ProvisionServer(model_def, secrets, expected_tag, config).start()


def exchange(address: tuple[str, int], frame: bytes, timeout: float = 10.0,
             max_frame: int = DEFAULT_MAX_FRAME) -> tuple[int, bytes]:
    try:
        with socket.create_connection(address, timeout=timeout) as sock:
            sock.sendall(frame)
            return read_frame(sock, max_frame)
    except OSError as exc:
        raise TransportError(f"cannot reach {address[0]}:{address[1]}: {exc}") from exc


def request_provision(address: tuple[str, int], req: ModelRequest, timeout: float = 10.0,
                      max_frame: int = DEFAULT_MAX_FRAME) -> HiddenModel:
    msg_type, payload = exchange(address, encode_frame(REQUEST, req.to_bytes()), timeout, max_frame)
    if msg_type == ERROR:
        raise decode_error(payload)
    if msg_type != RESPONSE:
        raise ProtocolError(f"unexpected reply type 0x{msg_type:02x}")
    try:
        return HiddenModel.from_bytes(payload)
    except (ParseError, CapsuleError):
        raise
    except Exception as exc:
        raise ProtocolError(f"malformed provision response: {exc}") from exc
