"""Cryptographic building blocks: digests, signatures, public-key encryption
and enclave sealing.

Public-key encryption is RFC 9180 HPKE in base mode
(DHKEM-X25519 / HKDF-SHA256 / AES-256-GCM). Sealing is AES-256-GCM over
fixed-size chunks so that only one chunk of scratch memory is needed on top
of the plaintext buffer.

SealedBlob layout (little endian)::

    "MLCS" | u16 version | u64 total_len | u32 chunk_size
    repeat n = max(1, ceil(total_len / chunk_size)) times:
        u32 index | 12 B nonce | ciphertext || 16 B tag

Each chunk authenticates ``measurement || u32 index || u64 total_len`` as
associated data. An empty plaintext still produces one (empty) chunk so that
a truncated blob can never pass as a valid empty one.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import stat
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, hpke
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (
    ChunkOutOfOrder,
    ConfigError,
    IdentityMismatch,
    IntegrityFailure,
    ParseError,
    TruncatedBlob,
)

DIGEST_SIZE = 32
MIB = 1 << 20
DEFAULT_CHUNK_SIZE = 2 * MIB

SIG_SCHEME = "ed25519"
PKE_SCHEME_ID = 0x0001  # HPKE X25519 / HKDF-SHA256 / AES-256-GCM
_HPKE = hpke.Suite(hpke.KEM.X25519, hpke.KDF.HKDF_SHA256, hpke.AEAD.AES_256_GCM)
_HPKE_INFO = b"mlcapsule/provide/v1"
_ENC_LEN = 32
_TAG_LEN = 16

SEAL_MAGIC = b"MLCS"
SEAL_VERSION = 1
_SEAL_HEADER = struct.Struct("<4sHQI")
_CHUNK_HEADER = struct.Struct("<I12s")
_CHUNK_AD = struct.Struct("<IQ")


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# -- signatures -------------------------------------------------------------------

def sig_keygen(seed: bytes | None = None) -> tuple[bytes, bytes]:
    """Return raw ``(signing_key, verification_key)``; 32 bytes each."""
    sk = Ed25519PrivateKey.from_private_bytes(seed) if seed else Ed25519PrivateKey.generate()
    return sk.private_bytes_raw(), sk.public_key().public_bytes_raw()


def sign(sk_sig: bytes, data: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(sk_sig).sign(data)


def verify(pk_sig: bytes, data: bytes, sig: bytes) -> int:
    try:
        Ed25519PublicKey.from_public_bytes(pk_sig).verify(sig, data)
    except (InvalidSignature, ValueError, TypeError):
        return 0
    return 1


# -- public-key encryption --------------------------------------------------------

@dataclass(frozen=True)
class KeyPair:
    sk: bytes = field(repr=False)
    pk: bytes


@dataclass(frozen=True)
class Ciphertext:
    scheme_id: int
    header: bytes  # HPKE encapsulated key
    body: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return struct.pack("<H", self.scheme_id) + self.header + self.body + self.tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "Ciphertext":
        if len(data) < 2 + _ENC_LEN + _TAG_LEN:
            raise ParseError("ciphertext too short")
        (scheme,) = struct.unpack_from("<H", data)
        if scheme != PKE_SCHEME_ID:
            raise ParseError(f"unknown ciphertext scheme {scheme:#x}")
        return cls(scheme, bytes(data[2:2 + _ENC_LEN]), bytes(data[2 + _ENC_LEN:-_TAG_LEN]),
                   bytes(data[-_TAG_LEN:]))

    def __len__(self) -> int:
        return 2 + len(self.header) + len(self.body) + len(self.tag)


def pke_keygen(security_level: int = 128, coins: bytes | None = None) -> KeyPair:
    if security_level != 128:
        raise ConfigError(f"unsupported security level {security_level}")
    sk = X25519PrivateKey.from_private_bytes(coins[:32]) if coins else X25519PrivateKey.generate()
    return KeyPair(sk.private_bytes_raw(), sk.public_key().public_bytes_raw())


def pke_enc(pk: bytes, m: bytes) -> Ciphertext:
    try:
        raw = _HPKE.encrypt(bytes(m), X25519PublicKey.from_public_bytes(pk), info=_HPKE_INFO)
    except ValueError as exc:
        raise ParseError(f"bad public key: {exc}") from None
    return Ciphertext(PKE_SCHEME_ID, raw[:_ENC_LEN], raw[_ENC_LEN:-_TAG_LEN], raw[-_TAG_LEN:])


def pke_dec(sk: bytes, c: Ciphertext | bytes) -> bytes:
    if not isinstance(c, Ciphertext):
        c = Ciphertext.from_bytes(c)
    try:
        return _HPKE.decrypt(c.header + c.body + c.tag, X25519PrivateKey.from_private_bytes(sk),
                             info=_HPKE_INFO)
    except (InvalidTag, ValueError) as exc:
        raise IntegrityFailure("ciphertext failed authentication") from exc


# -- sealing ----------------------------------------------------------------------

@dataclass(frozen=True)
class SealKey:
    key: bytes = field(repr=False)
    measurement: bytes


def derive_seal_key(root_seal_key: bytes, measurement: bytes) -> SealKey:
    if len(measurement) != DIGEST_SIZE:
        raise ValueError("measurement must be a 32-byte digest")
    key = HKDF(hashes.SHA256(), 32, salt=b"mlcapsule/seal/v1", info=measurement).derive(root_seal_key)
    return SealKey(key, measurement)


def _chunk_count(total_len: int, chunk_size: int) -> int:
    return max(1, -(-total_len // chunk_size))


def seal(seal_key: SealKey, measurement: bytes, plaintext: bytes,
         chunk_size: int = DEFAULT_CHUNK_SIZE,
         nonce_source: Callable[[int], bytes] = os.urandom) -> bytes:
    if seal_key.measurement != measurement:
        raise IdentityMismatch("seal key belongs to a different enclave identity")
    if not 0 < chunk_size < 1 << 32:
        raise ValueError("chunk_size out of range")
    total = len(plaintext)
    view = memoryview(plaintext)
    aead = AESGCM(seal_key.key)
    n = _chunk_count(total, chunk_size)
    out = bytearray(_SEAL_HEADER.pack(SEAL_MAGIC, SEAL_VERSION, total, chunk_size))
    for i in range(n):
        nonce = nonce_source(12)
        chunk = view[i * chunk_size:(i + 1) * chunk_size]
        out += _CHUNK_HEADER.pack(i, nonce)
        out += aead.encrypt(nonce, chunk, measurement + _CHUNK_AD.pack(i, total))
    return bytes(out)


@dataclass(frozen=True)
class SealHeader:
    version: int
    total_len: int
    chunk_size: int

    @property
    def chunks(self) -> int:
        return _chunk_count(self.total_len, self.chunk_size)

    @property
    def blob_len(self) -> int:
        return _SEAL_HEADER.size + self.chunks * (_CHUNK_HEADER.size + _TAG_LEN) + self.total_len


def seal_header(blob: bytes) -> SealHeader:
    if len(blob) < _SEAL_HEADER.size:
        raise TruncatedBlob("sealed blob shorter than its header")
    magic, version, total, chunk_size = _SEAL_HEADER.unpack_from(blob)
    if magic != SEAL_MAGIC:
        raise ParseError("not a sealed blob")
    if version != SEAL_VERSION:
        raise ParseError(f"unsupported sealed blob version {version}")
    if chunk_size == 0:
        raise ParseError("zero chunk size")
    return SealHeader(version, total, chunk_size)


def unseal_into(seal_key: SealKey, measurement: bytes, blob: bytes,
                out: bytearray | None = None) -> bytearray:
    """Authenticate and decrypt ``blob`` into a mutable buffer.

    The returned buffer (``out`` if given) can be zeroized by the caller. The
    internal one-chunk scratch buffer is always wiped before returning. On any
    failure the output buffer is wiped too, so unauthenticated bytes never
    escape.
    """
    if seal_key.measurement != measurement:
        raise IdentityMismatch("blob requested under a different enclave identity")
    hdr = seal_header(blob)
    if len(blob) < hdr.blob_len:
        raise TruncatedBlob(f"sealed blob is {len(blob)} bytes, header promises {hdr.blob_len}")
    if len(blob) > hdr.blob_len:
        raise IntegrityFailure("trailing bytes after last chunk")
    if out is None:
        out = bytearray(hdr.total_len)
    elif len(out) != hdr.total_len:
        raise ValueError("output buffer has the wrong size")

    view = memoryview(blob)
    dst = memoryview(out)
    scratch = bytearray(min(hdr.chunk_size, max(hdr.total_len, 1)) + 15)
    pos = _SEAL_HEADER.size
    try:
        for i in range(hdr.chunks):
            index, nonce = _CHUNK_HEADER.unpack_from(view, pos)
            if index != i:
                raise ChunkOutOfOrder(f"chunk {index} found at position {i}")
            pos += _CHUNK_HEADER.size
            n = min(hdr.chunk_size, hdr.total_len - i * hdr.chunk_size)
            ct = view[pos:pos + n]
            tag = view[pos + n:pos + n + _TAG_LEN].tobytes()
            pos += n + _TAG_LEN
            dec = Cipher(algorithms.AES(seal_key.key), modes.GCM(nonce, tag)).decryptor()
            dec.authenticate_additional_data(measurement + _CHUNK_AD.pack(i, hdr.total_len))
            written = dec.update_into(ct, scratch)
            try:
                dec.finalize()
            except InvalidTag:
                raise IntegrityFailure(f"chunk {i} failed authentication") from None
            dst[i * hdr.chunk_size:i * hdr.chunk_size + written] = scratch[:written]
    except BaseException:
        wipe(out)
        raise
    finally:
        wipe(scratch)
    return out


def unseal(seal_key: SealKey, measurement: bytes, blob: bytes) -> bytes:
    buf = unseal_into(seal_key, measurement, blob)
    try:
        return bytes(buf)
    finally:
        wipe(buf)


def wipe(buf: bytearray | memoryview) -> None:
    mv = memoryview(buf).cast("B")
    mv[:] = bytes(len(mv))


def mac(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()


def mac_ok(key: bytes, data: bytes, tag: bytes) -> bool:
    return hmac.compare_digest(mac(key, data), tag)


# -- simulated platform root ------------------------------------------------------

class Platform:
    """Holds the per-platform root seal key.

    Real hardware fuses this key into the CPU; here it is 32 random bytes kept
    in a file readable only by the owner.
    """

    KEY_FILE = "platform.key"

    def __init__(self, root_seal_key: bytes | None = None, state_dir: Path | str | None = None):
        self._root = root_seal_key if root_seal_key is not None else os.urandom(32)
        if len(self._root) != 32:
            raise ValueError("root seal key must be 32 bytes")
        self.state_dir = Path(state_dir) if state_dir is not None else None

    @classmethod
    def open(cls, state_dir: Path | str) -> "Platform":
        state_dir = Path(state_dir)
        state_dir.mkdir(parents=True, exist_ok=True)
        path = state_dir / cls.KEY_FILE
        if path.exists():
            root = path.read_bytes()
            if len(root) != 32:
                raise ParseError(f"{path}: corrupt platform key")
        else:
            root = os.urandom(32)
            fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, stat.S_IRUSR | stat.S_IWUSR)
            with os.fdopen(fd, "wb") as fh:
                fh.write(root)
        return cls(root, state_dir)

    def seal_key(self, measurement: bytes) -> SealKey:
        return derive_seal_key(self._root, measurement)
