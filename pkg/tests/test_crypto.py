import hashlib
import hmac
import os
import random
import stat
import struct

import pytest
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from hypothesis import given, settings, strategies as st

from mlcapsule import crypto
from mlcapsule.errors import (
    ChunkOutOfOrder,
    IdentityMismatch,
    IntegrityFailure,
    ParseError,
    TruncatedBlob,
)

MIB = crypto.MIB


@pytest.fixture
def platform():
    return crypto.Platform(os.urandom(32))


@pytest.fixture
def measurement():
    return crypto.digest(b"program under test")


@pytest.fixture
def key(platform, measurement):
    return platform.seal_key(measurement)


# -- digest / signatures -----------------------------------------------------------

def test_digest_basics():
    assert crypto.digest(b"x") == crypto.digest(b"x")
    assert crypto.digest(b"") != crypto.digest(b"a")
    assert all(len(crypto.digest(os.urandom(n))) == 32 for n in (0, 1, 100))


def test_sign_verify():
    sk, pk = crypto.sig_keygen()
    sig = crypto.sign(sk, b"message")
    assert crypto.verify(pk, b"message", sig) == 1
    flipped = bytes([sig[0] ^ 1]) + sig[1:]
    assert crypto.verify(pk, b"message", flipped) == 0
    assert crypto.verify(pk, b"messagf", sig) == 0
    _, other = crypto.sig_keygen()
    assert crypto.verify(other, b"message", sig) == 0
    assert crypto.verify(b"short", b"message", sig) == 0


# -- public-key encryption ---------------------------------------------------------

def test_pke_roundtrip_empty_and_5mib():
    kp = crypto.pke_keygen()
    assert crypto.pke_dec(kp.sk, crypto.pke_enc(kp.pk, b"")) == b""
    m = os.urandom(5 * MIB)
    assert crypto.pke_dec(kp.sk, crypto.pke_enc(kp.pk, m)) == m


def test_pke_wrong_key_fails():
    a, b = crypto.pke_keygen(), crypto.pke_keygen()
    with pytest.raises(IntegrityFailure):
        crypto.pke_dec(b.sk, crypto.pke_enc(a.pk, b"secret weights"))


def test_pke_is_randomized():
    kp = crypto.pke_keygen()
    assert crypto.pke_enc(kp.pk, b"m").to_bytes() != crypto.pke_enc(kp.pk, b"m").to_bytes()


def test_pke_bitflip_detected():
    kp = crypto.pke_keygen()
    raw = bytearray(crypto.pke_enc(kp.pk, b"some model parameters").to_bytes())
    for pos in (2, 10, 40, len(raw) - 1):
        mutated = bytearray(raw)
        mutated[pos] ^= 0x01
        with pytest.raises(IntegrityFailure):
            crypto.pke_dec(kp.sk, bytes(mutated))


def test_pke_ciphertext_serialization():
    kp = crypto.pke_keygen()
    c = crypto.pke_enc(kp.pk, b"abc")
    assert crypto.Ciphertext.from_bytes(c.to_bytes()) == c
    assert len(c) == len(c.to_bytes()) == 2 + 32 + 3 + 16
    with pytest.raises(ParseError):
        crypto.Ciphertext.from_bytes(b"\x02\x00" + c.to_bytes()[2:])


def test_pke_1000_random_roundtrips():
    rng = random.Random(11)
    kp = crypto.pke_keygen()
    for _ in range(1000):
        m = rng.randbytes(rng.randrange(0, 300))
        assert crypto.pke_dec(kp.sk, crypto.pke_enc(kp.pk, m)) == m


def test_pke_keygen_from_coins_is_deterministic():
    coins = bytes(range(32))
    assert crypto.pke_keygen(coins=coins) == crypto.pke_keygen(coins=coins)


# -- seal keys ---------------------------------------------------------------------

def test_seal_key_derivation(platform):
    m1, m2 = crypto.digest(b"a"), crypto.digest(b"b")
    assert platform.seal_key(m1) == platform.seal_key(m1)
    assert platform.seal_key(m1).key != platform.seal_key(m2).key


def test_seal_key_measurement_separation_1000():
    root = os.urandom(32)
    keys = {crypto.derive_seal_key(root, crypto.digest(i.to_bytes(4, "little"))).key for i in range(1000)}
    assert len(keys) == 1000


def test_platform_key_file(tmp_path):
    p1 = crypto.Platform.open(tmp_path)
    mode = stat.S_IMODE((tmp_path / crypto.Platform.KEY_FILE).stat().st_mode)
    assert mode == 0o600
    p2 = crypto.Platform.open(tmp_path)
    m = crypto.digest(b"q")
    assert p1.seal_key(m) == p2.seal_key(m)


# -- sealing -------------------------------------------------------------------------

@pytest.mark.parametrize("size", [0, 1, 2 * MIB - 1, 2 * MIB, 2 * MIB + 1])
def test_seal_roundtrip_sizes(key, measurement, size):
    data = os.urandom(size)
    blob = crypto.seal(key, measurement, data)
    assert crypto.unseal(key, measurement, blob) == data
    hdr = crypto.seal_header(blob)
    assert hdr.total_len == size and hdr.chunk_size == 2 * MIB
    assert hdr.chunks == max(1, -(-size // (2 * MIB)))


@pytest.mark.slow
def test_seal_100mib_is_50_chunks(key, measurement):
    data = os.urandom(100 * MIB)
    blob = crypto.seal(key, measurement, data)
    assert crypto.seal_header(blob).chunks == 50
    assert crypto.unseal(key, measurement, blob) == data


def test_seal_layout_bit_exact(key, measurement):
    nonces = iter([b"\x01" * 12, b"\x02" * 12])
    blob = crypto.seal(key, measurement, b"abcdefgh", chunk_size=5, nonce_source=lambda n: next(nonces))
    magic, version, total, chunk = struct.unpack_from("<4sHQI", blob)
    assert (magic, version, total, chunk) == (b"MLCS", 1, 8, 5)
    off = 18
    assert struct.unpack_from("<I12s", blob, off) == (0, b"\x01" * 12)
    off += 16 + 5 + 16
    assert struct.unpack_from("<I12s", blob, off) == (1, b"\x02" * 12)
    assert len(blob) == off + 16 + 3 + 16


def _hkdf_sha256(ikm, salt, info, n):
    prk = hmac.new(salt, ikm, hashlib.sha256).digest()
    out, block, i = b"", b"", 1
    while len(out) < n:
        block = hmac.new(prk, block + info + bytes([i]), hashlib.sha256).digest()
        out, i = out + block, i + 1
    return out[:n]


def test_seal_records_decrypt_with_independent_framing(measurement):
    root = os.urandom(32)
    key = crypto.derive_seal_key(root, measurement)
    assert key.key == _hkdf_sha256(root, b"mlcapsule/seal/v1", measurement, 32)
    data = os.urandom(23)
    blob = crypto.seal(key, measurement, data, chunk_size=10)
    aead, off, got = AESGCM(key.key), 18, b""
    for i in range(3):
        n = min(10, 23 - 10 * i)
        idx, nonce = struct.unpack_from("<I12s", blob, off)
        assert idx == i
        ad = measurement + struct.pack("<IQ", i, 23)
        got += aead.decrypt(nonce, blob[off + 16:off + 32 + n], ad)
        off += 32 + n
    assert off == len(blob) and got == data


def _chunks(blob):
    hdr = crypto.seal_header(blob)
    out, pos = [], 18
    for i in range(hdr.chunks):
        n = min(hdr.chunk_size, hdr.total_len - i * hdr.chunk_size)
        out.append(blob[pos:pos + 16 + n + 16])
        pos += 32 + n
    return blob[:18], out


def test_chunk_reorder_detected(key, measurement):
    blob = crypto.seal(key, measurement, os.urandom(40), chunk_size=10)
    head, chunks = _chunks(blob)
    chunks[1], chunks[2] = chunks[2], chunks[1]
    with pytest.raises(ChunkOutOfOrder):
        crypto.unseal(key, measurement, head + b"".join(chunks))


def test_chunk_swap_with_rewritten_index_fails_auth(key, measurement):
    blob = crypto.seal(key, measurement, os.urandom(40), chunk_size=10)
    head, chunks = _chunks(blob)
    a, b = bytearray(chunks[1]), bytearray(chunks[2])
    a[:4], b[:4] = b[:4], a[:4]
    chunks[1], chunks[2] = bytes(b), bytes(a)
    with pytest.raises(IntegrityFailure):
        crypto.unseal(key, measurement, head + b"".join(chunks))


def test_truncation_detected(key, measurement):
    blob = crypto.seal(key, measurement, os.urandom(40), chunk_size=10)
    for cut in (0, 10, 18, 30, len(blob) - 1):
        with pytest.raises((TruncatedBlob, ParseError)):
            crypto.unseal(key, measurement, blob[:cut])
    head, chunks = _chunks(blob)
    with pytest.raises(TruncatedBlob):
        crypto.unseal(key, measurement, head + b"".join(chunks[:-1]))


def test_empty_blob_cannot_be_forged_by_truncation(key, measurement):
    blob = crypto.seal(key, measurement, b"payload")
    forged = struct.pack("<4sHQI", b"MLCS", 1, 0, 2 * MIB)
    with pytest.raises(TruncatedBlob):
        crypto.unseal(key, measurement, forged)
    with pytest.raises(IntegrityFailure):
        crypto.unseal(key, measurement, forged + blob[18:18 + 16] + blob[-16:])


def test_total_len_rewrite_detected(key, measurement):
    blob = bytearray(crypto.seal(key, measurement, os.urandom(30), chunk_size=10))
    head, chunks = _chunks(bytes(blob))
    # drop last chunk and claim the shorter length
    forged = struct.pack("<4sHQI", b"MLCS", 1, 20, 10) + b"".join(chunks[:2])
    with pytest.raises(IntegrityFailure):
        crypto.unseal(key, measurement, forged)


def test_every_single_byte_mutation_errors(key, measurement):
    data = os.urandom(25)
    blob = crypto.seal(key, measurement, data, chunk_size=10)
    for pos in range(len(blob)):
        mutated = bytearray(blob)
        mutated[pos] ^= 0x80
        with pytest.raises((IntegrityFailure, ParseError)):
            crypto.unseal(key, measurement, bytes(mutated))


def test_trailing_bytes_rejected(key, measurement):
    blob = crypto.seal(key, measurement, b"abc")
    with pytest.raises(IntegrityFailure):
        crypto.unseal(key, measurement, blob + b"\x00")


def test_wrong_measurement(platform, key, measurement):
    blob = crypto.seal(key, measurement, b"state")
    other = crypto.digest(b"another program")
    with pytest.raises(IdentityMismatch):
        crypto.unseal(key, other, blob)
    # an enclave with a different identity holds a different key: authentication fails
    with pytest.raises(IntegrityFailure):
        crypto.unseal(platform.seal_key(other), other, blob)


def test_unseal_into_wipes_on_failure(key, measurement):
    blob = bytearray(crypto.seal(key, measurement, b"\xff" * 30, chunk_size=10))
    blob[-1] ^= 1  # break the last chunk; first two decrypt fine
    out = bytearray(30)
    with pytest.raises(IntegrityFailure):
        crypto.unseal_into(key, measurement, bytes(blob), out)
    assert out == bytearray(30)


def test_distinct_plaintexts_distinct_blobs(key, measurement):
    rng = random.Random(3)
    blobs = {crypto.seal(key, measurement, rng.randbytes(16)) for _ in range(500)}
    assert len(blobs) == 500


@settings(max_examples=60, deadline=None)
@given(data=st.binary(max_size=200), chunk=st.integers(1, 64))
def test_seal_roundtrip_property(data, chunk):
    m = crypto.digest(b"prop")
    k = crypto.derive_seal_key(b"\x07" * 32, m)
    assert crypto.unseal(k, m, crypto.seal(k, m, data, chunk_size=chunk)) == data
