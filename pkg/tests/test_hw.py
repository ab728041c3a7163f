import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from mlcapsule import crypto, hw
from mlcapsule.errors import HandleNotFound, MalformedProgram, ProgramError


def _counter_step(state, x, ctx):
    n = (state or 0) + 1 if x == b"inc" else (state or 0)
    return n, str(n).encode()


COUNTER = hw.FunctionProgram(b"test/counter", _counter_step)


class Boom(Exception):
    pass


def _failing_step(state, x, ctx):
    raise Boom("payload")


@pytest.fixture
def setup():
    return hw.hw_setup(128)


def test_setup_params(setup):
    params, _ = setup
    assert params.verification_key and params.scheme_id == "ed25519"
    assert hw.HwParams.from_bytes(params.to_bytes()) == params
    other, _ = hw.hw_setup(128)
    assert other.verification_key != params.verification_key


def test_unsupported_security_level():
    from mlcapsule.errors import ConfigError
    with pytest.raises(ConfigError):
        hw.hw_setup(80)


def test_cross_instance_quote_rejected(setup):
    params_a, a = setup
    params_b, _ = hw.hw_setup(128)
    q = a.run_quote(a.load(params_a, hw.ECHO), b"x")
    assert hw.quote_verify(params_a, q) == 1
    assert hw.quote_verify(params_b, q) == 0


def test_load_fresh_handles_same_tag(setup):
    params, h = setup
    h1, h2 = h.load(params, COUNTER), h.load(params, COUNTER)
    assert h1 != h2
    assert h.measurement(h1) == h.measurement(h2) == crypto.digest(COUNTER.code_bytes)
    assert h._record(h1).state is None


def test_10k_loads_distinct(setup):
    params, h = setup
    handles = {h.load(params, hw.ECHO).id for _ in range(10_000)}
    assert len(handles) == 10_000


def test_malformed_program(setup):
    params, h = setup
    with pytest.raises(MalformedProgram):
        h.load(params, object())


def test_run_stateful(setup):
    params, h = setup
    hdl = h.load(params, COUNTER)
    assert h.run(hdl, b"inc") == b"1"
    assert h.run(hdl, b"inc") == b"2"
    other = h.load(params, COUNTER)
    assert h.run(other, b"inc") == b"1"


def test_run_unknown_handle(setup):
    _, h = setup
    with pytest.raises(HandleNotFound):
        h.run(hw.EnclaveHandle(b"\x00" * 16), b"x")


def test_echo(setup):
    params, h = setup
    assert h.run(h.load(params, hw.ECHO), b"hello") == b"hello"


def test_program_error_carries_payload(setup):
    params, h = setup
    hdl = h.load(params, hw.FunctionProgram(b"fail", _failing_step))
    with pytest.raises(ProgramError) as info:
        h.run(hdl, b"")
    assert isinstance(info.value.payload, Boom)


def test_quote_roundtrip_and_layout(setup):
    params, h = setup
    hdl = h.load(params, COUNTER)
    q = h.run_quote(hdl, b"inc")
    assert q.output == b"1"
    assert q.md_hdl == h.measurement(hdl) + hdl.id
    assert q.tag_q == crypto.digest(COUNTER.code_bytes)
    assert hw.Quote.from_bytes(q.to_bytes()) == q
    assert q.to_bytes()[:4] == b"MLCQ"
    assert hw.quote_verify(params, q) == 1
    assert hw.quote_verify(params, q.to_bytes()) == 1


def test_quote_field_bitflips(setup):
    params, h = setup
    q = h.run_quote(h.load(params, hw.ECHO), b"some input")
    fields = [q.md_hdl, q.tag_q, q.input, q.output, q.sigma]
    for i, f in enumerate(fields):
        for bit in range(0, 8 * len(f), max(1, len(f))):
            mutated = bytearray(f)
            mutated[bit // 8] ^= 1 << (bit % 8)
            new = list(fields)
            new[i] = bytes(mutated)
            assert hw.quote_verify(params, hw.Quote(*new)) == 0


def test_quote_tag_of_other_program(setup):
    params, h = setup
    q = h.run_quote(h.load(params, hw.ECHO), b"in")
    forged = hw.Quote(q.md_hdl, crypto.digest(b"other"), q.input, q.output, q.sigma)
    assert hw.quote_verify(params, forged) == 0


def test_quote_verify_malformed(setup):
    params, _ = setup
    assert hw.quote_verify(params, b"") == 0
    assert hw.quote_verify(params, b"MLCQ\xff\xff") == 0
    assert hw.quote_verify(params, None) == 0


@settings(max_examples=30, deadline=None)
@given(inp=st.binary(max_size=64))
def test_quote_roundtrip_property(inp):
    params, h = hw.hw_setup(128)
    q = h.run_quote(h.load(params, hw.ECHO), inp)
    assert hw.quote_verify(params, q) == 1


def test_determinism_with_fixed_coins():
    def step(state, x, ctx):
        return state, ctx.coins(8) + x

    prog = hw.FunctionProgram(b"coins", step)
    outs = []
    for _ in range(2):
        params, h = hw.hw_setup(128, coins=random.Random(5).randbytes)
        outs.append(h.run(h.load(params, prog), b"!"))
    assert outs[0] == outs[1]


def test_concurrent_runs_serialize(setup):
    params, h = setup
    hdl = h.load(params, COUNTER)

    def worker():
        for _ in range(200):
            h.run(hdl, b"inc")

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert h.run(hdl, b"get") == b"800"


def test_state_not_exposed(setup):
    params, h = setup
    # the public API surface has no accessor for T[hdl]
    public = {n for n in dir(h) if not n.startswith("_")}
    assert public == {"load", "run", "run_quote", "measurement", "params", "platform"}


def test_game_honest_and_replay():
    res = hw.unforgeability_game(200, hw.ReplayAdversary())
    assert res.accepted == 0 and res.replays == 200 and res.honest_failures == 0


def test_game_mauled():
    res = hw.unforgeability_game(200, hw.MauledForger(random.Random(1)))
    assert res.accepted == 0 and res.honest_failures == 0


def test_game_random_small():
    res = hw.unforgeability_game(2000, hw.RandomForger(random.Random(2)))
    assert res.accepted == 0


def test_game_counts_forgeries():
    # a cheating adversary that can reach the signing key must be counted
    def cheater(oracle, i):
        body = hw.canonical_quote_bytes(b"m" * 48, b"t" * 32, b"in", i.to_bytes(4, "little"))
        sig = crypto.sign(oracle._hw._sk_quote, crypto.digest(body))
        return hw.Quote(b"m" * 48, b"t" * 32, b"in", i.to_bytes(4, "little"), sig)

    assert hw.unforgeability_game(5, cheater).accepted == 5
