import os

import numpy as np
import pytest

import oracles
from mlcapsule import crypto
from mlcapsule.errors import (
    IntegrityFailure,
    MemoryBudgetExceeded,
    ParseError,
    SchemaError,
    ShapeMismatch,
)
from mlcapsule.nn import capsule, zoo
from mlcapsule.nn.model import (
    SOFTMAX,
    LayerSpec,
    ModelDef,
    ModelSecrets,
    dense,
    export_weights,
    forward,
    forward_layers,
    import_weights,
)
from mlcapsule.nn.weights import decode_tensors, encode_tensors


@pytest.fixture
def seal_ctx():
    m = crypto.digest(b"capsule tests")
    return crypto.Platform(os.urandom(32)).seal_key(m), m


def test_modeldef_json_roundtrip():
    for build in (zoo.toy_cnn, zoo.detector_cnn, lambda: zoo.mobilenet(32, 8, 10),
                  lambda: zoo.vgg16(32, 16, 10)):
        d = build()
        assert ModelDef.from_json(d.to_json()) == d
        assert ModelDef.from_json(d.to_json(indent=2)) == d


def test_modeldef_validation():
    with pytest.raises(SchemaError):
        ModelDef((4,), (dense(3),), 3)  # no softmax
    with pytest.raises(SchemaError):
        ModelDef((4,), (dense(3), SOFTMAX), 4)  # class count mismatch
    with pytest.raises(SchemaError):
        ModelDef((4,), (LayerSpec("conv2d", filters=2, kernel=(3, 3)), SOFTMAX), 2)
    with pytest.raises(SchemaError):
        ModelDef((1, 2, 2), (LayerSpec("maxpool", size=3, stride=3), dense(2), SOFTMAX), 2)
    with pytest.raises(SchemaError):
        LayerSpec("batchnorm")
    with pytest.raises(SchemaError):
        ModelDef((4,), (), 4)
    with pytest.raises(ParseError):
        ModelDef.from_json("{not json")
    with pytest.raises(SchemaError):
        ModelDef.from_json('{"format": "other"}')


def test_chain_shapes():
    d = zoo.detector_cnn()
    shapes = [r.out_shape for r in d.resolved]
    assert shapes[:6] == [(10, 24, 24), (10, 24, 24), (10, 12, 12), (20, 8, 8), (20, 8, 8), (20, 4, 4)]
    assert shapes[-1] == (2,)
    for a, b in zip(d.resolved, d.resolved[1:]):
        assert a.out_shape == b.in_shape


def test_mobilenet_and_vgg_full_size_shapes():
    assert zoo.vgg16().param_count() == 138_357_544
    m = zoo.mobilenet()
    assert m.resolved[-3].out_shape == (1024, 1, 1)
    # conv weights of MobileNet v1 without BN: ~4.2M
    assert 4_000_000 < m.param_count() < 4_300_000


def test_weights_format_layout():
    t = [np.arange(6, dtype=np.float32).reshape(2, 3), np.array([1.5], dtype=np.float32)]
    raw = encode_tensors(t)
    assert raw[:4] == b"MLCW"
    assert raw[4:6] == (1).to_bytes(2, "little") and raw[6:10] == (2).to_bytes(4, "little")
    assert raw[10:12] == bytes([0, 2])
    assert raw[12:20] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.frombuffer(raw[20:44], "<f4").tolist() == [0, 1, 2, 3, 4, 5]
    back = decode_tensors(raw)
    assert all(np.array_equal(a, b) for a, b in zip(t, back))


def test_weights_truncated_and_bad():
    raw = encode_tensors([np.ones((3, 3), np.float32)])
    for cut in (0, 3, 9, 15, len(raw) - 1):
        with pytest.raises(ParseError):
            decode_tensors(raw[:cut])
    with pytest.raises(ParseError):
        decode_tensors(raw + b"\x00")
    bad = bytearray(raw)
    bad[10] = 1  # dtype
    with pytest.raises(ParseError):
        decode_tensors(bytes(bad))


def test_import_export_identity(tmp_path):
    d = zoo.toy_cnn()
    s = ModelSecrets.random(d, np.random.default_rng(0))
    export_weights(d, s, tmp_path / "w.mlcw", tmp_path / "d.json")
    d2, s2 = import_weights(tmp_path / "w.mlcw", tmp_path / "d.json")
    assert d2 == d
    export_weights(d2, s2, tmp_path / "w2.mlcw", tmp_path / "d2.json")
    assert (tmp_path / "w.mlcw").read_bytes() == (tmp_path / "w2.mlcw").read_bytes()
    assert (tmp_path / "d.json").read_bytes() == (tmp_path / "d2.json").read_bytes()


def test_import_shape_mismatch(tmp_path):
    d = zoo.mlp(4, (3,), 2)
    s = ModelSecrets.random(zoo.mlp(4, (5,), 2), np.random.default_rng(0))
    (tmp_path / "w").write_bytes(s.to_bytes())
    (tmp_path / "d").write_text(d.to_json())
    with pytest.raises(SchemaError):
        import_weights(tmp_path / "w", tmp_path / "d")
    (tmp_path / "w").write_bytes(s.to_bytes()[:-3])
    with pytest.raises(ParseError):
        import_weights(tmp_path / "w", tmp_path / "d")


def test_secrets_nbytes_matches_encoding():
    for d in (zoo.toy_cnn(), zoo.mlp(7, (5, 3), 4)):
        s = ModelSecrets.random(d, np.random.default_rng(1))
        assert d.secrets_nbytes() == len(s.to_bytes())


def test_forward_identity_model():
    d = ModelDef((4,), (dense(4), SOFTMAX), 4)
    s = ModelSecrets([(np.eye(4, dtype=np.float32) * 10, np.zeros(4, np.float32))])
    for hot in range(4):
        x = np.zeros(4, np.float32)
        x[hot] = 1
        assert forward(d, s, x).argmax() == hot


def test_forward_shape_mismatch():
    d = zoo.mlp(4, (3,), 2)
    s = ModelSecrets.random(d, np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        forward(d, s, np.zeros(5))


def test_layerwise_equals_monolithic():
    d = zoo.toy_cnn()
    s = ModelSecrets.random(d, np.random.default_rng(2))
    x = np.random.default_rng(3).normal(size=d.input_shape)
    acts = list(forward_layers(d, s, x))
    np.testing.assert_array_equal(acts[-1], forward(d, s, x))


@pytest.mark.parametrize("build", [zoo.toy_cnn, zoo.detector_cnn, lambda: zoo.mobilenet(32, 16, 5)])
def test_forward_vs_reference_implementation(build):
    d = build()
    rng = np.random.default_rng(4)
    s = ModelSecrets.random(d, rng)
    x = rng.normal(size=d.input_shape).astype(np.float32)
    want = oracles.reference_forward(d, s.params, x)
    got = forward(d, s, x)
    assert np.abs(got - want).max() <= 1e-5


def test_posterior_validity_random_models():
    rng = np.random.default_rng(5)
    for _ in range(30):
        d = zoo.mlp(int(rng.integers(1, 20)), tuple(int(h) for h in rng.integers(1, 30, rng.integers(0, 3))),
                    int(rng.integers(2, 12)))
        s = ModelSecrets.random(d, rng, scale=float(rng.uniform(0.1, 3)))
        p = forward(d, s, rng.normal(size=d.input_shape))
        assert np.all(p >= 0) and abs(float(p.astype(np.float64).sum()) - 1) <= 1e-6


# -- capsule layers ------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_capsule_equals_plain(seal_ctx, seed):
    key, m = seal_ctx
    rng = np.random.default_rng(seed)
    d = [zoo.toy_cnn(), zoo.detector_cnn(), zoo.mlp(12, (8, 8), 3)][seed]
    s = ModelSecrets.random(d, rng)
    layers = capsule.seal_model(d, s, key, m)
    for _ in range(3):
        x = rng.normal(size=d.input_shape).astype(np.float32)
        got = capsule.capsule_forward(layers, key, m, x)
        want = forward(d, s, x)
        assert np.abs(got - want).max() <= 1e-6


def test_capsule_wipes_unsealed_parameters(seal_ctx):
    key, m = seal_ctx
    d = zoo.toy_cnn()
    s = ModelSecrets.random(d, np.random.default_rng(0))
    log = []
    capsule.capsule_forward(capsule.seal_model(d, s, key, m), key, m, np.ones(d.input_shape), scratch_log=log)
    assert len(log) == len(d.parameterized)
    assert all(len(buf) > 0 and not any(buf) for buf in log)


def test_capsule_tampered_layer(seal_ctx):
    key, m = seal_ctx
    d = zoo.mlp(6, (5, 4), 3)
    s = ModelSecrets.random(d, np.random.default_rng(0))
    layers = capsule.seal_model(d, s, key, m)
    blob = bytearray(layers[2].blob)  # second dense layer
    blob[40] ^= 1
    layers[2] = capsule.CapsuleLayer(layers[2].layer, bytes(blob))
    with pytest.raises(IntegrityFailure):
        capsule.capsule_forward(layers, key, m, np.ones(6))


def test_capsule_empty_and_shape(seal_ctx):
    key, m = seal_ctx
    with pytest.raises(SchemaError):
        capsule.capsule_forward([], key, m, np.ones(3))
    d = zoo.mlp(6, (5,), 3)
    layers = capsule.seal_model(d, ModelSecrets.random(d, np.random.default_rng(0)), key, m)
    with pytest.raises(ShapeMismatch):
        capsule.capsule_forward(layers, key, m, np.ones(7))


def test_capsule_memory_budget(seal_ctx):
    key, m = seal_ctx
    d = zoo.mlp(256, (256,), 2)
    layers = capsule.seal_model(d, ModelSecrets.random(d, np.random.default_rng(0)), key, m)
    need = capsule.working_set(layers[0])
    assert need >= 256 * 256 * 4
    capsule.capsule_forward(layers, key, m, np.ones(256), budget=need)
    with pytest.raises(MemoryBudgetExceeded):
        capsule.capsule_forward(layers, key, m, np.ones(256), budget=need - 1)


def test_dense_4096_fits_90mb_only_when_chunked(seal_ctx):
    key, m = seal_ctx
    d = ModelDef((4096,), (dense(4096), SOFTMAX), 4096)
    r = d.resolved[0]
    params = (np.zeros((4096, 4096), np.float32), np.zeros(4096, np.float32))
    layer = capsule.seal_layer(r, params, key, m)
    assert capsule.working_set(layer) < capsule.DEFAULT_MEMORY_BUDGET
    unchunked = capsule.seal_layer(r, params, key, m, chunk_size=80 * crypto.MIB)
    assert capsule.working_set(unchunked) > capsule.DEFAULT_MEMORY_BUDGET
