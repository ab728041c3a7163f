import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from mlcapsule.errors import ConfigError, ShapeMismatch
from mlcapsule.defense import datasets, membership as M, redetect, stealing as S
from mlcapsule.defense.experiments import membership_eval, redetect_eval, stealing_eval


def _random_posteriors(rng, n, k):
    logits = rng.normal(scale=rng.uniform(0.1, 6), size=(n, k))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# -- entropy and noising -------------------------------------------------------------

def test_entropy_values():
    assert M.entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-12)
    assert M.entropy([1.0, 0.0, 0.0]) == 0.0
    want = -0.75 * math.log(0.75) - 0.25 * math.log(0.25)
    assert M.entropy([0.75, 0.25]) == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(0.5623, abs=1e-4)


def test_entropy_matches_oracle_and_bounds():
    rng = np.random.default_rng(0)
    for p in _random_posteriors(rng, 200, 7):
        h = M.entropy(p)
        assert abs(h - oracles.entropy(p)) < 1e-9
        assert 0 <= h <= math.log(7) + 1e-12


def test_noise_analytic_cases():
    u = np.full(5, 0.2)
    np.testing.assert_array_equal(M.noise_posterior(u, M.NoiseConfig.uniform(0.7, 5)), u)
    out = M.noise_posterior([1.0, 0.0], M.NoiseConfig.uniform(0.5, 2))
    assert np.abs(out - [0.75, 0.25]).max() <= 1e-7
    p = np.array([0.6, 0.3, 0.1])
    np.testing.assert_array_equal(M.noise_posterior(p, M.NoiseConfig.uniform(0.0, 3)), p)


def test_noise_config_validation():
    with pytest.raises(ConfigError):
        M.NoiseConfig(1.5, (0.5, 0.5))
    with pytest.raises(ConfigError):
        M.NoiseConfig(0.5, (0.7, 0.7))
    with pytest.raises(ShapeMismatch):
        M.noise_posterior([0.5, 0.5], M.NoiseConfig.uniform(0.5, 3))


def test_noise_is_valid_and_preserves_argmax_with_uniform_T():
    rng = np.random.default_rng(1)
    for k in (2, 5, 10):
        P = _random_posteriors(rng, 300, k)
        for c in (0.1, 0.5, 0.99):
            Q = M.noise_posterior(P, M.NoiseConfig.uniform(c, k))
            assert np.all(Q >= 0) and np.abs(Q.sum(axis=1) - 1).max() <= 1e-12
            assert np.array_equal(Q.argmax(axis=1), P.argmax(axis=1))


def test_skewed_T_can_flip_argmax():
    p = np.array([0.9, 0.1])
    q = M.noise_posterior(p, M.NoiseConfig(1.0, (0.0, 1.0)))
    assert q.argmax() == 1


def test_estimation_error_identity():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 12))
        p = _random_posteriors(rng, 1, k)[0]
        T = _random_posteriors(rng, 1, k)[0]
        c = float(rng.uniform())
        d = int(rng.integers(0, k))
        q = M.noise_posterior(p, M.NoiseConfig(c, tuple(T)))
        lhs = M.estimation_error(p, q, d)
        rhs = c * M.noise_magnitude(p) * abs(p[d] - T[d])
        worst = max(worst, abs(lhs - rhs))
    assert worst <= 1e-7


def test_estimation_error_simple():
    p = [1.0, 0.0]
    assert M.estimation_error(p, M.noise_posterior(p, M.NoiseConfig.uniform(0.0, 2)), 0) == 0.0
    assert M.estimation_error(p, M.noise_posterior(p, M.NoiseConfig.uniform(0.5, 2)), 0) == pytest.approx(0.25)


def test_jsd_properties():
    assert M.jsd([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert M.jsd([1.0, 0.0], [0.0, 1.0]) == pytest.approx(2 * math.log(2), abs=1e-12)
    rng = np.random.default_rng(3)
    P, Q = _random_posteriors(rng, 100, 6), _random_posteriors(rng, 100, 6)
    np.testing.assert_allclose(M.jsd(P, Q), M.jsd(Q, P), atol=1e-14)
    assert np.all(M.jsd(P, Q) <= 2 * math.log(2) + 1e-12)


def test_auc_extremes():
    assert M.entropy_attack_auc([[1.0, 0.0]] * 5, [[0.5, 0.5]] * 7) == 1.0
    same = [[0.7, 0.3]] * 4
    assert M.entropy_attack_auc(same, same) == 0.5
    with pytest.raises(ConfigError):
        M.entropy_attack_auc(np.zeros((0, 2)), same)


def test_auc_matches_threshold_sweep():
    rng = np.random.default_rng(4)
    mem, non = _random_posteriors(rng, 100, 4), _random_posteriors(rng, 100, 4)
    mem = np.vstack([mem, mem[:10]])  # include ties
    want = oracles.auc_threshold_sweep([-oracles.entropy(p) for p in mem], [-oracles.entropy(p) for p in non])
    assert M.entropy_attack_auc(mem, non) == pytest.approx(want, abs=1e-12)


def test_parse_grid():
    g = M.parse_grid("0:0.5:0.05")
    assert len(g) == 11 and g[0] == 0 and g[-1] == 0.5
    assert M.parse_grid("0,0.2") == [0.0, 0.2]


def test_membership_eval_shape_and_monotonicity():
    res = membership_eval()
    assert res.train_acc - res.test_acc >= 0.3
    auc = [r.auc for r in res.rows]
    assert auc[0] >= 0.75 and auc[-1] <= 0.6
    assert max(np.diff(auc)) <= 0.02
    assert np.all(np.diff([r.jsd_mean for r in res.rows]) >= 0)
    assert np.all(np.diff([r.est_err_mean for r in res.rows]) >= 0)
    csv_text = M.rows_to_csv(res.rows)
    assert csv_text.splitlines()[0] == "c,auc,jsd_mean,est_err_mean" and len(csv_text.splitlines()) == 12


def test_membership_degenerate_split():
    with pytest.raises(ConfigError):
        M.membership_sweep(np.zeros((0, 2)), [], [[0.5, 0.5]], [0], (0.5, 0.5), [0.0])


# -- stealing detection ----------------------------------------------------------------

def test_archive_first_and_duplicate():
    a = S.QueryArchive(3, tau=0.1)
    assert a.update([0, 0, 0])
    assert not a.update([0, 0, 0])
    assert len(a) == 1
    with pytest.raises(ShapeMismatch):
        a.update([1, 2])


def test_archive_grid_all_appended():
    tau = 0.5
    pts = [(2 * tau * i, 2 * tau * j) for i in range(10) for j in range(10)]
    a = S.QueryArchive(2, tau, capacity=4)
    assert all(a.update(p) for p in pts)
    assert len(a) == 100


@settings(max_examples=25, deadline=None)
@given(st.randoms(use_true_random=False))
def test_archive_permutation_invariance(r):
    pts = [(float(i), float(j), 0.0) for i in range(5) for j in range(4)]
    order = list(pts)
    r.shuffle(order)
    a = S.QueryArchive(3, tau=0.9)
    for p in order:
        a.update(p)
    assert {tuple(map(float, row)) for row in a.points} == set(pts)


def test_alarm_rule():
    assert S.stealing_alarm([True] * 10, 10, 0.5) == S.BENIGN
    assert S.stealing_alarm([True] * 10 + [False] * 10, 10, 0.5) == S.ATTACK
    with pytest.raises(ConfigError):
        S.stealing_alarm([True] * 5, 10, 0.5)


def test_stealing_streams():
    r = stealing_eval(queries=5000)
    assert r.benign_alarms == 0
    assert r.first_attack_alarm is not None and r.first_attack_alarm < r.window
    text = S.rows_to_csv(r.attack_rows[:3])
    assert text.splitlines()[0] == "query_index,appended,alarm"


def test_archive_roundtrip_arrays():
    a = S.QueryArchive(2, 0.1)
    for p in [(0, 0), (1, 1), (0, 0)]:
        a.update(p)
    b = S.QueryArchive.from_arrays(*a.to_arrays(), tau=0.1)
    assert b.history == a.history and np.array_equal(b.points, a.points)
    assert not b.update((1, 1)) and b.update((5, 5))


# -- reverse-engineering detection ---------------------------------------------------

def test_redetect_proxy_accuracy(tmp_path):
    det, rep = redetect_eval()
    assert rep.accuracy >= 0.95
    assert rep.false_denials_train == 0
    assert rep.overhead_ms > 0
    det.save(tmp_path / "d.mlcw", tmp_path / "d.json")
    det2 = redetect.DetectorModel.load(tmp_path / "d.mlcw", tmp_path / "d.json")
    x = datasets.crafted_images(np.random.default_rng(9), 1)[0]
    assert det2.score(x) == det.score(x) == redetect.MALICIOUS


def test_redetect_imbalance_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        redetect.re_detector_train(datasets.benign_images(rng, 110), datasets.crafted_images(rng, 10))


def test_image_generators_deterministic():
    a = datasets.benign_images(np.random.default_rng(1), 3)
    b = datasets.benign_images(np.random.default_rng(1), 3)
    assert np.array_equal(a, b) and a.shape == (3, 1, 28, 28)
    assert all(x.min() >= 0 and x.max() <= 1 for x in itertools.chain(a, datasets.crafted_images(
        np.random.default_rng(2), 9)))
