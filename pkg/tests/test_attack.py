import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nrdefense import attack, nn, nr
from nrdefense.dataset import GenerationConfig, generate_dataset
from nrdefense.errors import ArgumentError, ConfigurationError, FormatError

from conftest import tiny_model


class Stubborn:
    """Always answers ``label``; gradients are arbitrary but non-zero."""

    num_classes = 3

    def __init__(self, label=0):
        self.label = label

    def decide(self, frames):
        return np.full(len(frames), self.label)

    def objective_gradients(self, x, y):
        g = np.ones((3,) + x.shape)
        g[y] = 0.0
        return g


class HalfSpace:
    """Class 1 when ``w . x > thr`` else class 0; the objective for class 1 is ``-w . x``."""

    num_classes = 2

    def __init__(self, w, thr):
        self.w, self.thr = np.asarray(w, float), float(thr)

    def decide(self, frames):
        return (np.einsum("nij,ij->n", frames, self.w) > self.thr).astype(int)

    def objective_gradients(self, x, y):
        g = np.zeros((2,) + x.shape)
        g[1 - y] = -self.w if y == 0 else self.w
        return g


class Fixed:
    num_classes = 3

    def __init__(self, decisions):
        self.decisions = np.asarray(decisions)

    def decide(self, frames):
        return self.decisions[: len(frames)]


def test_epsilon_hand_values():
    assert attack.epsilon_from_pnr(0, 10, 1.0) == pytest.approx(0.301511, abs=1e-6)
    assert attack.epsilon_from_pnr(0, 10, 1.0) == pytest.approx(math.sqrt(1 / 11), rel=1e-15)
    assert attack.epsilon_from_pnr(10, 10, 2.0) == pytest.approx(1.906925, abs=1e-6)
    assert attack.epsilon_from_pnr(-3, 7, 0.0) == 0.0


def test_projection_examples():
    v = np.array([0.3, 0.0, 0.4])
    np.testing.assert_array_equal(attack.project_l2(v, 1.0), v)
    np.testing.assert_allclose(attack.project_l2([3.0, 4.0, 0.0, 0.0], 1.0), [0.6, 0.8, 0.0, 0.0], rtol=1e-15)
    np.testing.assert_array_equal(attack.project_l2(np.zeros(5), 1.0), 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(1e-3, 10))
def test_projection_lands_in_ball(values, eps):
    p = attack.project_l2(np.array(values), eps)
    assert np.linalg.norm(p) <= eps * (1 + 1e-12)


def test_bisection_step_count():
    assert attack.bisection_steps(1.0, 1e-3) == 10
    assert attack.bisection_steps(1.0, 0.5) == 1
    with pytest.raises(ConfigurationError):
        attack.FgmConfig(eps_acc=1.0, p_max=1.0)


def test_unfoolable_model_keeps_p_max():
    x = np.zeros((2, 8))
    res = attack.fgm_minimal_perturbation(Stubborn(0), x, 0, attack.FgmConfig(1e-3, 1.0))
    np.testing.assert_array_equal(res.eps_max, 1.0)
    assert res.eps_star == 1.0
    assert list(res.iterations) == [0, 10, 10]
    assert res.skipped == []


def test_zero_gradient_classes_are_skipped():
    x = np.zeros((2, 4))
    sys_ = HalfSpace(np.ones((2, 4)), 1.0)
    res = attack.fgm_minimal_perturbation(sys_, x, 0, attack.FgmConfig(1e-3, 1.0))
    assert res.skipped == [] and res.iterations[0] == 0

    class Flat(HalfSpace):
        def objective_gradients(self, x, y):
            return np.zeros((2,) + x.shape)

    res = attack.fgm_minimal_perturbation(Flat(np.ones((2, 4)), 1.0), x, 0, attack.FgmConfig(1e-3, 1.0))
    assert res.skipped == [1] and res.eps_star == 1.0
    np.testing.assert_array_equal(res.r_x, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.9))
def test_half_space_minimal_step_matches_geometry(seed, frac):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(2, 4))
    x = rng.normal(size=(2, 4))
    p_max = 2.0
    gap = frac * p_max * np.linalg.norm(w)  # distance so that the exact step is frac * p_max
    sys_ = HalfSpace(w, float(np.sum(w * x)) + gap)
    cfg = attack.FgmConfig(1e-3, p_max)
    res = attack.fgm_minimal_perturbation(sys_, x, 0, cfg)
    exact = frac * p_max
    assert res.target == 1
    assert res.eps_min[1] <= exact <= res.eps_max[1]
    assert res.eps_max[1] - res.eps_min[1] <= cfg.eps_acc
    np.testing.assert_allclose(np.linalg.norm(res.directions[1]), 1.0, rtol=1e-12)
    np.testing.assert_allclose(res.r_x, -res.eps_star * res.directions[1])
    assert sys_.decide((x + res.r_x)[None])[0] == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_bisection_contract_on_random_networks(seed):
    rng = np.random.default_rng(seed)
    system = attack.UndefendedClassifier(tiny_model(seed=seed % 5))
    x = rng.normal(size=(2, 16))
    y = int(system.decide(x[None])[0])
    cfg = attack.FgmConfig(1e-3, 1.0)
    res = attack.fgm_minimal_perturbation(system, x, y, cfg)
    n = attack.bisection_steps(cfg.p_max, cfg.eps_acc)
    for c in range(3):
        if c == y or c in res.skipped:
            assert res.iterations[c] == 0
            continue
        assert res.iterations[c] == n
        assert res.eps_max[c] - res.eps_min[c] == cfg.p_max / 2**n
        d = res.directions[c]
        if res.eps_min[c] > 0:
            assert not attack.evades(system.decide((x - res.eps_min[c] * d)[None]), y)[0]
        if res.eps_max[c] < cfg.p_max:
            assert attack.evades(system.decide((x - res.eps_max[c] * d)[None]), y)[0]
    assert res.eps_star == res.eps_max.min() or res.eps_star == cfg.p_max


def test_fooling_rate_counts_and_oracle(tiny_nr, tiny_split):
    batch = (np.zeros((4, 2, 4)), np.array([0, 1, 2, 0]))
    assert attack.fooling_rate(Fixed([0, 1, 2, 2]), batch, np.zeros((2, 4))) == 0.25
    # rejected frames do not count as fooled
    assert attack.fooling_rate(Fixed([nr.REJECT, 1, 2, 0]), batch, np.zeros((2, 4))) == 0.0
    with pytest.raises(ArgumentError):
        attack.fooling_rate(Fixed([]), (np.zeros((0, 2, 4)), np.zeros(0)), np.zeros((2, 4)))
    v = np.random.default_rng(0).normal(size=(2, 16)) * 0.5
    frames, labels = tiny_split.test.frames[:20], tiny_split.test.labels[:20]
    count = 0
    for f, y in zip(frames, labels):
        d, _ = nr.classify(tiny_nr, f.astype(np.float64) + v)
        count += d != y and d != nr.REJECT
    assert attack.fooling_rate(tiny_nr, (frames, labels), v) == count / 20


def test_undefended_gradients_are_logit_differences():
    cnn = tiny_model(seed=2)
    system = attack.UndefendedClassifier(cnn)
    x = np.random.default_rng(1).normal(size=(2, 16))
    g = system.objective_gradients(x, 1)
    assert not np.any(g[1])
    for c in (0, 2):
        u = np.zeros(3)
        u[1], u[c] = 1.0, -1.0
        np.testing.assert_allclose(g[c], nn.logits_input_vjp(cnn, x, u), rtol=1e-12, atol=1e-15)


def test_uap_exits_at_once_when_target_is_already_met():
    # one sample already misclassified: Err(X_0) = 1/4 exceeds 1 - delta for delta near 1
    batch = (np.zeros((4, 2, 4)), np.array([1, 0, 0, 0]))
    uap = attack.compute_uap(Stubborn(0), batch, attack.UapConfig(1.0, delta=1 - 1e-9),
                             attack.FgmConfig(1e-3, 1.0))
    np.testing.assert_array_equal(uap.v, 0.0)
    assert uap.passes == 0 and uap.converged and uap.fooling_rate == 0.25


def test_uap_not_converged_returns_best_vector():
    batch = (np.random.default_rng(0).normal(size=(3, 2, 4)), np.zeros(3, int))
    uap = attack.compute_uap(Stubborn(0), batch, attack.UapConfig(0.5, 0.2, max_passes=3),
                             attack.FgmConfig(1e-3, 0.5))
    assert not uap.converged and uap.passes == 3
    assert uap.norm <= 0.5 + 1e-9 and uap.fooling_rate == 0.0
    assert uap.history == [0.0, 0.0, 0.0, 0.0]


def test_uap_budget_holds_after_every_update(monkeypatch, tiny_nr, tiny_split):
    eps = 0.8
    seen = []
    real = attack.project_l2

    def checked(v, e):
        out = real(v, e)
        seen.append(np.linalg.norm(out))
        return out

    monkeypatch.setattr(attack, "project_l2", checked)
    batch = tiny_split.train.take(np.arange(10))
    uap = attack.compute_uap(tiny_nr, batch, attack.UapConfig(eps, 0.2, 3), attack.FgmConfig.for_budget(eps))
    assert seen and max(seen) <= eps + 1e-9
    assert uap.norm <= eps + 1e-9
    assert uap.v.astype(np.float32).astype(np.float64).tobytes() == uap.v.tobytes()


def test_uap_guard_on_random_network():
    split = generate_dataset(GenerationConfig(snrs_db=(10,), per_cell=1, frame_len=128, seed=5))
    cnn = nn.build_model(nn.compact_layers(), 128, 11, seed=3)
    frames = np.asarray(split.train.frames[:10], np.float64)
    labels = nn.predict(cnn, frames)  # batch is perfectly "classified" before the attack
    eps = attack.epsilon_from_pnr(0, 10, float(np.mean(np.linalg.norm(frames.reshape(10, -1), axis=1))))
    uap = attack.compute_uap_dnn(cnn, (frames, labels), attack.UapConfig(eps, delta=0.5, max_passes=10),
                                 attack.FgmConfig.for_budget(eps))
    assert uap.history[0] == 0.0
    assert uap.converged and uap.fooling_rate > 0.5
    recount = np.mean([nn.predict(cnn, f + uap.v) != y for f, y in zip(frames, labels)])
    assert recount == uap.fooling_rate
    assert uap.norm <= eps + 1e-9


def test_perturbation_budget_is_enforced():
    with pytest.raises(ArgumentError):
        attack.PerturbationVector(np.ones((2, 4)), 1.0)


def test_perturbation_file_round_trip(tmp_path):
    v = attack.project_l2(np.random.default_rng(0).normal(size=(2, 128)), 1.9).astype(np.float32)
    p = attack.PerturbationVector(v.astype(np.float64), 2.0, fooling_rate=0.5)
    path = tmp_path / "v.nrv"
    attack.save_perturbation(p, path)
    back = attack.load_perturbation(path)
    assert back.v.tobytes() == p.v.tobytes() and back.eps_budget == 2.0
    assert attack.perturbation_to_bytes(back) == path.read_bytes()
    with pytest.raises(FormatError):
        attack.perturbation_from_bytes(b"NRV0" + path.read_bytes()[4:])
    with pytest.raises(FormatError):
        attack.perturbation_from_bytes(path.read_bytes()[:-1])


def test_config_validation():
    with pytest.raises(ConfigurationError):
        attack.UapConfig(1.0, delta=1.0)
    with pytest.raises(ConfigurationError):
        attack.UapConfig(0.0)
    with pytest.raises(ConfigurationError):
        attack.UapConfig(1.0, max_passes=0)
    assert attack.FgmConfig.for_budget(2.0) == attack.FgmConfig(2e-3, 2.0)

