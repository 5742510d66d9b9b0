import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nrdefense import nn
from nrdefense.dataset import Dataset, DatasetSplit
from nrdefense.errors import ArgumentError, ConfigurationError, FormatError, TrainingError

from conftest import pattern_stable, tiny_layers, tiny_model


def test_softmax_sums_to_one_and_is_shift_invariant():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 11)) * 30
    p = nn.softmax_probs(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(nn.softmax_probs(z + 123.0), p, atol=1e-12)
    np.testing.assert_allclose(nn.softmax_probs(np.zeros((1, 11))), 1 / 11, atol=1e-15)


def test_shapes_and_feature_layer():
    m = nn.build_model(nn.vtcnn2_layers(), 128, 11)
    assert m.feature_layer_index == 8 and m.logits_layer_index == 9
    assert m.feature_width == 256 and m.num_classes == 11
    x = np.random.default_rng(0).normal(size=(3, 2, 128))
    f, z, p = nn.forward(m, x)
    assert f.shape == (3, 256) and z.shape == (3, 11) and p.shape == (3, 11)
    f1, z1, _ = nn.forward(m, x[0])
    np.testing.assert_allclose(f1, f[0], rtol=1e-12)
    assert np.all(f >= 0)


def test_forward_is_deterministic():
    m = tiny_model()
    x = np.random.default_rng(1).normal(size=(4, 2, 16))
    assert nn.logits(m, x).tobytes() == nn.logits(m, x).tobytes()


def test_bad_layer_lists():
    with pytest.raises(ConfigurationError):
        nn.CnnModel([nn.dense(3), nn.relu()], (1, 2, 16))
    with pytest.raises(ConfigurationError):
        nn.LayerSpec("pool")


def test_vjp_is_linear_in_upstream():
    m = tiny_model(seed=4)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 16))
    u1, u2 = rng.normal(size=(2, m.feature_width))
    a, b = 1.7, -0.3
    lhs = nn.feature_input_vjp(m, x, a * u1 + b * u2)
    rhs = a * nn.feature_input_vjp(m, x, u1) + b * nn.feature_input_vjp(m, x, u2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)
    np.testing.assert_array_equal(nn.feature_input_vjp(m, x, np.zeros(m.feature_width)), 0.0)


def test_batched_upstreams_match_single_products():
    m = tiny_model(seed=5)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 16))
    u = rng.normal(size=(4, 3))
    batched = nn.logits_input_vjp(m, x, u)
    assert batched.shape == (4, 2, 16)
    for k in range(4):
        np.testing.assert_allclose(batched[k], nn.logits_input_vjp(m, x, u[k]), rtol=1e-12, atol=1e-15)
    with pytest.raises(ArgumentError):
        nn.logits_input_vjp(m, x, np.ones(5))


@pytest.mark.parametrize("layer", ["feature", "logits"])
def test_vjp_matches_finite_differences(layer):
    m = tiny_model(seed=6)
    rng = np.random.default_rng(4)
    idx = m.feature_layer_index if layer == "feature" else m.logits_layer_index
    out = nn.features if layer == "feature" else nn.logits
    h, checked = 1e-5, 0
    while checked < 30:
        x = rng.normal(size=(2, 16))
        d = rng.normal(size=(2, 16))
        d /= np.linalg.norm(d)
        if not pattern_stable(m, x, d, h):
            continue
        u = rng.normal(size=int(np.prod(m.shapes[idx + 1])))
        analytic = float(np.sum(nn.input_vjp(m, x, u, idx) * d))
        fd = float(u @ (out(m, x + h * d) - out(m, x - h * d))) / (2 * h)
        assert abs(fd - analytic) <= 1e-3 * max(abs(fd), abs(analytic), 1e-8)
        checked += 1


def _separable_split(n=64, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    frames = rng.normal(scale=0.3, size=(n, 2, 16))
    frames[:, 0, :] += np.where(labels == 0, 1.0, -1.0)[:, None]
    ds = Dataset(frames.astype(np.float32), labels, np.zeros(n, np.int64))
    return DatasetSplit(ds, ds)


def test_training_fits_a_separable_toy_set():
    split = _separable_split()
    m = tiny_model(seed=0, num_classes=2)
    cfg = nn.TrainConfig(epochs=50, batch_size=16, learning_rate=0.05, seed=0)
    trained = nn.train(m, split, cfg)
    acc = np.mean(nn.predict(trained, split.train.frames) == split.train.labels)
    assert acc >= 0.99
    assert len(trained.history) == 50
    assert trained.history[-1].train_loss < trained.history[0].train_loss


def test_adam_training_also_fits():
    split = _separable_split(seed=1)
    cfg = nn.TrainConfig(epochs=20, batch_size=16, learning_rate=0.01, optimizer="adam", seed=0)
    trained = nn.train(tiny_model(seed=2, num_classes=2), split, cfg)
    assert np.mean(nn.predict(trained, split.train.frames) == split.train.labels) >= 0.99


def test_zero_epochs_returns_initial_parameters():
    m = tiny_model(seed=3, num_classes=2)
    trained = nn.train(m, _separable_split(), nn.TrainConfig(epochs=0))
    assert trained == m and trained is not m


def test_training_is_seed_deterministic():
    split = _separable_split()
    cfg = nn.TrainConfig(epochs=3, batch_size=8, seed=11)
    a = nn.train(tiny_model(seed=1, num_classes=2), split, cfg)
    b = nn.train(tiny_model(seed=1, num_classes=2), split, cfg)
    assert nn.model_to_bytes(a) == nn.model_to_bytes(b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_training_raises():
    split = _separable_split()
    cfg = nn.TrainConfig(epochs=5, batch_size=8, learning_rate=1e30, seed=0)
    with pytest.raises(TrainingError):
        nn.train(tiny_model(num_classes=2), split, cfg)


def test_dropout_inactive_at_inference():
    m = nn.build_model(nn.compact_layers(num_classes=3), 16, 3, seed=0)
    x = np.random.default_rng(0).normal(size=(2, 2, 16))
    assert nn.logits(m, x).tobytes() == nn.logits(m, x).tobytes()


def test_parameters_stay_on_float32_grid():
    split = _separable_split()
    trained = nn.train(tiny_model(num_classes=2), split, nn.TrainConfig(epochs=2, batch_size=8))
    for p in trained.params:
        if p is not None:
            for a in p:
                np.testing.assert_array_equal(a, a.astype(np.float32).astype(np.float64))


def test_checkpoint_round_trip(tmp_path):
    m = nn.build_model(nn.compact_layers(num_classes=11), 128, 11, seed=8)
    path = tmp_path / "m.nrm"
    nn.save_model(m, path)
    back = nn.load_model(path)
    assert back == m
    x = np.random.default_rng(0).normal(size=(2, 2, 128))
    assert nn.logits(back, x).tobytes() == nn.logits(m, x).tobytes()
    assert nn.model_to_bytes(back) == path.read_bytes()


def test_checkpoint_errors():
    blob = nn.model_to_bytes(tiny_model())
    with pytest.raises(FormatError):
        nn.model_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        nn.model_from_bytes(blob[:-3])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_feature_vjp_zero_upstream_is_zero(seed):
    m = tiny_model(seed=seed % 7)
    x = np.random.default_rng(seed).normal(size=(2, 16))
    assert not np.any(nn.feature_input_vjp(m, x, np.zeros(m.feature_width)))


def test_tiny_layers_helper_topology():
    kinds = [s.kind for s in tiny_layers()]
    assert kinds[-2:] == ["dense", "softmax"]
