import numpy as np
import pytest

from nrdefense import nn, nr, svm
from nrdefense.dataset import GenerationConfig, Modulation, generate_dataset

_LINES = pytest.StashKey[list]()

TINY_SCHEMES = (Modulation.BPSK, Modulation.QPSK, Modulation.PSK8)


def tiny_layers(num_classes=3, hidden=8):
    return [
        nn.conv2d(4, (1, 3), (0, 2)), nn.relu(),
        nn.conv2d(3, (2, 3), (0, 2)), nn.relu(),
        nn.flatten(),
        nn.dense(hidden), nn.relu(),
        nn.dense(num_classes),
        nn.softmax(),
    ]


def tiny_model(seed=0, frame_len=16, num_classes=3):
    return nn.build_model(tiny_layers(num_classes), frame_len, num_classes, seed=seed)


def pattern_stable(model, x, d, h):
    """True when the ReLU patterns at x - h*d, x and x + h*d all agree."""
    ref = nn.relu_masks(model, x)
    for sign in (-1.0, 1.0):
        other = nn.relu_masks(model, x + sign * h * d)
        if any(not np.array_equal(a, b) for a, b in zip(ref, other)):
            return False
    return True


@pytest.fixture(scope="session")
def tiny_split():
    return generate_dataset(GenerationConfig(schemes=TINY_SCHEMES, snrs_db=(10,), per_cell=24,
                                             frame_len=16, seed=3))


@pytest.fixture(scope="session")
def tiny_nr(tiny_split):
    cnn = nn.train(tiny_model(seed=1), tiny_split,
                   nn.TrainConfig(epochs=5, batch_size=16, learning_rate=0.01, optimizer="adam", seed=1))
    feats = nn.features(cnn, tiny_split.train.frames)
    model = svm.train_ova(feats, tiny_split.train.labels, C_reg=1.0, gamma=0.5)
    clf = nr.NrClassifier(cnn, model)
    cal = nr.calibrate_threshold(clf, tiny_split.test, 0.10)
    return clf.with_threshold(cal.s0)


@pytest.fixture
def record_criterion(request):
    """Append a PASS/FAIL line that is echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(label, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}" + (f": {detail}" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
