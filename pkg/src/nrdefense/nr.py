"""The defended classifier: CNN features scored by the RBF-SVM, with a reject
option when the best score does not exceed ``s0``."""

from __future__ import annotations

import io
import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from nrdefense import nn, svm
from nrdefense.errors import ArgumentError, CalibrationError, FormatError

log = logging.getLogger(__name__)

REJECT = -1
MAGIC = b"NRC1"


def decide_from_scores(scores, s0):
    """Argmax class where the top score is strictly above ``s0``, else ``REJECT``."""
    scores = np.asarray(scores)
    top = scores.argmax(axis=-1)
    return np.where(scores.max(axis=-1) > s0, top, REJECT)


@dataclass
class NrClassifier:
    cnn: nn.CnnModel
    svm: svm.RbfSvmModel
    s0: float = -np.inf

    def __post_init__(self):
        if self.svm.feature_dim != self.cnn.feature_width:
            raise ArgumentError(
                f"SVM feature dimension {self.svm.feature_dim} != CNN feature width {self.cnn.feature_width}"
            )
        self.s0 = float(self.s0)

    @property
    def num_classes(self):
        return self.svm.num_classes

    def with_threshold(self, s0):
        return NrClassifier(self.cnn, self.svm, s0)

    def scores(self, x, batch_size=512):
        """SVM scores of the CNN features; ``(C,)`` for a frame, ``(N, C)`` for a batch."""
        x = np.asarray(x)
        if x.ndim == 2:
            return svm.decision_scores(self.svm, nn.features(self.cnn, x))
        if len(x) <= batch_size:
            return svm.decision_scores(self.svm, nn.features(self.cnn, x))
        return np.concatenate([self.scores(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])

    def decide(self, x):
        return decide_from_scores(self.scores(x), self.s0)

    def objective_gradients(self, x, y):
        """``grad_x (G_y - G_c)`` for every class ``c`` as a ``(C, 2, L)`` array.

        Row ``y`` is identically zero. One forward pass is shared by all rows.
        """
        xi = nn.features(self.cnn, x)
        g = svm.score_gradients(self.svm, xi)
        upstream = g[y][None, :] - g
        return nn.feature_input_vjp(self.cnn, x, upstream)


def classify(nr: NrClassifier, x):
    """Returns ``(decision, scores)``; decision is a class index or ``REJECT``."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ArgumentError("classify takes a single (2, L) frame; use classify_batch")
    scores = nr.scores(x)
    return int(decide_from_scores(scores, nr.s0)), scores


def classify_batch(nr: NrClassifier, frames):
    scores = nr.scores(np.asarray(frames))
    return decide_from_scores(scores, nr.s0), scores


@dataclass(frozen=True)
class Calibration:
    s0: float
    set_size: int
    rejected: int
    target_fraction: float
    degenerate: bool

    @property
    def realized_rate(self):
        return self.rejected / self.set_size


def calibrate_threshold(nr: NrClassifier, eval_set, reject_fraction: float = 0.10) -> Calibration:
    """Threshold that rejects ``reject_fraction`` of the correctly classified set.

    The correctly classified set is formed threshold-free (argmax of the
    scores equals the label). ``s0`` is the lower empirical quantile of
    the top scores, so the ``k = floor(fraction * n)`` lowest are rejected
    under the strict ``score > s0`` acceptance rule.
    """
    if not 0.0 < reject_fraction < 1.0:
        raise ArgumentError("reject_fraction must lie in (0, 1)")
    frames = np.asarray(eval_set.frames)
    labels = np.asarray(eval_set.labels)
    if len(frames) == 0:
        raise ArgumentError("evaluation set is empty")
    scores = nr.scores(frames)
    correct = scores.argmax(axis=1) == labels
    top = np.sort(scores.max(axis=1)[correct])
    n = len(top)
    if n == 0:
        raise CalibrationError("no example is correctly classified; cannot calibrate")
    k = int(np.floor(reject_fraction * n + 1e-9))
    s0 = float(np.nextafter(top[0], -np.inf)) if k == 0 else float(top[k - 1])
    rejected = int(np.sum(top <= s0))
    degenerate = rejected != k
    if degenerate:
        warnings.warn(f"tied scores: threshold rejects {rejected} of {n}, target was {k}", RuntimeWarning)
    log.info("calibrated s0=%.6g rejecting %d of %d correctly classified", s0, rejected, n)
    return Calibration(s0, n, rejected, reject_fraction, degenerate)


def attack_objective(nr: NrClassifier, x, y: int, t: int):
    """``L = G_y(x) - G_t(x)`` and its input gradient via the chain rule."""
    if y == t:
        raise ArgumentError("true and target class must differ")
    xi = nn.features(nr.cnn, x)
    s = svm.decision_scores(nr.svm, xi)
    upstream = svm.score_gradient(nr.svm, xi, y) - svm.score_gradient(nr.svm, xi, t)
    return float(s[y] - s[t]), nn.feature_input_vjp(nr.cnn, x, upstream)


# --- NRC1 bundle ---------------------------------------------------------------

def to_bytes(nr: NrClassifier) -> bytes:
    cnn_bytes = nn.model_to_bytes(nr.cnn)
    svm_bytes = svm.model_to_bytes(nr.svm)
    return b"".join([
        MAGIC, struct.pack("<d", nr.s0),
        struct.pack("<Q", len(cnn_bytes)), cnn_bytes,
        struct.pack("<Q", len(svm_bytes)), svm_bytes,
    ])


def from_bytes(data: bytes) -> NrClassifier:
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    if len(data) < 20:
        raise FormatError("truncated header", len(data))
    (s0,) = struct.unpack_from("<d", data, 4)
    off = 12
    blobs = []
    for what in ("CNN", "SVM"):
        if len(data) < off + 8:
            raise FormatError(f"truncated {what} length", off)
        (n,) = struct.unpack_from("<Q", data, off)
        off += 8
        if len(data) < off + n:
            raise FormatError(f"truncated {what} block", off)
        blobs.append(data[off : off + n])
        off += n
    if off != len(data):
        raise FormatError("trailing bytes", off)
    return NrClassifier(nn.model_from_bytes(blobs[0]), svm.model_from_bytes(blobs[1]), s0)


def save(nr: NrClassifier, path) -> None:
    Path(path).write_bytes(to_bytes(nr))


def load(path) -> NrClassifier:
    return from_bytes(Path(path).read_bytes())
