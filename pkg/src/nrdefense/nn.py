"""Small convolutional classifier with exact reverse-mode input gradients.

Frames enter as ``(N, 2, L)`` and are viewed as single-channel ``2 x L``
images. A model is a flat list of layers; parameterized layers hold float64
arrays whose values are kept on the float32 grid so checkpoints round-trip
exactly.
"""

from __future__ import annotations

import dataclasses
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from nrdefense.errors import ArgumentError, ConfigurationError, FormatError, TrainingError

log = logging.getLogger(__name__)

KINDS = ("conv2d", "dense", "relu", "softmax", "flatten", "dropout")
MAGIC = b"NRM1"
VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0  # conv2d filter count, or dense output width
    kernel: tuple = (1, 1)
    padding: tuple = (0, 0)
    rate: float = 0.0  # dropout

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "dense") and self.filters <= 0:
            raise ConfigurationError(f"{self.kind} needs a positive width")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ConfigurationError("dropout rate must lie in [0, 1)")


def conv2d(filters, kernel, padding=(0, 0)):
    return LayerSpec("conv2d", filters, tuple(kernel), tuple(padding))


def dense(units):
    return LayerSpec("dense", units)


def relu():
    return LayerSpec("relu")


def softmax():
    return LayerSpec("softmax")


def flatten():
    return LayerSpec("flatten")


def dropout(rate):
    return LayerSpec("dropout", rate=rate)


def vtcnn2_layers(num_classes=11, dropout_rate=0.5, conv1=256, conv2=80, hidden=256):
    """Two conv blocks, a hidden dense layer (the feature layer), logits, softmax."""
    return [
        conv2d(conv1, (1, 3), (0, 2)), relu(), dropout(dropout_rate),
        conv2d(conv2, (2, 3), (0, 2)), relu(), dropout(dropout_rate),
        flatten(),
        dense(hidden), relu(),
        dense(num_classes),
        softmax(),
    ]


def compact_layers(num_classes=11, dropout_rate=0.3):
    """Same topology as :func:`vtcnn2_layers` at a fraction of the cost."""
    return vtcnn2_layers(num_classes, dropout_rate, conv1=32, conv2=16, hidden=64)


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class CnnModel:
    """Layer list plus parameters.

    ``params[i]`` is ``(W, b)`` for conv2d/dense layers and ``None``
    otherwise. Activations at ``feature_layer_index`` are the features fed to
    the SVM: the last layer before the logits dense layer.
    """

    def __init__(self, layers, input_shape, params=None, seed=0):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = self._infer_shapes()
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = [None if p is None else (_f32(p[0]), _f32(p[1])) for p in params]
        if len(self.params) != len(self.layers):
            raise ConfigurationError("params must have one entry per layer")
        for i, (spec, p) in enumerate(zip(self.layers, self.params)):
            if (p is None) != (spec.kind not in ("conv2d", "dense")):
                raise ConfigurationError(f"layer {i}: parameter presence mismatch")
            if p is not None and not (np.all(np.isfinite(p[0])) and np.all(np.isfinite(p[1]))):
                raise ConfigurationError(f"layer {i}: non-finite parameters")
        self.logits_layer_index = len(self.layers) - 2
        idx = self.logits_layer_index - 1
        while idx >= 0 and self.layers[idx].kind == "dropout":
            idx -= 1
        self.feature_layer_index = idx
        self.history = []

    @property
    def num_classes(self):
        return self.layers[self.logits_layer_index].filters

    @property
    def feature_width(self):
        return int(np.prod(self.shapes[self.feature_layer_index + 1]))

    def _infer_shapes(self):
        if len(self.input_shape) != 3:
            raise ConfigurationError("input_shape must be (channels, height, width)")
        shapes = [self.input_shape]
        for i, spec in enumerate(self.layers):
            s = shapes[-1]
            if spec.kind == "conv2d":
                if len(s) != 3:
                    raise ConfigurationError(f"layer {i}: conv2d needs a 3-d input")
                c, h, w = s
                (kh, kw), (ph, pw) = spec.kernel, spec.padding
                ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
                if ho <= 0 or wo <= 0:
                    raise ConfigurationError(f"layer {i}: kernel larger than input")
                shapes.append((spec.filters, ho, wo))
            elif spec.kind == "flatten":
                shapes.append((int(np.prod(s)),))
            elif spec.kind == "dense":
                if len(s) != 1:
                    raise ConfigurationError(f"layer {i}: dense needs a flat input")
                shapes.append((spec.filters,))
            else:
                shapes.append(s)
        if len(self.layers) < 2 or self.layers[-1].kind != "softmax" or self.layers[-2].kind != "dense":
            raise ConfigurationError("model must end with dense(C) followed by softmax")
        if any(spec.kind == "softmax" for spec in self.layers[:-1]):
            raise ConfigurationError("softmax is only allowed as the final layer")
        return shapes

    def _init_params(self, rng):
        params = []
        for spec, s in zip(self.layers, self.shapes):
            if spec.kind == "conv2d":
                fan_in = s[0] * spec.kernel[0] * spec.kernel[1]
                w = rng.standard_normal((spec.filters, s[0], *spec.kernel)) * np.sqrt(2.0 / fan_in)
                params.append((w, np.zeros(spec.filters)))
            elif spec.kind == "dense":
                w = rng.standard_normal((s[0], spec.filters)) * np.sqrt(2.0 / s[0])
                params.append((w, np.zeros(spec.filters)))
            else:
                params.append(None)
        return params

    def copy(self):
        return CnnModel(self.layers, self.input_shape, [None if p is None else (p[0].copy(), p[1].copy()) for p in self.params])

    def __eq__(self, other):
        if not isinstance(other, CnnModel):
            return NotImplemented
        if self.layers != other.layers or self.input_shape != other.input_shape:
            return False
        for p, q in zip(self.params, other.params):
            if (p is None) != (q is None):
                return False
            if p is not None and not (np.array_equal(p[0], q[0]) and np.array_equal(p[1], q[1])):
                return False
        return True


def build_model(layers=None, frame_len=128, num_classes=11, seed=0) -> CnnModel:
    layers = vtcnn2_layers(num_classes) if layers is None else layers
    return CnnModel(layers, (1, 2, frame_len), seed=seed)


# --- layer kernels -----------------------------------------------------------

def _conv_forward(x, w, b, padding):
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    cout, cin, kh, kw = w.shape
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N, Cin, Ho, Wo, kh, kw
    n, _, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    out = cols @ w.reshape(cout, -1).T + b
    return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2), cols


def _conv_backward_input(g, w, in_shape, padding):
    n_, cin, h, wd = in_shape
    n = g.shape[0]
    ph, pw = padding
    cout, _, kh, kw = w.shape
    _, _, ho, wo = g.shape
    gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    dcols = (gm @ w.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)
    dxp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + ho, j : j + wo] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, ph : ph + h, pw : pw + wd]


def _conv_backward_params(g, cols, w_shape):
    cout = w_shape[0]
    gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    return (gm.T @ cols).reshape(w_shape), gm.sum(axis=0)


def softmax_probs(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    frame_shape = model.input_shape[1:]
    if x.shape == frame_shape:
        return x[None, None], True
    if x.ndim == 3 and x.shape[1:] == frame_shape:
        return x[:, None], False
    if x.ndim == 4 and x.shape[1:] == model.input_shape:
        return x, False
    raise ArgumentError(f"input shape {x.shape} does not match model input {frame_shape}")


def _run(model, x, upto, training=False, rng=None):
    """Forward through layers ``0..upto``; returns activations and caches."""
    acts = [x]
    caches = []
    for i in range(upto + 1):
        spec, p, a = model.layers[i], model.params[i], acts[-1]
        if spec.kind == "conv2d":
            out, cache = _conv_forward(a, p[0], p[1], spec.padding)
        elif spec.kind == "dense":
            out, cache = a @ p[0] + p[1], None
        elif spec.kind == "relu":
            cache = a > 0  # subgradient 0 at the kink
            out = a * cache
        elif spec.kind == "flatten":
            out, cache = a.reshape(len(a), -1), a.shape
        elif spec.kind == "dropout":
            if training and spec.rate > 0:
                cache = (rng.random(a.shape) >= spec.rate) / (1.0 - spec.rate)
                out = a * cache
            else:
                out, cache = a, None
        else:
            out, cache = softmax_probs(a), None
        acts.append(out)
        caches.append(cache)
    return acts, caches


def _backward(model, acts, caches, g, start, param_grads=None):
    """Reverse pass from the output of layer ``start`` down to the input.

    Caches computed for a single input broadcast against a batch of
    upstream gradients, which is how several VJPs at one point are batched.
    """
    for i in range(start, -1, -1):
        spec, p, cache = model.layers[i], model.params[i], caches[i]
        if spec.kind == "conv2d":
            if param_grads is not None:
                param_grads[i] = _conv_backward_params(g, cache, p[0].shape)
            if i == 0 and param_grads is not None:
                break
            g = _conv_backward_input(g, p[0], acts[i].shape, spec.padding)
        elif spec.kind == "dense":
            if param_grads is not None:
                param_grads[i] = (acts[i].T @ g, g.sum(axis=0))
            g = g @ p[0].T
        elif spec.kind == "relu":
            g = g * cache
        elif spec.kind == "flatten":
            g = g.reshape((len(g),) + cache[1:])
        elif spec.kind == "dropout":
            if cache is not None:
                g = g * cache
        else:
            raise ArgumentError("backward through softmax is folded into the loss")
    return g


def forward(model: CnnModel, x):
    """Inference-mode pass. Returns ``(features, logits, probabilities)``.

    ``x`` is one ``(2, L)`` frame or a ``(N, 2, L)`` batch; outputs follow.
    """
    xb, single = _as_batch(model, x)
    acts, _ = _run(model, xb, len(model.layers) - 1)
    feats = acts[model.feature_layer_index + 1]
    logits = acts[model.logits_layer_index + 1]
    probs = acts[-1]
    if single:
        return feats[0], logits[0], probs[0]
    return feats, logits, probs


def features(model: CnnModel, x):
    xb, single = _as_batch(model, x)
    acts, _ = _run(model, xb, model.feature_layer_index)
    return acts[-1][0] if single else acts[-1]


def logits(model: CnnModel, x):
    xb, single = _as_batch(model, x)
    acts, _ = _run(model, xb, model.logits_layer_index)
    return acts[-1][0] if single else acts[-1]


def input_vjp(model: CnnModel, x, upstream, layer_index):
    """``u^T J`` for the Jacobian of layer ``layer_index``'s output w.r.t. ``x``.

    With a single frame ``x`` and a ``(B, F)`` upstream, returns ``(B, 2, L)``
    (one forward pass shared by all B products). With a batch of N frames the
    upstream must be ``(N, F)``.
    """
    xb, single = _as_batch(model, x)
    u = np.asarray(upstream, dtype=np.float64)
    width = int(np.prod(model.shapes[layer_index + 1]))
    squeeze = u.ndim == 1
    u2 = u[None] if squeeze else u
    if u2.ndim != 2 or u2.shape[1] != width:
        raise ArgumentError(f"upstream width {u.shape} does not match layer width {width}")
    if not single and u2.shape[0] != xb.shape[0]:
        raise ArgumentError("batched input needs one upstream row per frame")
    acts, caches = _run(model, xb, layer_index)
    g = u2.reshape((u2.shape[0],) + tuple(model.shapes[layer_index + 1]))
    gx = _backward(model, acts, caches, g, layer_index)[:, 0]
    if squeeze and (single or len(gx) == 1):
        return gx[0]
    return gx


def feature_input_vjp(model: CnnModel, x, upstream):
    return input_vjp(model, x, upstream, model.feature_layer_index)


def logits_input_vjp(model: CnnModel, x, upstream):
    return input_vjp(model, x, upstream, model.logits_layer_index)


def predict(model: CnnModel, x, batch_size=512):
    xb, single = _as_batch(model, x)
    out = np.concatenate([
        np.argmax(logits(model, xb[i : i + batch_size]), axis=1)
        for i in range(0, len(xb), batch_size)
    ]) if len(xb) else np.zeros(0, np.int64)
    return int(out[0]) if single else out


# --- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.01
    optimizer: str = "sgd"  # "sgd" or "adam"
    seed: int = 0
    dropout_rate: float | None = None  # overrides the layers' rates when set

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ConfigurationError("epochs >= 0, batch_size > 0 and learning_rate > 0 required")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


def _loss_and_accuracy(model, frames, labels, batch_size=512):
    if len(frames) == 0:
        return float("nan"), float("nan")
    total, correct = 0.0, 0
    for i in range(0, len(frames), batch_size):
        z = logits(model, frames[i : i + batch_size])
        y = labels[i : i + batch_size]
        zs = z - z.max(axis=1, keepdims=True)
        logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
        total -= logp[np.arange(len(y)), y].sum()
        correct += int((z.argmax(axis=1) == y).sum())
    return total / len(frames), correct / len(frames)


def train(model: CnnModel, split, cfg: TrainConfig = TrainConfig(), verbose=False) -> CnnModel:
    """Minibatch cross-entropy training; returns a new model.

    ``split.test`` (if non-empty) is only used for the per-epoch validation
    numbers recorded in ``model.history``.
    """
    train_ds = split.train
    if len(train_ds) == 0:
        raise ArgumentError("training set is empty")
    labels = np.asarray(train_ds.labels)
    if labels.max() >= model.num_classes or labels.min() < 0:
        raise ArgumentError("labels out of range for the model's class count")
    frames = np.asarray(train_ds.frames, dtype=np.float64)

    layers = model.layers
    if cfg.dropout_rate is not None:
        layers = tuple(dataclasses.replace(s, rate=cfg.dropout_rate) if s.kind == "dropout" else s for s in layers)
    out = CnnModel(layers, model.input_shape, [None if p is None else (p[0].copy(), p[1].copy()) for p in model.params])
    out.history = list(model.history)
    if cfg.epochs == 0:
        return out

    rng = np.random.default_rng(cfg.seed)
    params = [None if p is None else [p[0], p[1]] for p in out.params]
    moments = [None if p is None else [np.zeros_like(p[0]), np.zeros_like(p[1]),
                                       np.zeros_like(p[0]), np.zeros_like(p[1])] for p in params]
    step = 0
    last = len(layers) - 1
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(frames))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = frames[idx][:, None]
            acts, caches = _run(out, xb, last - 1, training=True, rng=rng)
            probs = softmax_probs(acts[-1])
            y = labels[idx]
            loss = -np.mean(np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300)))
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            g = probs
            g[np.arange(len(y)), y] -= 1.0
            g /= len(y)
            grads = [None] * len(layers)
            _backward(out, acts, caches, g, last - 1, param_grads=grads)
            step += 1
            for i, gr in enumerate(grads):
                if gr is None:
                    continue
                for k in (0, 1):
                    if cfg.optimizer == "sgd":
                        params[i][k] -= cfg.learning_rate * gr[k]
                    else:
                        m, v = moments[i][k], moments[i][k + 2]
                        m *= 0.9
                        m += 0.1 * gr[k]
                        v *= 0.999
                        v += 0.001 * gr[k] ** 2
                        mhat = m / (1 - 0.9**step)
                        vhat = v / (1 - 0.999**step)
                        params[i][k] -= cfg.learning_rate * mhat / (np.sqrt(vhat) + 1e-8)
            out.params = [None if p is None else (p[0], p[1]) for p in params]
        tl, ta = _loss_and_accuracy(out, frames, labels)
        vl, va = _loss_and_accuracy(out, np.asarray(split.test.frames, np.float64), np.asarray(split.test.labels))
        if not np.isfinite(tl):
            raise TrainingError(f"non-finite training loss after epoch {epoch}")
        stats = EpochStats(epoch, tl, ta, vl, va)
        out.history.append(stats)
        msg = "epoch %d: train loss %.4f acc %.4f | val loss %.4f acc %.4f"
        (log.info if verbose else log.debug)(msg, epoch, tl, ta, vl, va)
    out.params = [None if p is None else (_f32(p[0]), _f32(p[1])) for p in params]
    return out


# --- NRM1 checkpoint ---------------------------------------------------------

_KIND_CODE = {k: i for i, k in enumerate(KINDS)}


def model_to_bytes(model: CnnModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HHHHH", VERSION, *model.input_shape, len(model.layers)))
    for spec in model.layers:
        buf.write(struct.pack("<BIHHHHd", _KIND_CODE[spec.kind], spec.filters,
                              *spec.kernel, *spec.padding, spec.rate))
    for p in model.params:
        if p is not None:
            buf.write(p[0].astype("<f4").tobytes())
            buf.write(p[1].astype("<f4").tobytes())
    return buf.getvalue()


_LAYER = struct.Struct("<BIHHHHd")
_HEAD = struct.Struct("<HHHHH")


def model_from_bytes(data: bytes) -> CnnModel:
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    off = 4
    if len(data) < off + _HEAD.size:
        raise FormatError("truncated header", off)
    version, c, h, w, n = _HEAD.unpack_from(data, off)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", off)
    off += _HEAD.size
    layers = []
    for _ in range(n):
        if len(data) < off + _LAYER.size:
            raise FormatError("truncated layer table", off)
        code, filters, kh, kw, ph, pw, rate = _LAYER.unpack_from(data, off)
        if code >= len(KINDS):
            raise FormatError(f"unknown layer code {code}", off)
        layers.append(LayerSpec(KINDS[code], filters, (kh, kw), (ph, pw), rate))
        off += _LAYER.size
    try:
        skeleton = CnnModel(layers, (c, h, w), seed=0)
    except ConfigurationError as exc:
        raise FormatError(f"invalid layer table: {exc}", 4 + _HEAD.size) from None
    params = []
    for p in skeleton.params:
        if p is None:
            params.append(None)
            continue
        arrays = []
        for ref in p:
            nbytes = ref.size * 4
            if len(data) < off + nbytes:
                raise FormatError("truncated parameter tensor", off)
            arrays.append(np.frombuffer(data, "<f4", ref.size, off).reshape(ref.shape).astype(np.float64))
            off += nbytes
        params.append(tuple(arrays))
    if off != len(data):
        raise FormatError("trailing bytes after parameters", off)
    return CnnModel(layers, (c, h, w), params)


def save_model(model: CnnModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> CnnModel:
    return model_from_bytes(Path(path).read_bytes())


def relu_masks(model: CnnModel, x):
    """Boolean activation patterns of every ReLU layer up to the features."""
    xb, _ = _as_batch(model, x)
    _, caches = _run(model, xb, model.feature_layer_index)
    return [c for spec, c in zip(model.layers, caches) if spec.kind == "relu"]
