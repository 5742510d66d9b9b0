"""One-vs-all RBF-kernel SVM trained with SMO, plus analytic score gradients.

For class ``c`` the decision score is::

    S_c(xi) = sum_i beta_i * exp(-gamma * ||xi - sv_i||^2) + b_c

with signed duals ``beta_i = alpha_i * y_i`` satisfying ``|beta_i| <= C`` and
``sum_i beta_i = 0``.
"""

from __future__ import annotations

import itertools
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nrdefense.errors import ArgumentError, ConvergenceError, FormatError, StratificationError

log = logging.getLogger(__name__)

MAGIC = b"NRS2"
VERSION = 1
PRUNE = 1e-8


def rbf_kernel(a, b, gamma):
    """``exp(-gamma * ||a_i - b_j||^2)`` for all row pairs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    np.maximum(d2, 0.0, out=d2)
    return np.exp(-gamma * d2)


@dataclass
class BinarySolution:
    alpha: np.ndarray
    bias: float
    iterations: int
    duality_gap: float


def smo(kernel, y, C, tol=1e-4, max_iter=100_000):
    """Solve the soft-margin dual ``min 1/2 a'Qa - e'a`` s.t. ``y'a = 0``, ``0 <= a <= C``.

    Working-set selection is the maximal-violating pair with the
    second-order choice of ``j``. Stops when the relative duality gap
    ``(P - D) / max(1, |P|)`` drops to ``tol``.
    """
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # Q alpha - e
    diag = np.diag(kernel).copy()
    pos = y > 0
    best_gap = np.inf
    it = 0
    for it in range(1, int(max_iter) + 1):
        ygrad = -y * grad
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        cand = np.where(up, ygrad, -np.inf)
        i = int(np.argmax(cand))
        m = cand[i]
        big_m = np.min(np.where(low, ygrad, np.inf))
        if it % 10 == 1 or m - big_m < 1e-3:
            bias = _bias(alpha, grad, y, C, m, big_m)
            gap, primal = _duality_gap(alpha, grad, y, C, bias)
            best_gap = min(best_gap, gap / max(1.0, abs(primal)))
            if gap <= tol * max(1.0, abs(primal)) or m - big_m <= 1e-12:
                return BinarySolution(alpha, bias, it, gap / max(1.0, abs(primal)))
        ki = kernel[i]
        diff = m - ygrad
        ok = low & (diff > 0)
        quad = diag[i] + diag - 2.0 * ki
        quad = np.where(quad > 0, quad, 1e-12)
        j = int(np.argmax(np.where(ok, diff * diff / quad, -np.inf)))
        kj = kernel[j]
        ai, aj = alpha[i], alpha[j]
        qd = max(diag[i] + diag[j] - 2.0 * ki[j], 1e-12)
        if y[i] != y[j]:
            delta = (-grad[i] - grad[j]) / qd
            d = ai - aj
            ai_new, aj_new = ai + delta, aj + delta
            if d > 0:
                if aj_new < 0:
                    aj_new, ai_new = 0.0, d
            elif ai_new < 0:
                ai_new, aj_new = 0.0, -d
            if d > 0:
                if ai_new > C:
                    ai_new, aj_new = C, C - d
            elif aj_new > C:
                aj_new, ai_new = C, C + d
        else:
            delta = (grad[i] - grad[j]) / qd
            s = ai + aj
            ai_new, aj_new = ai - delta, aj + delta
            if s > C:
                if ai_new > C:
                    ai_new, aj_new = C, s - C
            elif aj_new < 0:
                aj_new, ai_new = 0.0, s
            if s > C:
                if aj_new > C:
                    aj_new, ai_new = C, s - C
            elif ai_new < 0:
                ai_new, aj_new = 0.0, s
        dai, daj = ai_new - ai, aj_new - aj
        alpha[i], alpha[j] = ai_new, aj_new
        grad += (y[i] * dai) * y * ki + (y[j] * daj) * y * kj
    raise ConvergenceError(f"SMO did not converge within {int(max_iter)} iterations", best_gap)


def _bias(alpha, grad, y, C, m, big_m):
    free = (alpha > 0) & (alpha < C)
    if np.any(free):
        return float(np.mean(-y[free] * grad[free]))
    return float((m + big_m) / 2.0)


def _duality_gap(alpha, grad, y, C, bias):
    hinge = np.maximum(0.0, -grad - y * bias)
    quad = alpha @ (grad + 1.0)
    primal = 0.5 * quad + C * hinge.sum()
    return float(alpha @ grad + C * hinge.sum()), float(primal)


@dataclass
class RbfSvmModel:
    """Per-class signed duals, support vectors and biases with a shared ``gamma``."""

    gamma: float
    C_reg: float
    betas: list
    support_vectors: list
    biases: np.ndarray
    cv_table: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ArgumentError("gamma must be positive")
        self.betas = [np.asarray(b, dtype=np.float64) for b in self.betas]
        svs = [np.asarray(s, dtype=np.float64) for s in self.support_vectors]
        dims = {s.shape[-1] for s in svs if s.size}
        dim = dims.pop() if len(dims) == 1 else (0 if not dims else -1)
        if dim < 0:
            raise ArgumentError("support vectors have inconsistent dimensions")
        self.support_vectors = [s.reshape(len(b), dim) for b, s in zip(self.betas, svs)]
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if not (len(self.betas) == len(self.support_vectors) == len(self.biases)):
            raise ArgumentError("per-class arrays have different lengths")
        self._dim = dim
        # one-vs-all problems share training points, so score against the
        # de-duplicated union of support vectors with a (K, C) coefficient matrix
        stacked = np.vstack(self.support_vectors) if self._dim else np.zeros((0, 0))
        owner = np.concatenate([np.full(len(b), c) for c, b in enumerate(self.betas)]).astype(np.int64)
        if len(stacked):
            self._sv, inverse = np.unique(stacked, axis=0, return_inverse=True)
            inverse = inverse.reshape(-1)
        else:
            self._sv, inverse = stacked, np.zeros(0, np.int64)
        self._sv_sq = (self._sv**2).sum(1)
        self._coef = np.zeros((len(self._sv), self.num_classes))
        np.add.at(self._coef, (inverse, owner), np.concatenate(self.betas) if self.betas else [])

    @property
    def num_classes(self):
        return len(self.betas)

    @property
    def feature_dim(self):
        return self._dim

    def __eq__(self, other):
        if not isinstance(other, RbfSvmModel):
            return NotImplemented
        return (
            self.gamma == other.gamma
            and self.C_reg == other.C_reg
            and np.array_equal(self.biases, other.biases)
            and all(np.array_equal(a, b) for a, b in zip(self.betas, other.betas))
            and all(np.array_equal(a, b) for a, b in zip(self.support_vectors, other.support_vectors))
            and self.num_classes == other.num_classes
        )

    def _check(self, xi):
        xi = np.asarray(xi, dtype=np.float64)
        if xi.shape[-1] != self._dim or xi.ndim not in (1, 2):
            raise ArgumentError(f"feature dimension {xi.shape} does not match {self._dim}")
        return xi

    def kernel_rows(self, xi):
        xi = np.atleast_2d(xi)
        d2 = (xi**2).sum(1)[:, None] + self._sv_sq[None, :] - 2.0 * xi @ self._sv.T
        np.maximum(d2, 0.0, out=d2)
        return np.exp(-self.gamma * d2)


def decision_scores(model: RbfSvmModel, xi):
    """Scores for one feature vector ``(F,)`` -> ``(C,)`` or a batch ``(N, F)`` -> ``(N, C)``."""
    xi = model._check(xi)
    out = model.kernel_rows(xi) @ model._coef + model.biases
    return out[0] if xi.ndim == 1 else out


def score_gradients(model: RbfSvmModel, xi):
    """Gradients of every class score at one feature vector, shape ``(C, F)``."""
    xi = model._check(xi)
    if xi.ndim != 1:
        raise ArgumentError("score_gradients takes a single feature vector")
    w = model.kernel_rows(xi)[0][:, None] * model._coef  # (K, C)
    return -2.0 * model.gamma * (w.sum(0)[:, None] * xi[None, :] - w.T @ model._sv)


def score_gradient(model: RbfSvmModel, xi, c: int):
    """``grad S_c(xi) = sum_i -2 gamma beta_i k_i (xi - sv_i)``."""
    xi = model._check(xi)
    if xi.ndim != 1:
        raise ArgumentError("score_gradient takes a single feature vector")
    beta, sv = model.betas[c], model.support_vectors[c]
    diff = xi[None, :] - sv
    k = np.exp(-model.gamma * np.sum(diff**2, axis=1))
    return -2.0 * model.gamma * (beta * k) @ diff


def predict(model: RbfSvmModel, xi):
    return np.argmax(decision_scores(model, xi), axis=-1)


# --- training ------------------------------------------------------------------

def _check_labels(features, labels):
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ArgumentError("features must be (N, F) with one label per row")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ArgumentError("need at least two distinct labels")
    if classes[0] != 0 or classes[-1] != len(classes) - 1:
        raise ArgumentError("labels must cover 0..C-1 without gaps")
    return x, y, len(classes)


def _train_from_kernel(kernel, y, n_classes, C_reg, tol, max_iter):
    """Per-class full-length signed duals ``(N, C)`` and biases."""
    coef = np.zeros((len(y), n_classes))
    biases = np.zeros(n_classes)
    for c in range(n_classes):
        yc = np.where(y == c, 1.0, -1.0)
        sol = smo(kernel, yc, C_reg, tol, max_iter)
        coef[:, c] = sol.alpha * yc
        biases[c] = sol.bias
        log.debug("class %d: %d iterations, gap %.2e", c, sol.iterations, sol.duality_gap)
    coef[np.abs(coef) <= PRUNE] = 0.0
    return coef, biases


def train_ova(features, labels, C_reg: float, gamma: float, tol=1e-4, max_iter=100_000) -> RbfSvmModel:
    x, y, n_classes = _check_labels(features, labels)
    coef, biases = _train_from_kernel(rbf_kernel(x, x, gamma), y, n_classes, C_reg, tol, max_iter)
    keep = [np.abs(coef[:, c]) > PRUNE for c in range(n_classes)]
    return RbfSvmModel(
        gamma=float(gamma),
        C_reg=float(C_reg),
        betas=[coef[k, c] for c, k in enumerate(keep)],
        support_vectors=[x[k] for k in keep],
        biases=biases,
    )


@dataclass(frozen=True)
class GridSearchConfig:
    C_grid: tuple = (0.1, 1.0, 10.0)
    gamma_grid: tuple = (1e-4, 1e-3, 1e-2)
    folds: int = 3
    seed: int = 0

    def __post_init__(self):
        if not self.C_grid or not self.gamma_grid:
            raise ArgumentError("grids must be non-empty")
        if self.folds < 2:
            raise ArgumentError("need at least two folds")


def stratified_folds(labels, folds, seed):
    """Fold id per sample; each class is shuffled and dealt round-robin."""
    y = np.asarray(labels)
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=np.int64)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        if len(idx) < folds:
            raise StratificationError(f"class {c} has {len(idx)} samples, fewer than {folds} folds")
        fold_of[rng.permutation(idx)] = np.arange(len(idx)) % folds
    return fold_of


def grid_search(features, labels, cfg: GridSearchConfig = GridSearchConfig(), tol=1e-4, max_iter=100_000):
    """Pick ``(C, gamma)`` by mean k-fold accuracy of the argmax decision.

    Returns ``(C, gamma, cv_table)``; ties go to the smaller C, then the
    smaller gamma.
    """
    x, y, n_classes = _check_labels(features, labels)
    fold_of = stratified_folds(y, cfg.folds, cfg.seed)
    for f in range(cfg.folds):
        if len(np.unique(y[fold_of != f])) != n_classes:
            raise StratificationError(f"a class is absent from the training part of fold {f}")
    table = []
    for gamma in cfg.gamma_grid:
        full = rbf_kernel(x, x, gamma)
        for C in cfg.C_grid:
            accs = []
            for f in range(cfg.folds):
                tr, te = fold_of != f, fold_of == f
                coef, biases = _train_from_kernel(full[np.ix_(tr, tr)], y[tr], n_classes, C, tol, max_iter)
                scores = full[np.ix_(te, tr)] @ coef + biases
                accs.append(float(np.mean(scores.argmax(1) == y[te])))
            table.append({"C": float(C), "gamma": float(gamma), "fold_accuracy": accs,
                          "mean_accuracy": float(np.mean(accs))})
            log.info("grid C=%g gamma=%g: mean accuracy %.4f", C, gamma, np.mean(accs))
    best = None
    for row in sorted(table, key=lambda r: (r["C"], r["gamma"])):
        if best is None or row["mean_accuracy"] > best["mean_accuracy"]:
            best = row
    return best["C"], best["gamma"], table


def fit(features, labels, cfg: GridSearchConfig = GridSearchConfig(), tol=1e-4, max_iter=100_000) -> RbfSvmModel:
    """Grid search followed by a final fit on all samples."""
    C, gamma, table = grid_search(features, labels, cfg, tol, max_iter)
    model = train_ova(features, labels, C, gamma, tol, max_iter)
    model.cv_table = table
    return model


# --- NRS2 checkpoint ------------------------------------------------------------

_HEAD = struct.Struct("<4sHddHI")


def model_to_bytes(model: RbfSvmModel) -> bytes:
    parts = [_HEAD.pack(MAGIC, VERSION, model.gamma, model.C_reg, model.num_classes, model.feature_dim)]
    for beta, sv, b in zip(model.betas, model.support_vectors, model.biases):
        parts.append(struct.pack("<I", len(beta)))
        parts.append(beta.astype("<f8").tobytes())
        parts.append(sv.astype("<f8").tobytes())
        parts.append(struct.pack("<d", b))
    return b"".join(parts)


def model_from_bytes(data: bytes) -> RbfSvmModel:
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    if len(data) < _HEAD.size:
        raise FormatError("truncated header", len(data))
    _, version, gamma, C_reg, n_classes, dim = _HEAD.unpack_from(data, 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = _HEAD.size
    betas, svs, biases = [], [], []
    for _ in range(n_classes):
        if len(data) < off + 4:
            raise FormatError("truncated class header", off)
        (k,) = struct.unpack_from("<I", data, off)
        off += 4
        need = 8 * k + 8 * k * dim + 8
        if len(data) < off + need:
            raise FormatError("truncated class block", off)
        betas.append(np.frombuffer(data, "<f8", k, off).astype(np.float64))
        off += 8 * k
        svs.append(np.frombuffer(data, "<f8", k * dim, off).reshape(k, dim).astype(np.float64))
        off += 8 * k * dim
        biases.append(struct.unpack_from("<d", data, off)[0])
        off += 8
    if off != len(data):
        raise FormatError("trailing bytes after last class", off)
    return RbfSvmModel(gamma, C_reg, betas, svs, biases)


def save_model(model: RbfSvmModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> RbfSvmModel:
    return model_from_bytes(Path(path).read_bytes())
