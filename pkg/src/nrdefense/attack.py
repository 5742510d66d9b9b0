"""White-box attacks: bisection-refined FGM steps and universal perturbations.

An attacked *system* is anything with ``num_classes``, ``decide(frames)``
(class index or ``REJECT`` per frame) and ``objective_gradients(x, y)``
returning ``grad_x L(x, e_c)`` for every class ``c``. :class:`NrClassifier`
and :class:`UndefendedClassifier` both qualify.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nrdefense import nn
from nrdefense.errors import ArgumentError, ConfigurationError, FormatError
from nrdefense.nr import REJECT

log = logging.getLogger(__name__)

MAGIC = b"NRV1"


class UndefendedClassifier:
    """The bare CNN: argmax of the logits, never rejects.

    The attack objective is the logit difference ``z_y - z_c``.
    """

    def __init__(self, cnn: nn.CnnModel):
        self.cnn = cnn

    @property
    def num_classes(self):
        return self.cnn.num_classes

    def decide(self, x):
        return nn.predict(self.cnn, x)

    def objective_gradients(self, x, y):
        upstream = -np.eye(self.num_classes)
        upstream[:, y] += 1.0
        return nn.logits_input_vjp(self.cnn, x, upstream)


def evades(decisions, labels):
    """Wrong class and not rejected."""
    decisions = np.asarray(decisions)
    return (decisions != np.asarray(labels)) & (decisions != REJECT)


# --- budget and projection -------------------------------------------------------

def epsilon_from_pnr(pnr_db: float, snr_db: float, avg_norm: float) -> float:
    """``sqrt(PNR / (SNR + 1)) * avg_norm`` with both ratios given in dB."""
    pnr = 10.0 ** (pnr_db / 10.0)
    snr = 10.0 ** (snr_db / 10.0)
    return math.sqrt(pnr / (snr + 1.0)) * avg_norm


def project_l2(v, eps: float):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm <= eps:
        return v
    return v * (eps / norm)


def bisection_steps(p_max: float, eps_acc: float) -> int:
    return max(0, math.ceil(math.log2(p_max / eps_acc)))


@dataclass(frozen=True)
class FgmConfig:
    eps_acc: float
    p_max: float

    def __post_init__(self):
        if not (0 < self.eps_acc < self.p_max):
            raise ConfigurationError("need 0 < eps_acc < p_max")

    @classmethod
    def for_budget(cls, eps: float, resolution: float = 1e-3):
        """``p_max = eps`` and ``eps_acc = eps * resolution``."""
        return cls(eps_acc=eps * resolution, p_max=eps)


@dataclass(frozen=True)
class UapConfig:
    eps: float
    delta: float = 0.2
    max_passes: int = 10

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigurationError("eps must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError("delta must lie in (0, 1)")
        if self.max_passes < 1:
            raise ConfigurationError("max_passes must be at least 1")


# --- per-sample minimal perturbation ---------------------------------------------

@dataclass
class FgmResult:
    r_x: np.ndarray
    target: int
    eps_star: float
    eps_max: np.ndarray  # per class, the reported [eps]_c
    eps_min: np.ndarray
    iterations: np.ndarray
    directions: np.ndarray  # unit-norm r_norm per class (zero rows for skipped)
    skipped: list = field(default_factory=list)


def fgm_minimal_perturbation(system, x, y: int, cfg: FgmConfig) -> FgmResult:
    """Smallest step along each class's normalized objective gradient that evades.

    For every class the step size is bisected on ``[0, p_max]`` until the
    bracket is no wider than ``eps_acc``; the class needing the smallest step
    wins. Classes whose gradient vanishes (always including ``y`` itself) keep
    ``p_max`` and take no part in the search.
    """
    x = np.asarray(x, dtype=np.float64)
    grads = np.asarray(system.objective_gradients(x, y), dtype=np.float64)
    n_classes = grads.shape[0]
    norms = np.sqrt(np.einsum("cij,cij->c", grads, grads))
    active = norms > 0
    skipped = [c for c in range(n_classes) if not active[c] and c != y]
    for c in skipped:
        log.debug("class %d: zero objective gradient, skipped", c)
    directions = np.zeros_like(grads)
    directions[active] = grads[active] / norms[active][:, None, None]

    eps_max = np.full(n_classes, float(cfg.p_max))
    eps_min = np.zeros(n_classes)
    iterations = np.zeros(n_classes, dtype=np.int64)
    idx = np.flatnonzero(active)
    if len(idx):
        while eps_max[idx[0]] - eps_min[idx[0]] > cfg.eps_acc:
            ave = (eps_max[idx] + eps_min[idx]) / 2.0
            candidates = x[None] - ave[:, None, None] * directions[idx]
            ok = evades(system.decide(candidates), y)
            eps_max[idx[ok]] = ave[ok]
            eps_min[idx[~ok]] = ave[~ok]
            iterations[idx] += 1

    if len(idx):
        t = int(idx[np.argmin(eps_max[idx])])
        eps_star = float(eps_max[t])
        r_x = -eps_star * directions[t]
    else:
        t, eps_star, r_x = int(y), float(cfg.p_max), np.zeros_like(x)
    return FgmResult(r_x, t, eps_star, eps_max, eps_min, iterations, directions, skipped)


# --- universal perturbation --------------------------------------------------------

@dataclass
class PerturbationVector:
    v: np.ndarray
    eps_budget: float
    converged: bool = True
    fooling_rate: float = float("nan")
    passes: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        if np.linalg.norm(self.v) > self.eps_budget + 1e-9:
            raise ArgumentError("perturbation exceeds its l2 budget")

    @property
    def norm(self):
        return float(np.linalg.norm(self.v))


def _batch_arrays(batch):
    if isinstance(batch, tuple):
        frames, labels = batch
    else:
        frames, labels = batch.frames, batch.labels
    return np.asarray(frames, dtype=np.float64), np.asarray(labels)


def fooling_rate(system, batch, v) -> float:
    """Fraction of the batch that evades ``system`` once ``v`` is added."""
    frames, labels = _batch_arrays(batch)
    if len(frames) == 0:
        raise ArgumentError("fooling_rate needs a non-empty batch")
    return float(np.mean(evades(system.decide(frames + np.asarray(v)[None]), labels)))


def _fit_float32(v, eps):
    """Round to float32 (the NRV1 storage type) without leaving the l2 ball."""
    q = np.asarray(v, dtype=np.float32)
    while np.linalg.norm(q.astype(np.float64)) > eps:
        q = (q.astype(np.float64) * (1.0 - 2.0**-20)).astype(np.float32)
    return q.astype(np.float64)


def compute_uap(system, batch, cfg: UapConfig, fgm: FgmConfig) -> PerturbationVector:
    """Accumulate per-sample minimal perturbations into one vector inside the eps ball.

    Passes over the batch repeat while the fooling rate stays at or below
    ``1 - delta``. Samples already evading under the current vector are
    skipped. If ``max_passes`` runs out the best vector seen is returned
    with ``converged=False``.
    """
    frames, labels = _batch_arrays(batch)
    if len(frames) == 0:
        raise ArgumentError("batch is empty")
    target = 1.0 - cfg.delta
    v = np.zeros(frames.shape[1:])
    rate = fooling_rate(system, (frames, labels), v)
    best_rate, best_v = rate, v.copy()
    history = [rate]
    passes = 0
    while rate <= target and passes < cfg.max_passes:
        for xi, yi in zip(frames, labels):
            x_adv = xi + v
            if evades(system.decide(x_adv[None]), yi)[0]:
                continue
            step = fgm_minimal_perturbation(system, x_adv, int(yi), fgm)
            v = project_l2(v + step.r_x, cfg.eps)
        passes += 1
        rate = fooling_rate(system, (frames, labels), v)
        history.append(rate)
        log.debug("pass %d: fooling rate %.3f, |v| %.4f", passes, rate, np.linalg.norm(v))
        if rate > best_rate:
            best_rate, best_v = rate, v.copy()
    if rate <= target:
        v = best_v
    v = _fit_float32(v, cfg.eps)
    rate = fooling_rate(system, (frames, labels), v)
    return PerturbationVector(v, cfg.eps, bool(rate > target), rate, passes, history)


def compute_uap_nr(nr, batch, cfg: UapConfig, fgm: FgmConfig) -> PerturbationVector:
    return compute_uap(nr, batch, cfg, fgm)


def compute_uap_dnn(cnn: nn.CnnModel, batch, cfg: UapConfig, fgm: FgmConfig) -> PerturbationVector:
    return compute_uap(UndefendedClassifier(cnn), batch, cfg, fgm)


# --- NRV1 file ---------------------------------------------------------------------

_HEAD = struct.Struct("<4sdHH")


def perturbation_to_bytes(p: PerturbationVector) -> bytes:
    v = p.v
    if v.ndim != 2:
        raise ArgumentError("perturbation must be a (channels, length) matrix")
    return _HEAD.pack(MAGIC, p.eps_budget, *v.shape) + v.astype("<f4").tobytes()


def perturbation_from_bytes(data: bytes) -> PerturbationVector:
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    if len(data) < _HEAD.size:
        raise FormatError("truncated header", len(data))
    _, eps, rows, cols = _HEAD.unpack_from(data, 0)
    need = _HEAD.size + 4 * rows * cols
    if len(data) != need:
        raise FormatError(f"expected {need} bytes, found {len(data)}", min(len(data), need))
    v = np.frombuffer(data, "<f4", rows * cols, _HEAD.size).reshape(rows, cols).astype(np.float64)
    return PerturbationVector(v, eps)


def save_perturbation(p: PerturbationVector, path) -> None:
    Path(path).write_bytes(perturbation_to_bytes(p))


def load_perturbation(path) -> PerturbationVector:
    return perturbation_from_bytes(Path(path).read_bytes())
