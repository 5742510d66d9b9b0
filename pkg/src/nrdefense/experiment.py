"""Monte-Carlo comparison of the NR system and the undefended CNN under UAPs.

Each trial draws a small batch of training frames at the attacked SNR,
builds one universal perturbation per system and per PNR from that batch,
and measures accuracy on the whole test pool at that SNR.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from nrdefense import attack
from nrdefense.dataset import average_l2_norm
from nrdefense.errors import ConfigurationError
from nrdefense.nr import REJECT

log = logging.getLogger(__name__)

SYSTEMS = ("nr", "dnn")
DEFAULT_PNR_GRID = (-10.0, -8.0, -6.0, -4.0, -2.0, 0.0)


@dataclass(frozen=True)
class ExperimentConfig:
    trials: int = 10
    batch_size: int = 50
    snr_db: int = 10
    pnr_grid_db: tuple = DEFAULT_PNR_GRID
    seed: int = 0
    accuracy_mode: str = "robust"
    delta: float = 0.2
    max_passes: int = 10
    eps_resolution: float = 1e-3  # eps_acc as a fraction of the budget
    norm_scope: str = "all"  # average frame norm over "all" training frames or only "snr"

    def __post_init__(self):
        if self.trials < 1 or self.batch_size < 1:
            raise ConfigurationError("trials and batch_size must be at least 1")
        if not self.pnr_grid_db:
            raise ConfigurationError("PNR grid is empty")
        if self.accuracy_mode not in ("strict", "robust"):
            raise ConfigurationError("accuracy_mode must be 'strict' or 'robust'")
        if self.norm_scope not in ("all", "snr"):
            raise ConfigurationError("norm_scope must be 'all' or 'snr'")
        object.__setattr__(self, "pnr_grid_db", tuple(float(p) for p in self.pnr_grid_db))


@dataclass
class EvalReport:
    config: ExperimentConfig
    eps: np.ndarray  # budget per PNR
    strict: dict  # system -> (trials, pnr) accuracy, rejection counted wrong
    robust: dict  # system -> (trials, pnr) accuracy, rejection counted right
    rejection: dict
    uap_norm: dict
    converged: dict
    batch_fooling: dict
    perturbations: dict = field(default_factory=dict)  # system -> (trials, pnr, 2, L)
    clean: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def pnr_grid(self):
        return np.asarray(self.config.pnr_grid_db)

    def accuracy_matrix(self, system, mode=None):
        mode = mode or self.config.accuracy_mode
        return (self.robust if mode == "robust" else self.strict)[system]

    def mean_accuracy(self, system, mode=None):
        return self.accuracy_matrix(system, mode).mean(axis=0)

    def rejection_rates(self, system):
        return self.rejection[system].mean(axis=0)


def _accuracies(system, frames, labels, v):
    d = system.decide(frames + v[None])
    correct = d == labels
    rejected = d == REJECT
    return float(correct.mean()), float((correct | rejected).mean()), float(rejected.mean())


def _run_trial(job):
    nr, cnn, train_pool, test_pool, avg_norm, cfg, trial, seed = job
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(train_pool), size=cfg.batch_size, replace=False))
    batch = (np.asarray(train_pool.frames[idx], np.float64), np.asarray(train_pool.labels[idx]))
    frames = np.asarray(test_pool.frames, np.float64)
    labels = np.asarray(test_pool.labels)
    systems = {"nr": nr, "dnn": attack.UndefendedClassifier(cnn)}
    out = {name: [] for name in SYSTEMS}
    for pnr in cfg.pnr_grid_db:
        eps = attack.epsilon_from_pnr(pnr, cfg.snr_db, avg_norm)
        for name in SYSTEMS:
            system = systems[name]
            uap = attack.compute_uap(
                system, batch,
                attack.UapConfig(eps, cfg.delta, cfg.max_passes),
                attack.FgmConfig.for_budget(eps, cfg.eps_resolution),
            )
            strict, robust, rej = _accuracies(system, frames, labels, uap.v)
            out[name].append((strict, robust, rej, uap.norm, uap.converged, uap.fooling_rate, uap.v))
            log.info("trial %d pnr %+g %s: strict %.4f robust %.4f reject %.4f |v| %.4f",
                     trial, pnr, name, strict, robust, rej, uap.norm)
    return trial, idx.tolist(), out


def run_experiment(nr, cnn, split, cfg: ExperimentConfig = ExperimentConfig(), workers: int = 1) -> EvalReport:
    """Run every trial; with ``workers > 1`` trials go to a process pool.

    Results do not depend on ``workers``: each trial's batch comes from its
    own spawned seed.
    """
    train_pool = split.train.at_snr(cfg.snr_db)
    test_pool = split.test.at_snr(cfg.snr_db)
    if len(test_pool) == 0:
        raise ConfigurationError(f"no test frames at {cfg.snr_db} dB")
    if len(train_pool) < cfg.batch_size:
        raise ConfigurationError(
            f"{len(train_pool)} training frames at {cfg.snr_db} dB, need {cfg.batch_size}"
        )
    avg_norm = average_l2_norm(split.train if cfg.norm_scope == "all" else train_pool)
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.trials)]
    jobs = [(nr, cnn, train_pool, test_pool, avg_norm, cfg, t, seeds[t]) for t in range(cfg.trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_trial, jobs))
    else:
        results = [_run_trial(job) for job in jobs]
    results.sort(key=lambda r: r[0])

    def matrix(name, k, dtype=float):
        return np.array([[cell[k] for cell in r[2][name]] for r in results], dtype=dtype)

    frames = np.asarray(test_pool.frames, np.float64)
    labels = np.asarray(test_pool.labels)
    zero = np.zeros(frames.shape[1:])
    clean = {}
    for name, system in (("nr", nr), ("dnn", attack.UndefendedClassifier(cnn))):
        s, r, j = _accuracies(system, frames, labels, zero)
        clean[name] = {"strict": s, "robust": r, "rejection": j}

    return EvalReport(
        config=cfg,
        eps=np.array([attack.epsilon_from_pnr(p, cfg.snr_db, avg_norm) for p in cfg.pnr_grid_db]),
        strict={n: matrix(n, 0) for n in SYSTEMS},
        robust={n: matrix(n, 1) for n in SYSTEMS},
        rejection={n: matrix(n, 2) for n in SYSTEMS},
        uap_norm={n: matrix(n, 3) for n in SYSTEMS},
        converged={n: matrix(n, 4, bool) for n in SYSTEMS},
        batch_fooling={n: matrix(n, 5) for n in SYSTEMS},
        perturbations={n: np.array([[cell[6] for cell in r[2][n]] for r in results]) for n in SYSTEMS},
        clean=clean,
        metadata={
            "trial_seeds": seeds,
            "batch_indices": [r[1] for r in results],
            "avg_norm": avg_norm,
            "s0": nr.s0,
            "test_pool_size": len(test_pool),
            "train_pool_size": len(train_pool),
        },
    )


# --- CSV emission --------------------------------------------------------------

REPORT_COLUMNS = ("system", "trial", "pnr_db", "accuracy_strict", "accuracy_robust", "rejection_rate", "uap_norm")
SUMMARY_COLUMNS = (
    "system", "pnr_db", "eps", "trials", "mean_strict", "std_strict",
    "mean_robust", "std_robust", "mean_rejection", "std_rejection", "mean_uap_norm",
)


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _std(col):
    return float(np.std(col, ddof=1)) if len(col) > 1 else 0.0


def emit_report(report: EvalReport, out_dir) -> list:
    """Write ``report.csv``, ``summary.csv`` and ``metadata.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.csv", out / "summary.csv", out / "metadata.json"]

    with open(paths[0], "w", newline="", encoding="utf-8") as fh:
        fh.write("# one row per (system, trial, pnr_db); accuracy_strict counts rejections as errors, "
                 "accuracy_robust counts them as correct; uap_norm is the l2 norm of the trial's UAP\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for name in SYSTEMS:
            for t in range(report.config.trials):
                for k, pnr in enumerate(report.config.pnr_grid_db):
                    w.writerow([_fmt(v) for v in (
                        name, t, pnr, report.strict[name][t, k], report.robust[name][t, k],
                        report.rejection[name][t, k], report.uap_norm[name][t, k])])

    with open(paths[1], "w", newline="", encoding="utf-8") as fh:
        fh.write("# one row per (system, pnr_db); means and sample standard deviations over trials\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for name in SYSTEMS:
            for k, pnr in enumerate(report.config.pnr_grid_db):
                st, rb, rj = (m[name][:, k] for m in (report.strict, report.robust, report.rejection))
                w.writerow([_fmt(v) for v in (
                    name, pnr, report.eps[k], report.config.trials,
                    float(np.mean(st)), _std(st), float(np.mean(rb)), _std(rb),
                    float(np.mean(rj)), _std(rj), float(np.mean(report.uap_norm[name][:, k])))])

    meta = {
        "config": asdict(report.config),
        "eps": report.eps.tolist(),
        "clean": report.clean,
        "converged": {n: report.converged[n].tolist() for n in SYSTEMS},
        "batch_fooling_rate": {n: report.batch_fooling[n].tolist() for n in SYSTEMS},
        **report.metadata,
    }
    paths[2].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
