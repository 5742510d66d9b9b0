"""Command-line entry point: ``nrdefense <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from nrdefense import attack, experiment, nn, nr, svm
from nrdefense.dataset import (
    DEFAULT_SNRS,
    GenerationConfig,
    Modulation,
    average_l2_norm,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from nrdefense.errors import NrError

log = logging.getLogger("nrdefense")

# options whose values may legitimately start with "-"
_SIGNED_LIST_OPTIONS = ("--pnr", "--snrs")


def _floats(text):
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text):
    return tuple(int(t) for t in text.split(",") if t.strip())


def _pool(ds, snr):
    return ds if snr is None else ds.at_snr(snr)


def cmd_gen_data(args):
    cfg = GenerationConfig(
        schemes=tuple(Modulation.parse(s) for s in args.schemes.split(",")) if args.schemes else tuple(Modulation),
        snrs_db=args.snrs or DEFAULT_SNRS,
        per_cell=args.per_cell,
        train_fraction=args.train_fraction,
        frame_len=args.frame_len,
        seed=args.seed,
    )
    split = generate_dataset(cfg)
    save_dataset(split, args.out)
    print(f"wrote {len(split.train)} train + {len(split.test)} test frames to {args.out}")


def cmd_train_cnn(args):
    split = load_dataset(args.data)
    if args.snr is not None:
        split = type(split)(split.train.at_snr(args.snr), split.test.at_snr(args.snr))
    layers = (nn.compact_layers if args.arch == "compact" else nn.vtcnn2_layers)(num_classes=len(Modulation))
    model = nn.build_model(layers, split.train.frame_len, len(Modulation), seed=args.seed)
    cfg = nn.TrainConfig(args.epochs, args.batch_size, args.lr, args.optimizer, args.seed)
    model = nn.train(model, split, cfg, verbose=True)
    for h in model.history:
        print(f"epoch {h.epoch}: train loss {h.train_loss:.4f} acc {h.train_accuracy:.4f} "
              f"| val loss {h.val_loss:.4f} acc {h.val_accuracy:.4f}")
    nn.save_model(model, args.out)
    print(f"wrote {args.out}")


def _stratified_subsample(labels, limit, seed):
    if limit is None or len(labels) <= limit:
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    per = max(limit // len(classes), 1)
    keep = [rng.permutation(np.flatnonzero(labels == c))[:per] for c in classes]
    return np.sort(np.concatenate(keep))


def cmd_train_svm(args):
    cnn = nn.load_model(args.model)
    split = load_dataset(args.data)
    train = _pool(split.train, args.snr)
    idx = _stratified_subsample(np.asarray(train.labels), args.max_samples, args.seed)
    feats = nn.features(cnn, np.asarray(train.frames[idx], np.float64))
    model = svm.fit(feats, train.labels[idx], svm.GridSearchConfig(seed=args.seed))
    for row in model.cv_table:
        print(f"C={row['C']:g} gamma={row['gamma']:g}: mean 3-fold accuracy {row['mean_accuracy']:.4f}")
    print(f"selected C={model.C_reg:g} gamma={model.gamma:g}, "
          f"{sum(len(b) for b in model.betas)} support vectors across classes")
    svm.save_model(model, args.out)
    print(f"wrote {args.out}")


def cmd_calibrate(args):
    cnn = nn.load_model(args.model)
    model = svm.load_model(args.svm)
    split = load_dataset(args.data)
    pool = _pool(split.train if args.split == "train" else split.test, args.snr)
    clf = nr.NrClassifier(cnn, model)
    cal = nr.calibrate_threshold(clf, pool, args.reject)
    nr.save(clf.with_threshold(cal.s0), args.out)
    flag = " (tied scores: degenerate quantile)" if cal.degenerate else ""
    print(f"s0={cal.s0:.6g}: rejects {cal.rejected} of {cal.set_size} correctly classified "
          f"({cal.realized_rate:.4f}){flag}")
    print(f"wrote {args.out}")


def cmd_attack_uap(args):
    clf = nr.load(args.nr)
    split = load_dataset(args.data)
    pool = split.train.at_snr(args.snr)
    if len(pool) < args.batch:
        raise SystemExit(f"only {len(pool)} training frames at {args.snr} dB")
    rng = np.random.default_rng(args.seed)
    batch = pool.take(np.sort(rng.choice(len(pool), args.batch, replace=False)))
    eps = attack.epsilon_from_pnr(args.pnr, args.snr, average_l2_norm(split.train))
    system = attack.UndefendedClassifier(clf.cnn) if args.undefended else clf
    uap = attack.compute_uap(system, batch, attack.UapConfig(eps, args.delta, args.max_passes),
                             attack.FgmConfig.for_budget(eps))
    attack.save_perturbation(uap, args.out)
    state = "converged" if uap.converged else "not converged"
    print(f"eps={eps:.6g} |v|={uap.norm:.6g} batch fooling rate {uap.fooling_rate:.4f} "
          f"after {uap.passes} passes ({state})")
    print(f"wrote {args.out}")


def cmd_evaluate(args):
    clf = nr.load(args.nr)
    cnn = nn.load_model(args.cnn) if args.cnn else clf.cnn
    split = load_dataset(args.data)
    cfg = experiment.ExperimentConfig(
        trials=args.trials, batch_size=args.batch, snr_db=args.snr, pnr_grid_db=args.pnr,
        seed=args.seed, delta=args.delta, max_passes=args.max_passes,
    )
    report = experiment.run_experiment(clf, cnn, split, cfg, workers=args.workers)
    paths = experiment.emit_report(report, args.out)
    nr_mean = report.mean_accuracy("nr", "robust")
    dnn_mean = report.mean_accuracy("dnn", "strict")
    print("pnr_db  nr_robust  nr_strict  dnn")
    for k, pnr in enumerate(cfg.pnr_grid_db):
        print(f"{pnr:6g}  {nr_mean[k]:.4f}     {report.mean_accuracy('nr', 'strict')[k]:.4f}     {dnn_mean[k]:.4f}")
    print("wrote " + ", ".join(str(p) for p in paths))


def build_parser():
    p = argparse.ArgumentParser(prog="nrdefense", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a labeled I/Q dataset (NRS1)")
    g.add_argument("--out", required=True)
    g.add_argument("--per-cell", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frame-len", type=int, default=128)
    g.add_argument("--snrs", type=_ints, default=None, help="comma-separated SNRs in dB")
    g.add_argument("--schemes", default=None, help="comma-separated modulation names")
    g.add_argument("--train-fraction", type=float, default=0.5)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-cnn", help="train the CNN classifier (NRM1)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--arch", choices=("vtcnn2", "compact"), default="vtcnn2")
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    t.add_argument("--snr", type=int, default=None, help="train only on frames at this SNR")
    t.set_defaults(func=cmd_train_cnn)

    s = sub.add_parser("train-svm", help="grid-search and fit the one-vs-all RBF SVM (NRS2)")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--snr", type=int, default=None)
    s.add_argument("--max-samples", type=int, default=3000,
                   help="stratified cap on SVM training frames (kernel matrices are dense)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_svm)

    c = sub.add_parser("calibrate", help="set the rejection threshold and bundle the NR system (NRC1)")
    c.add_argument("--model", required=True)
    c.add_argument("--svm", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--snr", type=int, default=10)
    c.add_argument("--reject", type=float, default=0.10)
    c.add_argument("--split", choices=("test", "train"), default="test")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    a = sub.add_parser("attack-uap", help="compute one universal perturbation (NRV1)")
    a.add_argument("--nr", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--snr", type=int, default=10)
    a.add_argument("--pnr", type=float, default=0.0)
    a.add_argument("--batch", type=int, default=50)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--delta", type=float, default=0.2)
    a.add_argument("--max-passes", type=int, default=10)
    a.add_argument("--undefended", action="store_true", help="attack the bare CNN instead")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack_uap)

    e = sub.add_parser("evaluate", help="Monte-Carlo NR vs undefended comparison (CSV)")
    e.add_argument("--nr", required=True)
    e.add_argument("--cnn", default=None, help="undefended CNN; defaults to the one inside --nr")
    e.add_argument("--data", required=True)
    e.add_argument("--trials", type=int, default=10)
    e.add_argument("--batch", type=int, default=50)
    e.add_argument("--snr", type=int, default=10)
    e.add_argument("--pnr", type=_floats, default=experiment.DEFAULT_PNR_GRID)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--delta", type=float, default=0.2)
    e.add_argument("--max-passes", type=int, default=10)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)
    return p


def _join_signed_lists(argv):
    """Turn ``--pnr -10,-8`` into ``--pnr=-10,-8`` so argparse accepts it."""
    out = []
    it = iter(argv)
    for tok in it:
        if tok in _SIGNED_LIST_OPTIONS:
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_join_signed_lists(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except NrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
