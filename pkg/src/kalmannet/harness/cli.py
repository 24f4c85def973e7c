"""Command-line front end.

Exit codes: 0 success, 1 usage error (bad flags, config or input file),
2 numerical failure, 3 an acceptance check failed.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace
from typing import List, Optional

import numpy as np

from kalmannet.errors import KalmanNetError, MalformedFileError, NumericalError
from kalmannet.filters import ekf_filter, ekf_filter_batch, kf_filter, kf_filter_batch
from kalmannet.harness import experiments as X
from kalmannet.harness.config import ExperimentConfig, default_config, load_config, parse_config
from kalmannet.harness.gradcheck import DEFAULT_TOL, gradcheck_suite
from kalmannet.harness.report import MetricReport, write_csv
from kalmannet.io import load_dataset, save_dataset
from kalmannet.knet import knet_filter
from kalmannet.metrics import mse_db
from kalmannet.nn.checkpoint import load_checkpoint, save_checkpoint
from kalmannet.ssm import LorenzModel, generate_dataset, linear_to_db, model_from_descriptor
from kalmannet.training import evaluate, train_offline, train_online

log = logging.getLogger("kalmannet")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_CHECK = 0, 1, 2, 3

EXPERIMENT_COMMANDS = ("curve", "generalize", "convergence", "lorenz", "online")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="config file of 'section.key = value' lines")
    p.add_argument("--seed", type=int, default=d(None), help="override experiment.seed")
    p.add_argument("--out", default=d(None), help="output directory (experiment.out)")
    p.add_argument("--threads", type=int, default=d(1), help="worker processes for grid points")
    p.add_argument("--set", action="append", default=d([]), metavar="KEY=VALUE",
                   help="override one config key, e.g. --set training.epochs=5")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kalmannet", description="KalmanNet filters, training and experiments")
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="generate a dataset file")
    p.add_argument("--N", type=int, help="number of trajectories (default data.N)")
    p.add_argument("--T", type=int, help="trajectory length (default data.T)")
    p.add_argument("--inv-r2-db", type=float, help="1/r^2 in dB (default: first grid point)")
    p.add_argument("--unlabeled", action="store_true", help="drop ground-truth states")
    p.add_argument("--output", help="dataset path (default <out>/dataset.knds)")

    p = sub.add_parser("train-offline", parents=[common], help="train on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("supervised", "unsupervised"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint", help="output checkpoint (default <out>/knet.ckpt)")

    p = sub.add_parser("train-online", parents=[common], help="adapt a checkpoint on a recorded stream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0, help="trajectory used as the stream")

    p = sub.add_parser("evaluate", parents=[common], help="evaluate KF/EKF and optionally a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--export", help="write per-step estimates of one trajectory to this CSV")
    p.add_argument("--index", type=int, default=0)

    for name in EXPERIMENT_COMMANDS:
        p = sub.add_parser(name, parents=[common], help=f"run the {name} experiment")
        p.add_argument("--no-check", action="store_true", help="do not exit 3 on failed checks")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    return parser


def resolve_config(args, experiment_id: str = "custom") -> ExperimentConfig:
    cfg = default_config(experiment_id)
    if args.config:
        cfg = load_config(args.config, base=cfg)
        cfg.experiment.id = experiment_id if experiment_id != "custom" else cfg.experiment.id
    if args.set:
        lines = []
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            lines.append(item)
        cfg = parse_config("\n".join(lines), base=cfg)
    if args.seed is not None:
        cfg.experiment.seed = args.seed
    if args.out is not None:
        cfg.experiment.out = args.out
    return cfg.validate()


def _print_report(report: MetricReport) -> None:
    print(f"{'inv_r2_db':>9} {'nu_db':>6} {'estimator':<22} {'mse_db':>9} {'runtime_s':>10} {'T':>6} {'N':>5}  status")
    for r in report.rows:
        print(f"{r.inv_r2_db:9.2f} {r.nu_db:6.2f} {r.estimator:<22} {r.mse_db:9.3f} {r.runtime:10.4g} "
              f"{r.T:6d} {r.N:5d}  {r.status}")


# ----------------------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    N = args.N or cfg.data.N
    T = args.T or cfg.data.T
    inv = args.inv_r2_db if args.inv_r2_db is not None else cfg.noise.inv_r2_db[0]
    model = cfg.model_at(inv)
    ds = generate_dataset(model, N, T, labeled=not args.unlabeled, seed=cfg.experiment.seed)
    path = args.output or os.path.join(cfg.experiment.out, "dataset.knds")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    save_dataset(ds, path)
    print(f"wrote {N} trajectories of length {T} to {path}")
    return EXIT_OK


def _dataset_model(ds):
    return model_from_descriptor(ds.model_descriptor)


def cmd_train_offline(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(args.data)
    model = _dataset_model(ds)
    train, val, _ = ds.split(tuple(cfg.data.split))
    if train is None:
        raise UsageError("data.split leaves no training trajectories")
    tcfg = replace(cfg.training, seed=cfg.experiment.seed)
    if args.mode:
        tcfg = replace(tcfg, mode=args.mode)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    params, curve = train_offline(train, model.knowledge(), tcfg, validation=val)
    os.makedirs(cfg.experiment.out, exist_ok=True)
    ckpt = args.checkpoint or os.path.join(cfg.experiment.out, "knet.ckpt")
    save_checkpoint(ckpt, params)
    lc = os.path.join(cfg.experiment.out, "learning_curve.csv")
    curve.to_csv(lc, {"config_hash": cfg.config_hash(), "seed": cfg.experiment.seed, "data": args.data})
    print(f"best epoch {curve.best_epoch}, checkpoint {ckpt}, learning curve {lc}")
    return EXIT_OK


def cmd_train_online(args) -> int:
    cfg = resolve_config(args)
    params, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    model = _dataset_model(ds)
    traj = ds[args.index]
    res = train_online(traj.observations, traj.x0, params, model.knowledge(), cfg.online.online_config(),
                       states=traj.states)
    os.makedirs(cfg.experiment.out, exist_ok=True)
    path = os.path.join(cfg.experiment.out, "online.csv")
    res.to_csv(path, {"config_hash": cfg.config_hash(), "seed": cfg.experiment.seed, "data": args.data})
    save_checkpoint(os.path.join(cfg.experiment.out, "knet_online.ckpt"), res.final_params)
    msg = f"{res.n_updates} updates, {len(res.skipped)} skipped windows, series in {path}"
    if traj.labeled:
        msg += f", stream mse {mse_db(res.estimates, traj.states):.3f} dB"
    print(msg)
    return EXIT_OK


def _export_rows(records, m, n):
    rows = []
    for t, r in enumerate(records, 1):
        row = [t] + ["%.17g" % v for v in np.concatenate([r.x_post, r.y_prior, r.innovation, np.ravel(r.gain)])]
        rows.append(row)
    header = (["t"] + [f"x_post_{i}" for i in range(m)] + [f"y_prior_{i}" for i in range(n)]
              + [f"innovation_{i}" for i in range(n)] + [f"gain_{i}_{j}" for i in range(m) for j in range(n)])
    return header, rows


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(args.data)
    if not ds.labeled:
        raise UsageError("evaluate needs a labeled dataset")
    model = _dataset_model(ds)
    truth = ds.states()
    lorenz = isinstance(model, LorenzModel)
    r2_db = linear_to_db(float(model.R[0, 0]))
    nu_db = linear_to_db(float(model.Q[0, 0])) - r2_db
    inv = 0.0 - r2_db
    report = MetricReport()
    t0 = time.perf_counter()
    if lorenz:
        est = ekf_filter_batch(model, ds.observations(), ds.initial_states())
        ok = np.all(np.isfinite(est), axis=(1, 2))
        status = "ok" if ok.all() else f"diverged {int((~ok).sum())}/{len(ds)}"
        secs = (time.perf_counter() - t0) / len(ds)
        report.add(inv, nu_db, "ekf", mse_db(est[ok], truth[ok]), secs, ds.T, len(ds), status)
    else:
        est, _ = kf_filter_batch(model, ds.observations(), ds.initial_states())
        secs = (time.perf_counter() - t0) / len(ds)
        report.add(inv, nu_db, "kf", mse_db(est, truth), secs, ds.T, len(ds))
    params = None
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
        t0 = time.perf_counter()
        est, _ = evaluate(params, model.knowledge(), ds)
        secs = (time.perf_counter() - t0) / len(ds)
        report.add(inv, nu_db, "knet", mse_db(est, truth), secs, ds.T, len(ds))
    _print_report(report)
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.experiment.seed, "data": args.data}
    os.makedirs(cfg.experiment.out, exist_ok=True)
    report.to_csv(os.path.join(cfg.experiment.out, "evaluate_report.csv"), meta)
    if args.export:
        traj = ds[args.index]
        if params is not None:
            _, recs = knet_filter(params, model.knowledge(), traj)
            name = "knet"
        else:
            _, recs = (ekf_filter if lorenz else kf_filter)(model, traj)
            name = "ekf" if lorenz else "kf"
        header, rows = _export_rows(recs, model.m, model.n)
        write_csv(args.export, header, rows, dict(meta, estimator=name, index=args.index))
        print(f"exported {name} estimates of trajectory {args.index} to {args.export}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    exp_id = args.command
    cfg = resolve_config(args, exp_id)
    if exp_id == "curve":
        result = X.run_mse_curve(cfg, threads=args.threads)
    elif exp_id == "generalize":
        result = X.run_generalization(cfg, threads=args.threads)
    elif exp_id == "convergence":
        result = X.run_convergence(cfg)
    elif exp_id == "lorenz":
        result = X.run_lorenz(cfg)
    else:
        result = X.run_online(cfg)
    _print_report(result.report)
    for c in result.checks:
        print(c.line())
    print(f"report: {result.files['report']}")
    if not result.passed and not args.no_check:
        return EXIT_CHECK
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    seeds = [int(s) for s in np.random.SeedSequence(cfg.experiment.seed).generate_state(args.seeds)]
    results = gradcheck_suite(seeds, tol=args.tol)
    for r in results:
        print(r.line())
    worst = max((r.max_rel_error for r in results), default=0.0)
    ok = all(r.passed for r in results)
    print(f"{'PASS' if ok else 'FAIL'}: max relative error {worst:.3e} over {len(results)} checks (tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {
    "simulate": cmd_simulate,
    "train-offline": cmd_train_offline,
    "train-online": cmd_train_online,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS.get(args.command, cmd_experiment)
    try:
        return handler(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, MalformedFileError, OSError, ValueError, KalmanNetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
