"""Experiment drivers: MSE curves, length generalization, convergence, Lorenz, online.

Every driver takes an :class:`ExperimentConfig`, writes CSV files into
``cfg.experiment.out`` and returns an :class:`ExperimentResult` holding the
metric report, the acceptance checks it evaluated and the paths it wrote.
Estimators compared within one report always run on the same test data.
"""
from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from kalmannet.errors import InvalidArgumentError, NumericalError
from kalmannet.filters import ekf_filter, ekf_filter_batch, kf_filter, kf_filter_batch
from kalmannet.harness.config import ExperimentConfig
from kalmannet.harness.report import ExperimentResult, MetricReport, write_csv
from kalmannet.knet import knet_filter, knet_filter_batch, stack_values
from kalmannet.metrics import mse_db
from kalmannet.nn.checkpoint import load_checkpoint, save_checkpoint
from kalmannet.nn.layers import GainNetworkParams
from kalmannet.ssm import db_to_linear, generate_dataset, linear_to_db
from kalmannet.training import evaluate, train_offline, train_online

log = logging.getLogger(__name__)

__all__ = [
    "child_seed",
    "run_mse_curve",
    "run_generalization",
    "run_convergence",
    "run_lorenz",
    "run_online",
    "CURVE_GAP_DB",
    "LENGTH_GAP_DB",
    "KF_CONSISTENCY_DB",
    "CONVERGENCE_MARGIN_DB",
    "LORENZ_GAP_DB",
    "ONLINE_GAP_DB",
    "ONLINE_CONTROL_DB",
]

CURVE_GAP_DB = 0.3
LENGTH_GAP_DB = 0.2
KF_CONSISTENCY_DB = 0.05
CONVERGENCE_MARGIN_DB = 0.5
LORENZ_GAP_DB = 1.0
ONLINE_GAP_DB = 1.0
ONLINE_CONTROL_DB = 0.3


def child_seed(seed: int, *keys: int) -> int:
    """Independent 32-bit seed for the substream identified by ``keys``."""
    return int(np.random.SeedSequence(seed, spawn_key=keys).generate_state(1)[0])


def _meta(cfg: ExperimentConfig, **extra) -> dict:
    meta = {"experiment": cfg.experiment.id, "config_hash": cfg.config_hash(), "seed": cfg.experiment.seed}
    meta.update(extra)
    return meta


def _out(cfg: ExperimentConfig, name: str) -> str:
    os.makedirs(cfg.experiment.out, exist_ok=True)
    return os.path.join(cfg.experiment.out, name)


def _finish(cfg: ExperimentConfig, result: ExperimentResult) -> ExperimentResult:
    path = _out(cfg, f"{cfg.experiment.id}_report.csv")
    result.report.to_csv(path, _meta(cfg))
    result.files["report"] = path
    cfg_path = _out(cfg, f"{cfg.experiment.id}_config.txt")
    with open(cfg_path, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    result.files["config"] = cfg_path
    return result


def _tag(cfg: ExperimentConfig, inv_r2_db: float) -> str:
    n = cfg.model.n if cfg.model.n is not None else cfg.model.m
    return f"{cfg.model.kind}{cfg.model.m}x{n}_inv{inv_r2_db:g}dB"


def _timed_eval(params, knowledge, dataset):
    t0 = time.perf_counter()
    est, yp = evaluate(params, knowledge, dataset)
    return est, yp, (time.perf_counter() - t0) / len(dataset)


def _timed_kf(model, dataset):
    t0 = time.perf_counter()
    est, _ = kf_filter_batch(model, dataset.observations(), dataset.initial_states())
    return est, (time.perf_counter() - t0) / len(dataset)


def _split(cfg: ExperimentConfig, ds):
    parts = ds.split(tuple(cfg.data.split))
    if any(p is None for p in parts):
        raise InvalidArgumentError(f"data.split {cfg.data.split} leaves an empty train, validation or test set "
                                   f"at N={cfg.data.N}")
    return parts


def _train_point(cfg: ExperimentConfig, index: int, inv_r2_db: float, training=None):
    """Generate data for one grid point, train, and return everything needed downstream."""
    model = cfg.model_at(inv_r2_db)
    ds = generate_dataset(model, cfg.data.N, cfg.data.T, seed=child_seed(cfg.experiment.seed, index, 0))
    train, val, test = _split(cfg, ds)
    tcfg = training if training is not None else cfg.training_at(inv_r2_db)
    tcfg = replace(tcfg, seed=child_seed(cfg.experiment.seed, index, 1))
    t0 = time.perf_counter()
    params, curve = train_offline(train, model.knowledge(), tcfg, validation=val)
    return model, (train, val, test), params, curve, time.perf_counter() - t0


# ----------------------------------------------------------------------------- curve


def _curve_point(cfg: ExperimentConfig, index: int, inv_r2_db: float) -> dict:
    nu = cfg.noise.nu_db
    out = {"inv": inv_r2_db, "rows": [], "files": {}}
    try:
        model, (_, _, test), params, curve, train_s = _train_point(cfg, index, inv_r2_db)
    except NumericalError as exc:
        log.error("training failed at %g dB: %s", inv_r2_db, exc)
        out["rows"].append((inv_r2_db, nu, "knet", math.nan, math.nan, cfg.data.T, 0, f"error: {exc}"))
        return out
    tag = _tag(cfg, inv_r2_db)
    ckpt = _out(cfg, f"knet_{tag}.ckpt")
    save_checkpoint(ckpt, params)
    lc = _out(cfg, f"learning_{tag}.csv")
    curve.to_csv(lc, _meta(cfg, inv_r2_db=inv_r2_db))
    out["files"].update({f"checkpoint_{inv_r2_db:g}": ckpt, f"learning_{inv_r2_db:g}": lc})

    est, _, knet_s = _timed_eval(params, model.knowledge(), test)
    kf_est, kf_s = _timed_kf(model, test)
    truth = test.states()
    out["rows"].append((inv_r2_db, nu, "knet", mse_db(est, truth), knet_s, test.T, len(test), "ok"))
    out["rows"].append((inv_r2_db, nu, "kf", mse_db(kf_est, truth), kf_s, test.T, len(test), "ok"))
    out["train_seconds"] = train_s
    out["best_epoch"] = curve.best_epoch
    return out


def _map_points(fn, cfg: ExperimentConfig, threads: int):
    grid = list(enumerate(cfg.noise.inv_r2_db))
    if threads <= 1 or len(grid) == 1:
        return [fn(cfg, i, inv) for i, inv in grid]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, cfg, i, inv) for i, inv in grid]
        return [f.result() for f in futures]


def run_mse_curve(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """Unsupervised KalmanNet vs the KF over the 1/r^2 grid (shared test data per point)."""
    cfg.validate()
    result = ExperimentResult(MetricReport())
    points = _map_points(_curve_point, cfg, threads)
    plot_rows = []
    for p in points:
        for row in p["rows"]:
            result.report.add(*row)
        result.files.update(p["files"])
        inv = p["inv"]
        try:
            knet, kf = result.report.find("knet", inv).mse_db, result.report.find("kf", inv).mse_db
        except KeyError:
            knet = kf = math.nan
        gap = knet - kf
        result.check(f"curve gap at {inv:g} dB", gap <= CURVE_GAP_DB,
                     f"knet {knet:.3f} dB, kf {kf:.3f} dB, gap {gap:+.3f} dB (limit {CURVE_GAP_DB})")
        plot_rows.append([inv, "%.17g" % kf, "%.17g" % knet])

    kf_curve = [result.report.find("kf", p["inv"]).mse_db for p in points if any(r[2] == "kf" for r in p["rows"])]
    order = np.argsort(cfg.noise.inv_r2_db)
    sorted_kf = [kf_curve[i] for i in order] if len(kf_curve) == len(order) else kf_curve
    result.check("kf mse decreasing in 1/r2", all(a > b for a, b in zip(sorted_kf, sorted_kf[1:])),
                 "kf " + ", ".join(f"{v:.2f}" for v in sorted_kf))
    plot = _out(cfg, f"{cfg.experiment.id}_plot.csv")
    write_csv(plot, ["inv_r2_db", "kf_mse_db", "knet_mse_db"], plot_rows, _meta(cfg))
    result.files["plot"] = plot
    return _finish(cfg, result)


# ----------------------------------------------------------------------------- generalization


def _generalize_point(cfg: ExperimentConfig, index: int, inv_r2_db: float) -> dict:
    g = cfg.generalize
    nu = cfg.noise.nu_db
    tag = _tag(cfg, inv_r2_db)
    model = cfg.model_at(inv_r2_db)
    ckpt = os.path.join(g.checkpoint_dir, f"knet_{tag}.ckpt") if g.checkpoint_dir else None
    if ckpt and os.path.exists(ckpt):
        params, _ = load_checkpoint(ckpt)
    else:
        _, _, params, _, _ = _train_point(cfg, index, inv_r2_db)
        ckpt = _out(cfg, f"knet_{tag}.ckpt")
        save_checkpoint(ckpt, params)
    zero = GainNetworkParams.zeros(model.m, model.n)
    knowledge = model.knowledge()
    out = {"inv": inv_r2_db, "rows": [], "files": {f"checkpoint_{inv_r2_db:g}": ckpt}, "kf_consistency": []}
    for key, (N, T) in enumerate(((g.short_N, cfg.data.T), (g.long_N, g.long_T))):
        ds = generate_dataset(model, N, T, seed=child_seed(cfg.experiment.seed, index, 2 + key))
        truth = ds.states()
        est, _, knet_s = _timed_eval(params, knowledge, ds)
        kf_est, kf_s = _timed_kf(model, ds)
        z_est, _, z_s = _timed_eval(zero, knowledge, ds)
        out["rows"].append((inv_r2_db, nu, "knet", mse_db(est, truth), knet_s, T, N, "ok"))
        out["rows"].append((inv_r2_db, nu, "kf", mse_db(kf_est, truth), kf_s, T, N, "ok"))
        out["rows"].append((inv_r2_db, nu, "knet_zero_gain", mse_db(z_est, truth), z_s, T, N, "ok"))
        # the batched KF used in the report must agree with the per-trajectory filter
        sub = min(N, 4)
        single = np.stack([kf_filter(model, ds[i])[0] for i in range(sub)])
        out["kf_consistency"].append((T, mse_db(kf_est[:sub], truth[:sub]), mse_db(single, truth[:sub])))
    return out


def run_generalization(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """Evaluate T-trained checkpoints at the training length and at ``generalize.long_T``."""
    cfg.validate()
    result = ExperimentResult(MetricReport())
    g = cfg.generalize
    for p in _map_points(_generalize_point, cfg, threads):
        for row in p["rows"]:
            result.report.add(*row)
        result.files.update(p["files"])
        inv = p["inv"]
        short = result.report.find("knet", inv, cfg.data.T).mse_db
        long = result.report.find("knet", inv, g.long_T).mse_db
        result.check(f"length generalization at {inv:g} dB", abs(long - short) <= LENGTH_GAP_DB,
                     f"T={cfg.data.T}: {short:.3f} dB, T={g.long_T}: {long:.3f} dB, "
                     f"diff {long - short:+.3f} dB (limit {LENGTH_GAP_DB})")
        z_short = result.report.find("knet_zero_gain", inv, cfg.data.T).mse_db
        z_long = result.report.find("knet_zero_gain", inv, g.long_T).mse_db
        result.check(f"zero-gain control grows with T at {inv:g} dB", z_long > z_short,
                     f"T={cfg.data.T}: {z_short:.2f} dB, T={g.long_T}: {z_long:.2f} dB")
        for T, batched, single in p["kf_consistency"]:
            result.check(f"kf rows consistent at {inv:g} dB, T={T}", abs(batched - single) <= KF_CONSISTENCY_DB,
                         f"report {batched:.6f} dB, per-trajectory filter {single:.6f} dB")
    return _finish(cfg, result)


# ----------------------------------------------------------------------------- convergence


def run_convergence(cfg: ExperimentConfig) -> ExperimentResult:
    """Supervised and unsupervised learning curves from one initialization and one dataset."""
    cfg.validate()
    inv = cfg.noise.inv_r2_db[0]
    nu = cfg.noise.nu_db
    model = cfg.model_at(inv)
    ds = generate_dataset(model, cfg.data.N, cfg.data.T, seed=child_seed(cfg.experiment.seed, 0, 0))
    train, val, test = _split(cfg, ds)
    base = replace(cfg.training_at(inv), seed=child_seed(cfg.experiment.seed, 0, 1))
    truth = test.states()
    kf_val = mse_db(kf_filter_batch(model, val.observations(), val.initial_states())[0], val.states())
    kf_test_est, kf_s = _timed_kf(model, test)
    kf_test = mse_db(kf_test_est, truth)

    result = ExperimentResult(MetricReport())
    result.report.add(inv, nu, "kf", kf_test, kf_s, test.T, len(test))
    curves = {}
    for mode in ("supervised", "unsupervised"):
        params, curve = train_offline(train, model.knowledge(), replace(base, mode=mode), validation=val)
        curves[mode] = curve
        path = _out(cfg, f"learning_{mode}.csv")
        curve.to_csv(path, _meta(cfg, mode=mode, kf_val_mse_db=kf_val))
        result.files[f"learning_{mode}"] = path
        est, _, s = _timed_eval(params, model.knowledge(), test)
        result.report.add(inv, nu, f"knet_{mode}", mse_db(est, truth), s, test.T, len(test))

    threshold = kf_val + CONVERGENCE_MARGIN_DB
    sup = curves["supervised"].first_epoch_below(threshold)
    uns = curves["unsupervised"].first_epoch_below(threshold)
    result.extras.update(curves=curves, kf_val_db=kf_val, crossing={"supervised": sup, "unsupervised": uns})
    result.check("convergence ordering", sup is not None and (uns is None or sup < uns),
                 f"first epoch within {CONVERGENCE_MARGIN_DB} dB of KF ({threshold:.3f} dB): "
                 f"supervised {sup}, unsupervised {uns}")
    for mode in ("supervised", "unsupervised"):
        m_db = result.report.find(f"knet_{mode}").mse_db
        result.check(f"{mode} terminates near KF", m_db - kf_test <= CURVE_GAP_DB,
                     f"{m_db:.3f} dB vs kf {kf_test:.3f} dB, gap {m_db - kf_test:+.3f} dB (limit {CURVE_GAP_DB})")
    e0 = [curves[k].val_mse_db[0] for k in ("supervised", "unsupervised")]
    result.check("shared initialization", e0[0] == e0[1], f"epoch-0 mse {e0[0]:.6f} / {e0[1]:.6f} dB")
    return _finish(cfg, result)


# ----------------------------------------------------------------------------- Lorenz


def run_lorenz(cfg: ExperimentConfig, timing_trajectories: int = 5) -> ExperimentResult:
    """Unsupervised KalmanNet vs the EKF on the Lorenz model."""
    cfg.validate()
    inv = cfg.noise.inv_r2_db[0]
    nu = cfg.noise.nu_db
    model, (_, _, test), params, curve, _ = _train_point(cfg, 0, inv)
    knowledge = model.knowledge()
    lc = _out(cfg, "learning_lorenz.csv")
    curve.to_csv(lc, _meta(cfg))
    ckpt = _out(cfg, f"knet_{_tag(cfg, inv)}.ckpt")
    save_checkpoint(ckpt, params)
    truth = test.states()

    est, _ = evaluate(params, knowledge, test)
    ekf_est = ekf_filter_batch(model, test.observations(), test.initial_states())
    ok = np.all(np.isfinite(ekf_est), axis=(1, 2))
    diverged = int(np.sum(~ok))
    ekf_status = "ok" if diverged == 0 else f"diverged {diverged}/{len(test)}"
    knet_db = mse_db(est, truth)
    ekf_db = mse_db(ekf_est[ok], truth[ok]) if ok.any() else math.nan

    # wall clock per single trajectory, informational only
    k = min(timing_trajectories, len(test))
    t0 = time.perf_counter()
    for i in range(k):
        knet_filter(params, knowledge, test[i])
    knet_s = (time.perf_counter() - t0) / k
    t0 = time.perf_counter()
    for i in range(k):
        try:
            ekf_filter(model, test[i])
        except NumericalError:
            pass
    ekf_s = (time.perf_counter() - t0) / k

    result = ExperimentResult(MetricReport(), files={"learning": lc, "checkpoint": ckpt})
    result.report.add(inv, nu, "knet", knet_db, knet_s, test.T, len(test))
    result.report.add(inv, nu, "ekf", ekf_db, ekf_s, test.T, len(test), ekf_status)
    result.extras["curve"] = curve
    obs_floor = -inv
    result.check("lorenz gap to ekf", knet_db - ekf_db <= LORENZ_GAP_DB,
                 f"knet {knet_db:.3f} dB, ekf {ekf_db:.3f} dB, gap {knet_db - ekf_db:+.3f} dB (limit {LORENZ_GAP_DB})")
    result.check("below observation noise", knet_db < obs_floor and ekf_db < obs_floor,
                 f"knet {knet_db:.3f} dB, ekf {ekf_db:.3f} dB, r2 {obs_floor:g} dB")
    result.check("timing recorded", knet_s > 0 and ekf_s > 0,
                 f"knet {knet_s * 1e3:.1f} ms, ekf {ekf_s * 1e3:.1f} ms per trajectory")
    return _finish(cfg, result)


# ----------------------------------------------------------------------------- online


def _pretrain_online(cfg: ExperimentConfig, model):
    o = cfg.online
    if o.checkpoint and os.path.exists(o.checkpoint):
        params, _ = load_checkpoint(o.checkpoint)
        return params, o.checkpoint
    ds = generate_dataset(model, cfg.data.N, cfg.data.T, seed=child_seed(cfg.experiment.seed, 0, 0))
    train, val, _ = _split(cfg, ds)
    tcfg = replace(cfg.training, mode="supervised", epochs=o.pretrain_epochs, learning_rate=o.pretrain_learning_rate,
                   batch_size=o.pretrain_batch_size, seed=child_seed(cfg.experiment.seed, 0, 1))
    params, _ = train_offline(train, model.knowledge(), tcfg, validation=val)
    path = _out(cfg, "knet_online_pretrained.ckpt")
    save_checkpoint(path, params)
    return params, path


def _quarter_db(est, truth, which: str) -> float:
    L = len(truth)
    sl = slice(L - L // 4, L) if which == "last" else slice(0, L // 4)
    return mse_db(est[sl], truth[sl])


def _frozen(params, knowledge, traj):
    x_posts, _, _, _ = knet_filter_batch(params, knowledge, traj.observations[None], traj.x0[None])
    return stack_values(x_posts)[0]


def run_online(cfg: ExperimentConfig) -> ExperimentResult:
    """Supervised pretraining at one r^2, then unsupervised adaptation on a stream at another.

    A control stream drawn from the pretraining distribution checks that
    adaptation does not degrade a matched model.
    """
    cfg.validate()
    o = cfg.online
    q2 = db_to_linear(o.q2_db)
    pre_model = cfg.linear_model(q2, db_to_linear(o.pretrain_r2_db))
    stream_model = pre_model.with_noise(q2, db_to_linear(o.stream_r2_db))
    params, ckpt = _pretrain_online(cfg, pre_model)
    knowledge = pre_model.knowledge()      # F and H are the same for both noise levels
    result = ExperimentResult(MetricReport(), files={"checkpoint": ckpt})
    ocfg = o.online_config()

    runs = {}
    for key, (name, model) in enumerate((("stream", stream_model), ("control", pre_model))):
        traj = generate_dataset(model, 1, o.stream_length, seed=child_seed(cfg.experiment.seed, 10 + key))[0]
        truth = traj.states
        t0 = time.perf_counter()
        online = train_online(traj.observations, traj.x0, params, knowledge, ocfg, states=truth)
        online_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        frozen = _frozen(params, knowledge, traj)
        frozen_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        kf_est = kf_filter_batch(model, traj.observations[None], traj.x0[None])[0][0]
        kf_s = time.perf_counter() - t0
        runs[name] = (traj, online, frozen, kf_est)
        r2_db = linear_to_db(model.R[0, 0])
        inv, nu = 0.0 - r2_db, o.q2_db - r2_db
        prefix = "" if name == "stream" else "control_"
        for est_name, est, secs in (("knet_online", online.estimates, online_s), ("knet_frozen", frozen, frozen_s),
                                    ("kf_true_r", kf_est, kf_s)):
            result.report.add(inv, nu, prefix + est_name, _quarter_db(est, truth, "last"), secs, o.stream_length, 1)

        # per-window series with the two reference lines
        W = o.window
        rows = []
        for i, (t_end, e, s) in enumerate(zip(online.window_end, online.mean_innovation_sq, online.state_mse_db)):
            sl = slice(t_end - W, t_end)
            rows.append([t_end, i, "%.17g" % e, "%.17g" % s, "%.17g" % mse_db(frozen[sl], truth[sl]),
                         "%.17g" % mse_db(kf_est[sl], truth[sl])])
        path = _out(cfg, f"online_{name}.csv")
        write_csv(path, ["t", "window_index", "mean_innovation_sq", "state_mse_db", "frozen_mse_db", "kf_mse_db"],
                  rows, _meta(cfg, stream=name, skipped_windows=len(online.skipped)))
        result.files[f"online_{name}"] = path

    adapt = result.report.find("knet_online").mse_db
    frozen_db = result.report.find("knet_frozen").mse_db
    kf_db = result.report.find("kf_true_r").mse_db
    traj, online, _, _ = runs["stream"]
    first = _quarter_db(online.estimates, traj.states, "first")
    result.extras.update(first_quarter_db=first, runs=runs)
    result.check("online beats frozen", adapt < frozen_db,
                 f"final quarter: online {adapt:.3f} dB, frozen {frozen_db:.3f} dB (first quarter online {first:.3f})")
    result.check("online near kf with true R", adapt - kf_db <= ONLINE_GAP_DB,
                 f"online {adapt:.3f} dB, kf {kf_db:.3f} dB, gap {adapt - kf_db:+.3f} dB (limit {ONLINE_GAP_DB})")
    c_online = result.report.find("control_knet_online").mse_db
    c_frozen = result.report.find("control_knet_frozen").mse_db
    result.check("matched control does not degrade", c_online - c_frozen <= ONLINE_CONTROL_DB,
                 f"control online {c_online:.3f} dB vs frozen {c_frozen:.3f} dB, "
                 f"change {c_online - c_frozen:+.3f} dB (limit {ONLINE_CONTROL_DB})")
    return _finish(cfg, result)
