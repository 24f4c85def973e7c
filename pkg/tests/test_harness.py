import csv
import math

import numpy as np
import pytest

from kalmannet.errors import InvalidArgumentError
from kalmannet.harness import experiments as X
from kalmannet.harness.cli import main
from kalmannet.harness.config import ExperimentConfig, default_config, load_config, parse_config
from kalmannet.harness.gradcheck import check_gradients, gradcheck_suite
from kalmannet.harness.report import MetricReport
from kalmannet.io import save_dataset
from kalmannet.nn import tape as T
from kalmannet.ssm import Dataset, Trajectory, canonical_linear_model, generate_dataset

TINY = """
data.N = 30
data.T = 10
training.epochs = 2
training.batch_size = 8
"""


# ---------------------------------------------------------------- config


def test_parse_config_values():
    cfg = parse_config("""
        # comment line
        experiment.id = curve
        experiment.seed = 7    # trailing comment
        model.F = [[1, 1], [0, 1]]
        model.n = none
        noise.inv_r2_db = 0, 3, 10
        noise.scale_hyperparameters = false
        training.clip_norm = none
        data.split = [0.5, 0.25, 0.25]
    """)
    assert cfg.experiment.id == "curve" and cfg.experiment.seed == 7
    assert cfg.model.F == [[1, 1], [0, 1]] and cfg.model.n is None
    assert cfg.noise.inv_r2_db == [0.0, 3.0, 10.0]
    assert cfg.noise.scale_hyperparameters is False
    assert cfg.training.clip_norm is None
    assert cfg.data.split == [0.5, 0.25, 0.25]
    cfg.validate()


@pytest.mark.parametrize("text", [
    "model.bogus = 1",
    "nosection.m = 1",
    "model = 1",
    "just words",
    "data.N = ten",
    "noise.scale_hyperparameters = maybe",
    "model.F = [[1, 2]",
    "training.mode = reinforce",
])
def test_parse_config_errors(text):
    with pytest.raises(InvalidArgumentError):
        parse_config(text)


@pytest.mark.parametrize("text", [
    "experiment.id = nope",
    "data.split = 0.5, 0.5",
    "noise.inv_r2_db = []",
    "model.F = [[1, 0, 0], [0, 1, 0], [0, 0, 1]]",
    "model.kind = quadratic",
    "online.window = 0",
])
def test_validate_errors(text):
    with pytest.raises(InvalidArgumentError):
        parse_config(text).validate()


@pytest.mark.parametrize("exp", ["curve", "generalize", "convergence", "lorenz", "online", "custom"])
def test_text_round_trip(exp, tmp_path):
    cfg = default_config(exp)
    path = tmp_path / "c.txt"
    path.write_text(cfg.to_text())
    assert load_config(path) == cfg
    assert load_config(path).config_hash() == cfg.config_hash()


def test_config_hash_tracks_numeric_settings_only():
    cfg = default_config("curve")
    moved = cfg.with_overrides("experiment.out = elsewhere")
    assert moved.config_hash() == cfg.config_hash()
    assert cfg.with_overrides("experiment.seed = 1").config_hash() != cfg.config_hash()
    assert cfg.experiment.out == "results"


def test_hyperparameters_scale_with_r2():
    cfg = default_config("curve")
    t20 = cfg.training_at(20.0)
    assert t20.gamma == pytest.approx(cfg.training.gamma * 0.01, rel=1e-12)
    assert t20.clip_norm == pytest.approx(cfg.training.clip_norm * 0.01, rel=1e-12)
    assert cfg.training_at(0.0) == cfg.training
    off = cfg.with_overrides("noise.scale_hyperparameters = false")
    assert off.training_at(20.0) == off.training


def test_model_at_grid_point():
    cfg = default_config("curve").with_overrides("noise.nu_db = -10")
    model = cfg.model_at(10.0)
    np.testing.assert_allclose(model.R, 0.1 * np.eye(2), rtol=1e-12)
    np.testing.assert_allclose(model.Q, 0.01 * np.eye(2), rtol=1e-12)
    lor = default_config("lorenz").model_at(0.0)
    assert lor.m == 3 and lor.dt == 0.02


def test_child_seeds_are_distinct_and_stable():
    seeds = {X.child_seed(0, i, j) for i in range(5) for j in range(4)}
    assert len(seeds) == 20
    assert X.child_seed(3, 1, 2) == X.child_seed(3, 1, 2)


# ---------------------------------------------------------------- reports


def test_report_csv(tmp_path):
    rep = MetricReport()
    rep.add(0.0, 0.0, "kf", -math.inf, 0.5, 80, 10)
    rep.add(3.0, 0.0, "knet", -2.5, 0.25, 80, 10, "diverged 1/10")
    rep.to_csv(tmp_path / "r.csv", {"seed": 4})
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "# seed: 4"
    assert lines[1] == "inv_r2_db,nu_db,estimator,mse_db,runtime,T,N,status"
    assert lines[2] == "0,0,kf,-inf,0.5,80,10,ok"
    assert rep.find("knet", 3.0).status == "diverged 1/10"
    with pytest.raises(KeyError):
        rep.find("knet", 0.0)


# ---------------------------------------------------------------- experiments


def _rows_without_runtime(path):
    with open(path) as fh:
        rows = list(csv.reader(l for l in fh if not l.startswith("#")))
    col = rows[0].index("runtime")
    return [r[:col] + r[col + 1:] for r in rows]


def test_curve_smoke_and_reproducibility(tmp_path):
    cfg = default_config("curve").with_overrides(TINY + "noise.inv_r2_db = 10")
    runs = []
    for name in ("a", "b"):
        c = cfg.copy()
        c.experiment.out = str(tmp_path / name)
        runs.append(X.run_mse_curve(c))
    a, b = runs
    assert [r.estimator for r in a.report.rows] == ["knet", "kf"]
    assert all(math.isfinite(r.mse_db) for r in a.report.rows)
    assert _rows_without_runtime(a.files["report"]) == _rows_without_runtime(b.files["report"])
    # the saved config differs only in experiment.out, which the hash excludes
    assert load_config(a.files["config"]).config_hash() == load_config(b.files["config"]).config_hash()
    for key in ("plot", "checkpoint_10", "learning_10"):
        assert (tmp_path / "a" / a.files[key].split("/")[-1]).read_bytes() == \
            (tmp_path / "b" / b.files[key].split("/")[-1]).read_bytes(), key
    assert len(a.checks) == 2


def test_curve_workers_match_serial(tmp_path):
    cfg = default_config("curve").with_overrides(TINY + "noise.inv_r2_db = 0, 10")
    serial, pooled = cfg.copy(), cfg.copy()
    serial.experiment.out = str(tmp_path / "s")
    pooled.experiment.out = str(tmp_path / "p")
    s = X.run_mse_curve(serial, threads=1)
    p = X.run_mse_curve(pooled, threads=2)
    assert [r.mse_db for r in s.report.rows] == [r.mse_db for r in p.report.rows]


def test_generalization_reuses_checkpoints_and_dead_network_degrades(tmp_path):
    cfg = default_config("curve").with_overrides(TINY + "noise.inv_r2_db = 0")
    cfg.experiment.out = str(tmp_path / "curve")
    X.run_mse_curve(cfg)
    gen = default_config("generalize").with_overrides(
        TINY + f"noise.inv_r2_db = 0\ngeneralize.long_T = 400\ngeneralize.long_N = 3\ngeneralize.short_N = 20\n"
        f"generalize.checkpoint_dir = {tmp_path / 'curve'}")
    gen.experiment.out = str(tmp_path / "gen")
    res = X.run_generalization(gen)
    assert res.files["checkpoint_0"].startswith(str(tmp_path / "curve"))
    zero_short = res.report.find("knet_zero_gain", 0.0, 10).mse_db
    zero_long = res.report.find("knet_zero_gain", 0.0, 400).mse_db
    assert zero_long > zero_short + 10
    names = {c.name.split(" at")[0] for c in res.checks}
    assert any("zero" in n for n in names) and any("kf" in n for n in names)


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_vacuous_pass():
    assert check_gradients(lambda P: T.constant(0.0), {}, np.random.default_rng(0)) == {}


def test_gradcheck_suite_passes():
    results = gradcheck_suite([0, 1])
    assert len(results) == 8 and all(r.passed for r in results)


def test_gradcheck_catches_corrupted_backward(monkeypatch):
    def bad_tanh(x):
        x = T._node(x)
        out = np.tanh(x.value)
        return T._emit(out, (x,), lambda g: (g * (1.0 - out),))    # wrong derivative

    monkeypatch.setattr(T, "tanh", bad_tanh)
    results = gradcheck_suite([0])
    assert not all(r.passed for r in results)
    assert max(r.max_rel_error for r in results) > 1e-2


# ---------------------------------------------------------------- CLI


def test_cli_simulate_train_evaluate(tmp_path, capsys):
    out = str(tmp_path)
    data = str(tmp_path / "d.knds")
    assert main(["simulate", "--N", "20", "--T", "8", "--output", data, "--seed", "3"]) == 0
    assert main(["train-offline", "--data", data, "--epochs", "1", "--out", out,
                 "--set", "training.batch_size=4"]) == 0
    ckpt = str(tmp_path / "knet.ckpt")
    export = str(tmp_path / "steps.csv")
    assert main(["evaluate", "--data", data, "--checkpoint", ckpt, "--export", export, "--out", out]) == 0
    header = [l for l in open(export) if not l.startswith("#")][0].strip().split(",")
    assert header[:3] == ["t", "x_post_0", "x_post_1"] and header[-1] == "gain_1_1"
    assert main(["train-online", "--checkpoint", ckpt, "--data", data, "--out", out,
                 "--set", "online.window=4"]) == 0
    assert (tmp_path / "online.csv").exists()
    printed = capsys.readouterr().out
    assert "kf" in printed and "knet" in printed


def test_cli_global_flags_after_subcommand(tmp_path):
    data = str(tmp_path / "d.knds")
    assert main(["--seed", "1", "simulate", "--N", "2", "--T", "3", "--output", data]) == 0
    assert main(["simulate", "--seed", "1", "--N", "2", "--T", "3", "--output", data + "2"]) == 0
    assert open(data, "rb").read() == open(data + "2", "rb").read()


def test_cli_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["simulate", "--bogus"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 1
    assert main(["simulate", "--set", "model.bogus=1", "--output", str(tmp_path / "x.knds")]) == 1
    assert main(["simulate", "--set", "nokey", "--output", str(tmp_path / "x.knds")]) == 1
    assert main(["evaluate", "--data", str(tmp_path / "missing.knds")]) == 1
    (tmp_path / "bad.knds").write_bytes(b"garbage\n")
    assert main(["evaluate", "--data", str(tmp_path / "bad.knds")]) == 1
    cfg = tmp_path / "c.txt"
    cfg.write_text("data.N = -3\n")
    assert main(["simulate", "--config", str(cfg), "--output", str(tmp_path / "x.knds")]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_numerical_failure_exit_code(tmp_path):
    ds = generate_dataset(canonical_linear_model(2), 10, 5, seed=0)
    trajs = [Trajectory(tr.x0, tr.observations.copy(), tr.states) for tr in ds]
    trajs[0].observations[2, 0] = np.inf
    path = tmp_path / "inf.knds"
    save_dataset(Dataset(trajs, True, 0, ds.model_descriptor), path)
    with np.errstate(invalid="ignore", over="ignore"):
        code = main(["train-offline", "--data", str(path), "--epochs", "1", "--out", str(tmp_path),
                     "--set", "training.batch_size=8", "--set", "data.split=1,0,0"])
    assert code == 2


def test_cli_failed_check_exit_code(capsys):
    assert main(["gradcheck", "--seeds", "1", "--tol", "0"]) == 3
    assert main(["gradcheck", "--seeds", "1"]) == 0
    assert "PASS" in capsys.readouterr().out
