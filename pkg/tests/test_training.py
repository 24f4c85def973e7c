import math

import numpy as np
import pytest

import kalmannet.training as training
from kalmannet.errors import InvalidArgumentError, NumericalError
from kalmannet.filters import kf_filter_batch
from kalmannet.knet import knet_filter
from kalmannet.metrics import mse_db
from kalmannet.nn import GainNetworkParams, Tape, backward
from kalmannet.ssm import Dataset, LinearModel, Trajectory, canonical_linear_model, generate_dataset
from kalmannet.training import (
    OnlineConfig,
    TrainingConfig,
    clip_gradients,
    evaluate,
    innovation_gradient_oracle,
    supervised_loss,
    traced_batch_loss,
    train_offline,
    train_online,
    unsupervised_loss,
)

STABLE = LinearModel.isotropic([[0.9, 0.1], [0.0, 0.9]], np.eye(2), 1.0, 1.0)


def test_supervised_loss_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert supervised_loss(x, x) == 0.0
    assert supervised_loss(x, x, params={"w": np.array([2.0])}, gamma=1.0) == 4.0
    assert supervised_loss(x + np.array([[1.0, 0.0], [0.0, 2.0]]), x) == 2.5


def test_unsupervised_loss_examples_and_symmetry():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 7, 2)), rng.normal(size=(3, 7, 2))
    params = {"w": rng.normal(size=(2, 2))}
    assert unsupervised_loss(b, b) == 0.0
    assert unsupervised_loss(a, b, params, 0.3) == supervised_loss(a, b, params, 0.3)
    assert unsupervised_loss(a, b) == pytest.approx(unsupervised_loss(b, a), rel=1e-15)
    # batched input averages the per-trajectory losses
    per = [unsupervised_loss(a[i], b[i]) for i in range(3)]
    assert unsupervised_loss(a, b) == pytest.approx(np.mean(per), rel=1e-14)


def test_loss_length_mismatch():
    with pytest.raises(InvalidArgumentError):
        supervised_loss(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(InvalidArgumentError):
        unsupervised_loss(np.zeros((3, 2)), np.zeros((3, 1)))


def test_kf_innovation_loss_matches_steady_state_innovation_variance():
    model = LinearModel.isotropic([[1.0]], [[1.0]], 1.0, 1.0)
    ds = generate_dataset(model, 1, 10_000, seed=21)
    Y = ds.observations()
    est, _ = kf_filter_batch(model, Y, ds.initial_states())
    prev = np.concatenate([ds.initial_states()[:, None], est[:, :-1]], axis=1)
    golden = (1 + math.sqrt(5)) / 2
    assert unsupervised_loss(prev, Y) == pytest.approx(golden + 1, rel=0.03)


def test_innovation_gradient_oracle_examples():
    rng = np.random.default_rng(3)
    F, H, K = rng.normal(size=(2, 2)), rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    np.testing.assert_array_equal(innovation_gradient_oracle(F, H, K, np.zeros(2), rng.normal(size=2)),
                                  np.zeros((2, 2)))
    k, d_prev, d_minus = 0.7, 1.3, -0.4
    g = innovation_gradient_oracle([[1.0]], [[1.0]], [[k]], [d_prev], [d_minus])
    assert g[0, 0] == pytest.approx(2 * (k * d_prev - d_minus) * d_prev, rel=1e-15)


def test_innovation_gradient_oracle_matches_finite_differences():
    rng = np.random.default_rng(12)
    F, H, K = rng.normal(size=(2, 2)), rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    d_prev, d_minus = rng.normal(size=2), rng.normal(size=2)
    f = lambda KK: float(np.sum((d_minus - H @ F @ KK @ d_prev) ** 2))
    num = np.zeros((2, 2))
    for idx in np.ndindex(2, 2):
        e = np.zeros((2, 2))
        e[idx] = 1e-6
        num[idx] = (f(K + e) - f(K - e)) / 2e-6
    np.testing.assert_allclose(innovation_gradient_oracle(F, H, K, d_prev, d_minus), num, rtol=1e-6)


def test_traced_loss_matches_plain_losses():
    model = canonical_linear_model(2)
    ds = generate_dataset(model, 4, 9, seed=3)
    params = GainNetworkParams.initialize(2, 2, np.random.default_rng(1), out_scale=1.0)
    est, yp = evaluate(params, model.knowledge(), ds)
    for mode, expected in (("supervised", supervised_loss(est, ds.states(), params, 1e-3)),
                           ("unsupervised", unsupervised_loss(yp, ds.observations(), params, 1e-3))):
        with Tape():
            loss, *_ = traced_batch_loss(params.tensors, model.knowledge(), ds.observations(), ds.initial_states(),
                                         (2, 2), mode, 1e-3, states=ds.states())
        assert float(loss.value) == pytest.approx(expected, rel=1e-12)


def test_clip_gradients():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    out = clip_gradients(g, 1.0)
    np.testing.assert_allclose([out["a"][0], out["b"][0]], [0.6, 0.8], rtol=1e-15)
    assert clip_gradients(g, 10.0) is g


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        TrainingConfig(mode="reinforce")
    with pytest.raises(InvalidArgumentError):
        TrainingConfig(gamma=-1.0)
    with pytest.raises(InvalidArgumentError):
        TrainingConfig(batch_size=0)
    with pytest.raises(InvalidArgumentError):
        OnlineConfig(window=0)
    ds = generate_dataset(STABLE, 4, 5, seed=0)
    with pytest.raises(InvalidArgumentError):
        train_offline(ds, STABLE.knowledge(), TrainingConfig(batch_size=5))
    with pytest.raises(InvalidArgumentError):
        train_offline(ds.unlabeled(), STABLE.knowledge(), TrainingConfig(mode="supervised", batch_size=2))


def test_training_reduces_loss_and_is_deterministic():
    model = canonical_linear_model(2)
    ds = generate_dataset(model, 40, 20, seed=1)
    val = generate_dataset(model, 20, 20, seed=2)
    cfg = TrainingConfig(batch_size=10, epochs=6, learning_rate=1e-2, seed=3)
    p1, c1 = train_offline(ds, model.knowledge(), cfg, validation=val)
    p2, c2 = train_offline(ds, model.knowledge(), cfg, validation=val)
    assert p1 == p2
    assert c1.train_loss[1:] == c2.train_loss[1:] and c1.val_mse_db == c2.val_mse_db
    assert min(c1.val_loss) < c1.val_loss[0]
    assert c1.val_loss[c1.epochs.index(c1.best_epoch)] == min(c1.val_loss)
    est, _ = evaluate(p1, model.knowledge(), val)
    assert mse_db(est, val.states()) == pytest.approx(c1.val_mse_db[c1.epochs.index(c1.best_epoch)], abs=1e-12)


def test_learning_curve_csv(tmp_path):
    ds = generate_dataset(STABLE, 10, 5, seed=0)
    _, curve = train_offline(ds, STABLE.knowledge(), TrainingConfig(batch_size=5, epochs=2), validation=ds)
    curve.to_csv(tmp_path / "c.csv", meta={"seed": 0})
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "# seed: 0"
    assert lines[1] == "epoch,train_loss,val_loss,val_mse_db"
    assert len(lines) == 2 + 3


def test_huge_gamma_shrinks_to_zero_gain_rollout():
    ds = generate_dataset(STABLE, 20, 20, seed=1)
    cfg = TrainingConfig(gamma=1e6, batch_size=10, epochs=60, learning_rate=1e-2, seed=0)
    params, _ = train_offline(ds, STABLE.knowledge(), cfg)
    init = GainNetworkParams.initialize(2, 2, np.random.default_rng(np.random.SeedSequence(0).spawn(2)[0]))
    assert params.squared_norm() < 1e-4 * init.squared_norm()
    assert np.abs(params["fc_out.b"]).max() < 1e-3
    est, _ = evaluate(params, STABLE.knowledge(), ds)
    zero, _ = evaluate(GainNetworkParams.zeros(2, 2), STABLE.knowledge(), ds)
    assert mse_db(est, ds.states()) == pytest.approx(mse_db(zero, ds.states()), abs=0.01)


def test_regularization_is_monotone_in_gamma():
    model = canonical_linear_model(2)
    ds = generate_dataset(model, 40, 20, seed=1)
    norms = []
    for gamma in (0.0, 1e-4, 1e-2, 1.0):
        cfg = TrainingConfig(gamma=gamma, batch_size=10, epochs=10, learning_rate=1e-2, seed=0)
        params, _ = train_offline(ds, model.knowledge(), cfg)
        norms.append(params.squared_norm())
    assert all(a >= b for a, b in zip(norms, norms[1:])), norms


def test_non_finite_loss_aborts_with_diagnostics():
    model = canonical_linear_model(2)
    ds = generate_dataset(model, 4, 5, seed=0)
    Y = ds.observations()
    Y[2, 3, 0] = np.inf
    bad = Dataset([Trajectory(tr.x0, Y[i], tr.states) for i, tr in enumerate(ds)], True, 0, ds.model_descriptor)
    with pytest.raises(NumericalError) as info, np.errstate(invalid="ignore", over="ignore"):
        train_offline(bad, model.knowledge(), TrainingConfig(batch_size=4, epochs=1))
    assert "epoch 1" in str(info.value)


# ---------------------------------------------------------------- online


def pretrained():
    return GainNetworkParams.initialize(2, 2, np.random.default_rng(4), out_scale=0.1)


def test_online_window_longer_than_stream_gives_zero_updates():
    ds = generate_dataset(STABLE, 1, 25, seed=6)
    tr = ds[0]
    params = pretrained()
    res = train_online(tr.observations, tr.x0, params, STABLE.knowledge(), OnlineConfig(window=30),
                       states=tr.states)
    assert res.n_updates == 0 and res.window_end == []
    assert res.final_params == params
    est, recs = knet_filter(params, STABLE.knowledge(), tr)
    np.testing.assert_array_equal(res.estimates, est)
    np.testing.assert_array_equal(res.y_priors, np.stack([r.y_prior for r in recs]))


def test_online_updates_every_window_and_stops_gradients_at_boundaries():
    ds = generate_dataset(STABLE, 1, 35, seed=6)
    tr = ds[0]
    params = pretrained()
    res = train_online(tr.observations, tr.x0, params, STABLE.knowledge(), OnlineConfig(window=10),
                       states=tr.states, keep_params=True)
    assert res.window_end == [10, 20, 30] and res.n_updates == 3
    assert len(res.params) == 3 and res.final_params == res.params[-1]
    assert res.final_params != params
    # the first window is filtered with the initial parameters
    est, _ = knet_filter(params, STABLE.knowledge(), tr)
    np.testing.assert_array_equal(res.estimates[:10], est[:10])
    assert not np.array_equal(res.estimates[10:], est[10:])
    assert np.all(np.isfinite(res.state_mse_db))


def test_online_skips_non_finite_update(monkeypatch):
    ds = generate_dataset(STABLE, 1, 30, seed=6)
    tr = ds[0]
    params = pretrained()
    real_step = training.optimizer_step
    calls = []

    def flaky(opt, p, grads, context=None):
        calls.append(context)
        if len(calls) == 1:
            raise NumericalError("non-finite gradient in parameter block fc_out.W")
        return real_step(opt, p, grads, context)

    monkeypatch.setattr(training, "optimizer_step", flaky)
    res = train_online(tr.observations, tr.x0, params, STABLE.knowledge(), OnlineConfig(window=10),
                       keep_params=True)
    assert res.skipped == [0] and res.n_updates == 2
    assert res.params[0] == params
    assert res.params[1] != params


def test_online_csv(tmp_path):
    ds = generate_dataset(STABLE, 1, 20, seed=6)
    tr = ds[0]
    res = train_online(tr.observations, tr.x0, pretrained(), STABLE.knowledge(), OnlineConfig(window=10),
                       states=tr.states)
    res.to_csv(tmp_path / "o.csv")
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert lines[0] == "t,window_index,mean_innovation_sq,state_mse_db"
    assert [l.split(",")[:2] for l in lines[1:]] == [["10", "0"], ["20", "1"]]
