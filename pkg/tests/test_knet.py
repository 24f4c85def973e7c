import numpy as np
import pytest

from kalmannet.errors import InvalidArgumentError, NumericalError
from kalmannet.knet import KNetState, knet_features, knet_filter, knet_filter_batch, predict_state, stack_values
from kalmannet.nn import GainNetworkParams, Tape, backward
from kalmannet.nn import tape as T
from kalmannet.ssm import LinearKnowledge, LorenzModel, canonical_linear_model, generate_dataset, lorenz_transition
from kalmannet.training import innovation_gradient_oracle

from oracles import random_linear_model


def trained_like(m, n, seed=0):
    # full-size output layer so the gain is far from zero
    return GainNetworkParams.initialize(m, n, np.random.default_rng(seed), out_scale=1.0)


@pytest.mark.parametrize("seed", range(5))
def test_linear_wiring_identities(seed):
    rng = np.random.default_rng(seed)
    m, n = (int(v) for v in rng.integers(1, 4, size=2))
    model = random_linear_model(rng, m, n)
    ds = generate_dataset(model, 1, 15, x0=rng.normal(size=m), seed=seed)
    tr = ds[0]
    est, recs = knet_filter(trained_like(m, n, seed), model.knowledge(), tr)
    prev = tr.x0
    for t, r in enumerate(recs):
        np.testing.assert_allclose(r.x_prior, model.F @ prev, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(r.y_prior, model.H @ r.x_prior, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(r.innovation, tr.observations[t] - r.y_prior, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(r.x_post, r.x_prior + r.gain @ r.innovation, rtol=1e-12, atol=1e-12)
        assert r.gain.shape == (m, n)
        prev = r.x_post
    np.testing.assert_array_equal(est, np.stack([r.x_post for r in recs]))


def test_lorenz_prediction_uses_taylor_transition():
    model = LorenzModel(q2=1e-2, r2=1e-2)
    ds = generate_dataset(model, 1, 10, seed=3)
    _, recs = knet_filter(trained_like(3, 3), model.knowledge(), ds[0])
    prev = ds[0].x0
    for r in recs:
        np.testing.assert_allclose(r.x_prior, lorenz_transition(model, prev) @ prev, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(r.x_post, r.x_prior + r.gain @ r.innovation, rtol=1e-12, atol=1e-12)
        prev = r.x_post


def test_gain_is_row_major_reshape_of_output_layer():
    m, n = 2, 3
    params = GainNetworkParams.zeros(m, n)
    bias = np.arange(m * n, dtype=float) / 10
    params = params.replace({"fc_out.b": bias})
    model = canonical_linear_model(m, n)
    ds = generate_dataset(model, 1, 3, seed=0)
    _, recs = knet_filter(params, model.knowledge(), ds[0])
    for r in recs:
        np.testing.assert_array_equal(r.gain, bias.reshape(m, n))


def test_zero_output_layer_gives_open_loop_prediction():
    model = canonical_linear_model(2)
    ds = generate_dataset(model, 1, 6, seed=1)
    est, recs = knet_filter(GainNetworkParams.initialize(2, 2, np.random.default_rng(0), out_scale=0.0),
                            model.knowledge(), ds[0])
    x = ds[0].x0
    for t in range(6):
        x = model.F @ x
        np.testing.assert_allclose(est[t], x, rtol=1e-14)
        assert not np.any(recs[t].gain)


def test_knowledge_boundary():
    model = canonical_linear_model(2)
    ds = generate_dataset(model, 1, 4, seed=0)
    params = trained_like(2, 2)
    for bad in (model, LorenzModel(), {"F": model.F, "H": model.H}):
        with pytest.raises(TypeError):
            knet_filter(params, bad, ds[0])
    for knowledge in (model.knowledge(), LorenzModel().knowledge()):
        names = {f for f in vars(knowledge)}
        assert not names & {"Q", "R", "q2", "r2", "q_factor", "r_factor"}
    assert isinstance(model.knowledge(), LinearKnowledge)


def test_batch_matches_single_and_tracing_does_not_change_values():
    model = canonical_linear_model(2)
    ds = generate_dataset(model, 3, 12, seed=5)
    params = trained_like(2, 2, 1)
    x_posts, y_priors, _, _ = knet_filter_batch(params, model.knowledge(), ds.observations(), ds.initial_states())
    batched = stack_values(x_posts)
    for i, tr in enumerate(ds):
        np.testing.assert_allclose(batched[i], knet_filter(params, model.knowledge(), tr)[0], rtol=1e-12,
                                   atol=1e-12)
    with Tape() as tape:
        P = tape.watch(params.tensors)
        traced, _, _, _ = knet_filter_batch(P, model.knowledge(), ds.observations(), ds.initial_states(), dims=(2, 2))
    np.testing.assert_array_equal(stack_values(traced), batched)
    assert len(tape) > 0


def test_normalized_features_have_unit_rms_at_first_step():
    knowledge = canonical_linear_model(2).knowledge()
    st = KNetState.initial(knowledge, np.array([[0.5, -1.0]]), 4)
    y = np.array([[3.0, -4.0]])
    y_prior = T.linear_map(predict_state(knowledge, st.x_post), knowledge.H)
    feats, innov, ms_diff, _ = knet_features(st, y, y_prior)
    f = feats.value.reshape(2, 2)
    np.testing.assert_allclose(np.mean(f ** 2, axis=1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(innov.value, y - y_prior.value, rtol=1e-14)
    np.testing.assert_allclose(ms_diff.value, np.mean((y - st.y_prev) ** 2, keepdims=True), rtol=1e-14)


def test_innovation_gradient_through_the_filter_matches_closed_form():
    # |dy_2|^2 depends on the parameters only through K_1 = reshape(W h_1 + b),
    # so its gradient w.r.t. the output bias is the closed-form gain gradient.
    rng = np.random.default_rng(11)
    m, n = 3, 2
    model = random_linear_model(rng, m, n)
    ds = generate_dataset(model, 1, 2, x0=rng.normal(size=m), seed=2)
    Y, x0 = ds.observations(), ds.initial_states()
    params = trained_like(m, n, 4)
    with Tape() as tape:
        P = tape.watch(params.tensors)
        _, y_priors, _, recs = knet_filter_batch(P, model.knowledge(), Y, x0, dims=(m, n), keep_records=True)
        loss = T.sum_squares(T.sub(Y[:, 1], y_priors[1]))
    grads = backward(tape, loss)
    r1 = recs[0]
    K1 = r1.gain.value[0]
    innov1 = r1.innovation.value[0]
    innov_minus = Y[0, 1] - model.H @ model.F @ r1.x_prior.value[0]
    oracle = innovation_gradient_oracle(model.F, model.H, K1, innov1, innov_minus)
    np.testing.assert_allclose(grads["fc_out.b"], oracle.reshape(-1), rtol=1e-6, atol=1e-10)
    h1 = _hidden_after_first_step(params, model, Y, x0)
    np.testing.assert_allclose(grads["fc_out.W"], np.outer(oracle.reshape(-1), h1), rtol=1e-6, atol=1e-10)
    np.testing.assert_allclose(loss.value, np.sum((innov_minus - model.H @ model.F @ K1 @ innov1) ** 2), rtol=1e-12)


def _hidden_after_first_step(params, model, Y, x0):
    _, _, state, _ = knet_filter_batch(params, model.knowledge(), Y[:, :1], x0)
    return state.h.value[0]


def test_non_finite_gain_reports_step():
    model = canonical_linear_model(2)
    ds = generate_dataset(model, 1, 3, seed=0)
    P = dict(GainNetworkParams.zeros(2, 2).tensors)
    P["fc_out.b"] = np.array([0.0, np.inf, 0.0, 0.0])
    with pytest.raises(NumericalError) as info:
        knet_filter_batch(P, model.knowledge(), ds.observations(), ds.initial_states(), dims=(2, 2))
    assert "step 1" in str(info.value)


def test_observation_width_mismatch():
    model = canonical_linear_model(2)
    with pytest.raises(InvalidArgumentError):
        knet_filter_batch(trained_like(2, 2), model.knowledge(), np.zeros((1, 4, 3)), np.zeros((1, 2)))
