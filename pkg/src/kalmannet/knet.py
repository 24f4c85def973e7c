"""KalmanNet: the Kalman filter recursion with a recurrent network producing the gain.

Only the known evolution/measurement maps enter the recursion, through a
``LinearKnowledge`` or ``LorenzKnowledge`` object; noise covariances are never
available here. All steps are written with tape primitives, so running inside
an active :class:`~kalmannet.nn.Tape` records the whole unrolled filter for
backpropagation through time. Every array carries a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np

from kalmannet.errors import InvalidArgumentError, NumericalError
from kalmannet.nn import tape as T
from kalmannet.nn.layers import GainNetworkParams, fc_forward, gru_forward
from kalmannet.ssm import LinearKnowledge, LorenzKnowledge, Trajectory

__all__ = [
    "KNetState",
    "KNetStepRecord",
    "knet_features",
    "knet_step",
    "knet_filter",
    "knet_filter_batch",
    "predict_state",
    "RMS_FLOOR",
    "stack_values",
]

Knowledge = Union[LinearKnowledge, LorenzKnowledge]
RMS_FLOOR = 1e-8


def _val(x):
    return x.value if isinstance(x, T.Node) else x


@dataclass
class KNetState:
    """Filter state entering step ``t + 1``.

    ``ms_diff``/``ms_innov`` are the running mean squares (per component) of the
    two input features, used for normalization.
    """

    x_post: object
    x_post_prev: object
    y_prev: object
    h: object
    ms_diff: object
    ms_innov: object
    t: int = 0

    @classmethod
    def initial(cls, knowledge: Knowledge, x0, d_g: int) -> "KNetState":
        x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        B = x0.shape[0]
        return cls(
            x_post=x0.copy(),
            x_post_prev=x0.copy(),
            y_prev=x0 @ knowledge.H.T,
            h=np.zeros((B, d_g)),
            ms_diff=np.zeros((B, 1)),
            ms_innov=np.zeros((B, 1)),
            t=0,
        )

    def detached(self) -> "KNetState":
        """Same state with every tape node replaced by its value (gradient stop)."""
        return KNetState(*(np.array(_val(getattr(self, k))) for k in
                           ("x_post", "x_post_prev", "y_prev", "h", "ms_diff", "ms_innov")), t=self.t)


@dataclass
class KNetStepRecord:
    x_prior: object
    y_prior: object
    innovation: object
    gain: object
    x_post: object


def _check_knowledge(knowledge):
    if not isinstance(knowledge, (LinearKnowledge, LorenzKnowledge)):
        raise TypeError(
            f"KalmanNet takes LinearKnowledge or LorenzKnowledge (F/H only), got {type(knowledge).__name__}; "
            "use model.knowledge()"
        )


def predict_state(knowledge: Knowledge, x):
    """Known-dynamics prediction ``x_{t|t-1}`` as a tape operation."""
    if isinstance(knowledge, LinearKnowledge):
        return T.linear_map(x, knowledge.F)
    term = x
    out = x
    for j in range(1, knowledge.taylor_order + 1):
        term = T.scale(T.lorenz_matvec(x, term, knowledge.sigma, knowledge.rho, knowledge.beta), knowledge.dt / j)
        out = T.add(out, term)
    return out


def _running_mean_square(ms_prev, f, n: int, t: int):
    # cumulative mean of |f|^2 / n over steps 1..t
    return T.add(ms_prev, T.scale(T.sub(T.scale(T.row_sum_squares(f), 1.0 / n), ms_prev), 1.0 / t))


def knet_features(st: KNetState, y_t, y_prior):
    """Normalized network input and updated normalizer statistics.

    Features are the observation difference ``y_t - y_{t-1}`` and the innovation
    ``y_t - y_{t|t-1}``, each divided by ``sqrt(running mean square + floor^2)``.
    Returns ``(features, innovation, ms_diff, ms_innov)``.
    """
    n = _val(y_t).shape[-1]
    t = st.t + 1
    diff = T.sub(y_t, st.y_prev)
    innov = T.sub(y_t, y_prior)
    ms_diff = _running_mean_square(st.ms_diff, diff, n, t)
    ms_innov = _running_mean_square(st.ms_innov, innov, n, t)
    floor2 = RMS_FLOOR * RMS_FLOOR
    f1 = T.div(diff, T.sqrt(T.add(ms_diff, floor2)))
    f2 = T.div(innov, T.sqrt(T.add(ms_innov, floor2)))
    return T.concat([f1, f2]), innov, ms_diff, ms_innov


def _param_nodes(params):
    if isinstance(params, GainNetworkParams):
        return params.tensors, params
    return params, None


def knet_step(params, knowledge: Knowledge, st: KNetState, y_t, dims: Optional[tuple] = None):
    """One KalmanNet step on a batch; returns ``(new_state, record)``.

    ``params`` is a :class:`GainNetworkParams` or a ``{name: Node}`` dict produced
    by ``Tape.watch`` (then ``dims=(m, n)`` must be given).
    """
    _check_knowledge(knowledge)
    P, gp = _param_nodes(params)
    m, n = (gp.m, gp.n) if gp is not None else dims
    y_t = np.atleast_2d(np.asarray(y_t, dtype=np.float64))
    if y_t.shape[-1] != n:
        raise InvalidArgumentError(f"observation has width {y_t.shape[-1]}, expected {n}")
    B = y_t.shape[0]
    step = st.t + 1

    x_prior = predict_state(knowledge, st.x_post)
    y_prior = T.linear_map(x_prior, knowledge.H)
    features, innov, ms_diff, ms_innov = knet_features(st, y_t, y_prior)

    hidden = T.tanh(fc_forward(P["fc_in.W"], P["fc_in.b"], features, "fc_in"))
    gru_p = {k: P["gru." + k] for k in ("W_z", "b_z", "W_r", "b_r", "W_c", "b_c")}
    h = gru_forward(gru_p, st.h, hidden, "gru")
    k_flat = T.affine(h, P["fc_out.W"], P["fc_out.b"])
    if not np.all(np.isfinite(k_flat.value)):
        raise NumericalError("non-finite Kalman gain", step)
    gain = T.reshape(k_flat, (B, m, n))
    x_post = T.add(x_prior, T.batched_matvec(gain, innov))

    new_state = KNetState(x_post, st.x_post, y_t, h, ms_diff, ms_innov, step)
    return new_state, KNetStepRecord(x_prior, y_prior, innov, gain, x_post)


def knet_filter_batch(params, knowledge: Knowledge, observations: np.ndarray, x0, state: Optional[KNetState] = None,
                      dims: Optional[tuple] = None, keep_records: bool = False):
    """Run KalmanNet over a batch of observation sequences of shape (B, T, n).

    Returns ``(x_posts, y_priors, final_state, records)`` where ``x_posts`` and
    ``y_priors`` are lists of per-step outputs (tape nodes when tracing) and
    ``records`` is the list of step records when ``keep_records`` is set.
    """
    _check_knowledge(knowledge)
    observations = np.asarray(observations, dtype=np.float64)
    if observations.ndim == 2:
        observations = observations[None]
    if state is None:
        d_g = params.d_g if isinstance(params, GainNetworkParams) else _val(params["gru.b_z"]).shape[0]
        state = KNetState.initial(knowledge, x0, d_g)
    x_posts, y_priors, records = [], [], []
    for t in range(observations.shape[1]):
        state, rec = knet_step(params, knowledge, state, observations[:, t], dims=dims)
        x_posts.append(rec.x_post)
        y_priors.append(rec.y_prior)
        if keep_records:
            records.append(rec)
    return x_posts, y_priors, state, records


def stack_values(nodes: List) -> np.ndarray:
    """Per-step (B, d) outputs -> array (B, T, d)."""
    return np.stack([_val(x) for x in nodes], axis=1)


def knet_filter(params: GainNetworkParams, knowledge: Knowledge, traj: Trajectory):
    """Filter a single trajectory; returns ``(estimates (T, m), records)``.

    Record fields are plain arrays with the batch axis removed. When called
    inside an active tape the graph is recorded on it as a side effect.
    """
    x_posts, _, _, recs = knet_filter_batch(params, knowledge, traj.observations[None], traj.x0[None],
                                            keep_records=True)
    estimates = stack_values(x_posts)[0]
    records = [KNetStepRecord(*(np.array(_val(getattr(r, f))[0]) for f in
                                ("x_prior", "y_prior", "innovation", "gain", "x_post"))) for r in recs]
    return estimates, records
