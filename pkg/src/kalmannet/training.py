"""Losses and training loops for the gain network.

Offline training minimizes either the supervised state loss or the
unsupervised innovation loss over mini-batches of whole trajectories, with
gradients from a full backward pass through the unrolled filter. Online
training keeps filtering a stream and, every ``window`` steps, takes optimizer
steps on the innovation loss of the last window only.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from kalmannet.errors import InvalidArgumentError, NumericalError
from kalmannet.knet import KNetState, knet_filter_batch, stack_values
from kalmannet.metrics import mse_db
from kalmannet.nn import tape as T
from kalmannet.nn.layers import GainNetworkParams
from kalmannet.nn.optim import OptimizerState, optimizer_step
from kalmannet.nn.tape import Tape, backward
from kalmannet.ssm import Dataset

log = logging.getLogger(__name__)

__all__ = [
    "TrainingConfig",
    "OnlineConfig",
    "LearningCurve",
    "OnlineResult",
    "supervised_loss",
    "unsupervised_loss",
    "innovation_gradient_oracle",
    "traced_batch_loss",
    "evaluate",
    "train_offline",
    "train_online",
]

SUPERVISED = "supervised"
UNSUPERVISED = "unsupervised"


@dataclass
class TrainingConfig:
    mode: str = UNSUPERVISED
    gamma: float = 1e-4
    batch_size: int = 100
    epochs: int = 200
    learning_rate: float = 1e-3
    seed: int = 0
    eval_every: int = 1
    patience: int = 20
    clip_norm: Optional[float] = 1.0

    def __post_init__(self):
        if self.mode not in (SUPERVISED, UNSUPERVISED):
            raise InvalidArgumentError(f"mode must be supervised or unsupervised, got {self.mode!r}")
        if self.gamma < 0:
            raise InvalidArgumentError("gamma must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise InvalidArgumentError("batch_size and eval_every must be >= 1, epochs >= 0")
        if self.learning_rate <= 0:
            raise InvalidArgumentError("learning_rate must be positive")


@dataclass
class OnlineConfig:
    window: int = 10
    learning_rate: float = 1e-3
    steps_per_window: int = 1
    gamma: float = 0.0

    def __post_init__(self):
        if self.window < 1 or self.steps_per_window < 1:
            raise InvalidArgumentError("window and steps_per_window must be >= 1")


# ----------------------------------------------------------------------------- losses


def _param_sq(params) -> float:
    if params is None:
        return 0.0
    tensors = params.tensors if hasattr(params, "tensors") else params
    return float(sum(np.sum(np.asarray(v) ** 2) for v in tensors.values()))


def _mean_trajectory_sq(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidArgumentError(f"length/shape mismatch: {pred.shape} vs {target.shape}")
    per_step = np.sum((pred - target) ** 2, axis=-1)
    # mean over time per trajectory, then over trajectories
    return float(np.mean(np.mean(per_step, axis=-1)))


def supervised_loss(estimates, truth, params=None, gamma: float = 0.0) -> float:
    """``(1/T) sum_t |x_hat_t - x_t|^2 + gamma |theta|^2``; batched inputs are averaged per trajectory."""
    return _mean_trajectory_sq(estimates, truth) + gamma * _param_sq(params)


def unsupervised_loss(y_priors, observations, params=None, gamma: float = 0.0) -> float:
    """``(1/T) sum_t |y_{t|t-1} - y_t|^2 + gamma |theta|^2``: the mean squared innovation plus regularizer."""
    return _mean_trajectory_sq(y_priors, observations) + gamma * _param_sq(params)


def innovation_gradient_oracle(F, H, K_prev, innov_prev, innov_minus) -> np.ndarray:
    """Analytic gradient of ``|dy_t|^2`` with respect to the previous gain.

    With ``dy_t = dy_t^- - H F K_{t-1} dy_{t-1}`` and
    ``dy_t^- = y_t - H F x_{t-1|t-2}``, the gradient is
    ``2 (H F)^T (H F K_{t-1} dy_{t-1} - dy_t^-) dy_{t-1}^T``.
    """
    HF = np.asarray(H) @ np.asarray(F)
    innov_prev = np.asarray(innov_prev, dtype=np.float64)
    resid = HF @ np.asarray(K_prev) @ innov_prev - np.asarray(innov_minus, dtype=np.float64)
    return 2.0 * np.outer(HF.T @ resid, innov_prev)


def clip_gradients(grads, max_norm: float):
    """Rescale all gradient blocks jointly so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(norm) or norm <= max_norm:
        return grads
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


def traced_batch_loss(P, knowledge, observations, x0, dims, mode: str, gamma: float, states=None,
                      state: Optional[KNetState] = None):
    """Record the filter and its loss on the active tape.

    Returns ``(loss_node, x_posts, y_priors, final_state)``.
    """
    B, steps, _ = observations.shape
    x_posts, y_priors, final, _ = knet_filter_batch(P, knowledge, observations, x0, state=state, dims=dims)
    if mode == SUPERVISED:
        if states is None:
            raise InvalidArgumentError("supervised loss needs ground-truth states")
        outputs, target = x_posts, states
    else:
        outputs, target = y_priors, observations
    err = None
    for t, out in enumerate(outputs):
        term = T.sum_squares(T.sub(out, target[:, t]))
        err = term if err is None else T.add(err, term)
    loss = T.scale(err, 1.0 / (B * steps))
    if gamma > 0:
        reg = None
        for node in P.values():
            term = T.sum_squares(node)
            reg = term if reg is None else T.add(reg, term)
        loss = T.add(loss, T.scale(reg, gamma))
    return loss, x_posts, y_priors, final


def evaluate(params: GainNetworkParams, knowledge, dataset: Dataset, batch_size: int = 1000):
    """Run the trained filter without tracing.

    Returns ``(estimates (N, T, m), y_priors (N, T, n))``.
    """
    Y = dataset.observations()
    x0 = dataset.initial_states()
    est, yp = [], []
    for start in range(0, len(dataset), batch_size):
        x_posts, y_priors, _, _ = knet_filter_batch(params, knowledge, Y[start:start + batch_size],
                                                    x0[start:start + batch_size])
        est.append(stack_values(x_posts))
        yp.append(stack_values(y_priors))
    return np.concatenate(est), np.concatenate(yp)


# ----------------------------------------------------------------------------- offline


@dataclass
class LearningCurve:
    epochs: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_mse_db: List[float] = field(default_factory=list)
    best_epoch: int = 0

    def add(self, epoch, train_loss, val_loss, val_mse):
        self.epochs.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.val_mse_db.append(val_mse)

    def first_epoch_below(self, threshold_db: float) -> Optional[int]:
        for epoch, v in zip(self.epochs, self.val_mse_db):
            if v <= threshold_db:
                return epoch
        return None

    def to_csv(self, path, meta: Optional[dict] = None):
        with open(path, "w", newline="") as fh:
            for k, v in (meta or {}).items():
                fh.write(f"# {k}: {v}\n")
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "val_mse_db"])
            for row in zip(self.epochs, self.train_loss, self.val_loss, self.val_mse_db):
                w.writerow([row[0]] + ["%.17g" % x for x in row[1:]])


def _validation(params, knowledge, validation: Optional[Dataset], mode: str):
    if validation is None:
        return math.nan, math.nan
    est, yp = evaluate(params, knowledge, validation)
    if mode == SUPERVISED:
        loss = supervised_loss(est, validation.states())
    else:
        loss = unsupervised_loss(yp, validation.observations())
    mse = mse_db(est, validation.states()) if validation.labeled else math.nan
    return loss, mse


def train_offline(dataset: Dataset, knowledge, cfg: TrainingConfig, validation: Optional[Dataset] = None,
                  init_params: Optional[GainNetworkParams] = None):
    """Mini-batch training; returns ``(params, LearningCurve)``.

    The curve has one row for the initial parameters (epoch 0) and then one per
    ``eval_every`` epochs. When a validation set is given the returned
    parameters are those with the lowest validation loss of the training
    objective (innovation loss in unsupervised mode, so labels there are only
    used for the reported MSE), and training stops after ``patience``
    evaluations without improvement.
    """
    if cfg.mode == SUPERVISED and not dataset.labeled:
        raise InvalidArgumentError("supervised training needs a labeled dataset")
    if cfg.batch_size > len(dataset):
        raise InvalidArgumentError(f"batch size {cfg.batch_size} exceeds dataset size {len(dataset)}")
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    init_rng = np.random.default_rng(seeds[0])
    shuffle_rng = np.random.default_rng(seeds[1])
    m, n = dataset.m, dataset.n
    params = init_params.copy() if init_params is not None else GainNetworkParams.initialize(m, n, init_rng)
    opt = OptimizerState(learning_rate=cfg.learning_rate)

    Y = dataset.observations()
    X = dataset.states() if cfg.mode == SUPERVISED else None
    x0 = dataset.initial_states()
    N = len(dataset)

    curve = LearningCurve()
    val_loss, val_mse = _validation(params, knowledge, validation, cfg.mode)
    curve.add(0, math.nan, val_loss, val_mse)
    best = (val_loss, params, 0)
    stale = 0

    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(N)
        losses = []
        for b, start in enumerate(range(0, N, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            try:
                with Tape() as tape:
                    P = tape.watch(params.tensors)
                    loss, *_ = traced_batch_loss(P, knowledge, Y[idx], x0[idx], (m, n), cfg.mode, cfg.gamma,
                                                 states=None if X is None else X[idx])
            except NumericalError as exc:
                raise NumericalError(f"{exc} (epoch {epoch}, batch {b})") from exc
            if not math.isfinite(float(loss.value)):
                raise NumericalError(f"non-finite training loss (epoch {epoch}, batch {b})")
            grads = backward(tape, loss)
            if cfg.clip_norm is not None:
                grads = clip_gradients(grads, cfg.clip_norm)
            params = optimizer_step(opt, params, grads, {"epoch": epoch, "batch": b})
            losses.append(float(loss.value))
        if epoch % cfg.eval_every == 0:
            val_loss, val_mse = _validation(params, knowledge, validation, cfg.mode)
            curve.add(epoch, float(np.mean(losses)), val_loss, val_mse)
            log.debug("epoch %d train %.5g val %.5g mse %.3f dB", epoch, np.mean(losses), val_loss, val_mse)
            if validation is not None:
                if val_loss < best[0]:
                    best = (val_loss, params, epoch)
                    stale = 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        break
    if validation is None:
        curve.best_epoch = curve.epochs[-1]
        return params, curve
    curve.best_epoch = best[2]
    return best[1], curve


# ----------------------------------------------------------------------------- online


@dataclass
class OnlineResult:
    estimates: np.ndarray
    y_priors: np.ndarray
    window_end: List[int] = field(default_factory=list)
    mean_innovation_sq: List[float] = field(default_factory=list)
    state_mse_db: List[float] = field(default_factory=list)
    params: List[GainNetworkParams] = field(default_factory=list)
    skipped: List[int] = field(default_factory=list)
    final_params: Optional[GainNetworkParams] = None

    @property
    def n_updates(self) -> int:
        return len(self.window_end) - len(self.skipped)

    def to_csv(self, path, meta: Optional[dict] = None):
        with open(path, "w", newline="") as fh:
            for k, v in (meta or {}).items():
                fh.write(f"# {k}: {v}\n")
            w = csv.writer(fh)
            w.writerow(["t", "window_index", "mean_innovation_sq", "state_mse_db"])
            for i, (t, e, s) in enumerate(zip(self.window_end, self.mean_innovation_sq, self.state_mse_db)):
                w.writerow([t, i, "%.17g" % e, "%.17g" % s])


def train_online(observations: np.ndarray, x0, params: GainNetworkParams, knowledge, cfg: OnlineConfig,
                 states: Optional[np.ndarray] = None, keep_params: bool = False) -> OnlineResult:
    """Filter a stream (T, n) while adapting on the innovation loss every ``cfg.window`` steps.

    The filter state entering a window is treated as a constant, so gradients
    stop at window boundaries. A window whose update is non-finite is skipped
    and the previous parameters are kept. ``states`` (T, m), if given, is used
    only to report per-window state MSE.
    """
    Y = np.asarray(observations, dtype=np.float64)
    steps, n = Y.shape
    m = params.m
    dims = (m, n)
    state = KNetState.initial(knowledge, np.asarray(x0, dtype=np.float64)[None], params.d_g)
    opt = OptimizerState(learning_rate=cfg.learning_rate)
    estimates = np.empty((steps, m))
    y_priors = np.empty((steps, n))
    result = OnlineResult(estimates, y_priors)
    W = cfg.window

    full_windows = steps // W
    for w in range(full_windows):
        t0, t1 = w * W, (w + 1) * W
        Yw = Y[None, t0:t1]
        with Tape() as tape:
            P = tape.watch(params.tensors)
            loss, x_posts, yps, new_state = traced_batch_loss(P, knowledge, Yw, None, dims, UNSUPERVISED,
                                                              cfg.gamma, state=state)
        estimates[t0:t1] = stack_values(x_posts)[0]
        y_priors[t0:t1] = stack_values(yps)[0]
        result.window_end.append(t1)
        result.mean_innovation_sq.append(float(np.mean(np.sum((Y[t0:t1] - y_priors[t0:t1]) ** 2, axis=-1))))
        result.state_mse_db.append(mse_db(estimates[t0:t1], states[t0:t1]) if states is not None else math.nan)

        candidate = params
        try:
            for k in range(cfg.steps_per_window):
                if k > 0:
                    with Tape() as tape:
                        P = tape.watch(candidate.tensors)
                        loss, *_ = traced_batch_loss(P, knowledge, Yw, None, dims, UNSUPERVISED, cfg.gamma,
                                                     state=state)
                if not math.isfinite(float(loss.value)):
                    raise NumericalError(f"non-finite online loss (window {w})")
                grads = backward(tape, loss)
                candidate = optimizer_step(opt, candidate, grads, {"window": w, "step": k})
            params = candidate
        except NumericalError as exc:
            log.warning("skipping online update for window %d: %s", w, exc)
            result.skipped.append(w)
        if keep_params:
            result.params.append(params)
        state = new_state.detached()

    if full_windows * W < steps:
        t0 = full_windows * W
        x_posts, yps, _, _ = knet_filter_batch(params, knowledge, Y[None, t0:], None, state=state)
        estimates[t0:] = stack_values(x_posts)[0]
        y_priors[t0:] = stack_values(yps)[0]
    result.final_params = params
    return result
