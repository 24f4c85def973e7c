"""Model-based Kalman filter (linear) and extended Kalman filter (Lorenz).

The per-step functions mirror the textbook recursion one quantity at a time
and are what the tests check against closed-form oracles. ``kf_filter_batch``
and ``ekf_filter_batch`` run the same recursion over many trajectories at once
for the experiment harness.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg

from kalmannet.errors import DivergenceError, InvalidArgumentError, NumericalError
from kalmannet.ssm import LinearModel, LorenzModel, Trajectory, lorenz_propagate, lorenz_transition

__all__ = [
    "KfState",
    "KfStepRecord",
    "kf_predict",
    "kf_gain",
    "kf_update",
    "kf_filter",
    "ekf_filter",
    "kf_filter_batch",
    "ekf_filter_batch",
    "riccati_steady_state",
]

COND_LIMIT = 1e12
PSD_TOL = 1e-9
DIVERGENCE_LIMIT = 1e6


@dataclass
class KfState:
    x_post: np.ndarray
    sigma_post: np.ndarray
    t: int = 0


@dataclass
class KfStepRecord:
    x_prior: np.ndarray
    y_prior: np.ndarray
    sigma_prior: np.ndarray
    s_prior: np.ndarray
    gain: np.ndarray
    innovation: np.ndarray
    x_post: np.ndarray
    sigma_post: np.ndarray


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def kf_predict(model: LinearModel, st: KfState, F: Optional[np.ndarray] = None):
    """Prior mean/covariance of the state and the observation.

    ``F`` overrides ``model.F`` (the EKF passes its linearization here).
    """
    F = model.F if F is None else F
    if st.x_post.shape != (model.m,) or st.sigma_post.shape != (model.m, model.m):
        raise InvalidArgumentError("state dimensions do not match the model")
    x_prior = F @ st.x_post
    y_prior = model.H @ x_prior
    sigma_prior = _symmetrize(F @ st.sigma_post @ F.T + model.Q)
    s_prior = _symmetrize(model.H @ sigma_prior @ model.H.T + model.R)
    return x_prior, y_prior, sigma_prior, s_prior


def kf_gain(sigma_prior: np.ndarray, H: np.ndarray, s_prior: np.ndarray, step: Optional[int] = None) -> np.ndarray:
    """``Sigma_prior H^T S^{-1}`` via a Cholesky solve.

    An identically zero ``S`` (noiseless model with an exact prior) yields a zero
    gain, the pseudo-inverse limit.
    """
    cross = sigma_prior @ H.T
    if not np.any(s_prior):
        return np.zeros_like(cross)
    cond = np.linalg.cond(s_prior)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NumericalError(f"innovation covariance is singular or ill-conditioned (cond={cond:.3g})", step)
    try:
        factor = scipy.linalg.cho_factor(s_prior)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance is not positive definite", step) from exc
    # K S = cross  <=>  S K^T = cross^T  (S symmetric)
    return scipy.linalg.cho_solve(factor, cross.T).T


def kf_update(st: KfState, x_prior, y_prior, sigma_prior, s_prior, K, y_t) -> Tuple[KfState, KfStepRecord]:
    innovation = y_t - y_prior
    x_post = x_prior + K @ innovation
    sigma_post = _symmetrize(sigma_prior - K @ s_prior @ K.T)
    scale = max(1.0, float(np.abs(sigma_prior).max()))
    if np.linalg.eigvalsh(sigma_post).min() < -PSD_TOL * scale:
        raise NumericalError("posterior covariance became indefinite", st.t + 1)
    record = KfStepRecord(x_prior, y_prior, sigma_prior, s_prior, K, innovation, x_post, sigma_post)
    return KfState(x_post, sigma_post, st.t + 1), record


def _initial_state(traj: Trajectory, m: int, sigma0) -> KfState:
    if traj.x0.shape != (m,):
        raise InvalidArgumentError(f"x0 must have shape ({m},)")
    sigma0 = np.zeros((m, m)) if sigma0 is None else np.asarray(sigma0, dtype=np.float64)
    return KfState(traj.x0.copy(), sigma0, 0)


def kf_filter(model: LinearModel, traj: Trajectory, sigma0=None) -> Tuple[np.ndarray, List[KfStepRecord]]:
    """Run the Kalman filter over one trajectory; ``sigma0`` defaults to 0 (known x0)."""
    if traj.n != model.n:
        raise InvalidArgumentError("observation dimension does not match the model")
    st = _initial_state(traj, model.m, sigma0)
    estimates = np.empty((traj.T, model.m))
    records = []
    for t, y_t in enumerate(traj.observations):
        x_prior, y_prior, sigma_prior, s_prior = kf_predict(model, st)
        K = kf_gain(sigma_prior, model.H, s_prior, step=t + 1)
        st, rec = kf_update(st, x_prior, y_prior, sigma_prior, s_prior, K, y_t)
        estimates[t] = st.x_post
        records.append(rec)
    return estimates, records


def ekf_filter(model: LorenzModel, traj: Trajectory, sigma0=None) -> Tuple[np.ndarray, List[KfStepRecord]]:
    """Extended KF: the transition F(x) is re-evaluated at each posterior estimate
    and used for both the mean and the covariance propagation."""
    st = _initial_state(traj, 3, sigma0)
    estimates = np.empty((traj.T, 3))
    records = []
    for t, y_t in enumerate(traj.observations):
        F = lorenz_transition(model, st.x_post)
        x_prior, y_prior, sigma_prior, s_prior = kf_predict(model, st, F=F)
        K = kf_gain(sigma_prior, model.H, s_prior, step=t + 1)
        st, rec = kf_update(st, x_prior, y_prior, sigma_prior, s_prior, K, y_t)
        if not np.all(np.isfinite(st.x_post)) or np.linalg.norm(st.x_post) > DIVERGENCE_LIMIT:
            raise DivergenceError("EKF estimate diverged", t + 1)
        estimates[t] = st.x_post
        records.append(rec)
    return estimates, records


def kf_filter_batch(model: LinearModel, observations: np.ndarray, x0: np.ndarray, sigma0=None):
    """Kalman filter over a stack of trajectories sharing x0's covariance.

    ``observations`` has shape (N, T, n) and ``x0`` shape (N, m) or (m,). The
    covariance recursion does not depend on the data, so the gain sequence is
    computed once. Returns ``(estimates (N, T, m), gains (T, m, n))``.
    """
    N, T, _ = observations.shape
    m = model.m
    x = np.broadcast_to(np.asarray(x0, dtype=np.float64), (N, m)).copy()
    st = KfState(np.zeros(m), np.zeros((m, m)) if sigma0 is None else np.asarray(sigma0, dtype=np.float64))
    estimates = np.empty((N, T, m))
    gains = np.empty((T, m, model.n))
    for t in range(T):
        _, _, sigma_prior, s_prior = kf_predict(model, st)
        K = kf_gain(sigma_prior, model.H, s_prior, step=t + 1)
        sigma_post = _symmetrize(sigma_prior - K @ s_prior @ K.T)
        st = KfState(st.x_post, sigma_post, t + 1)
        gains[t] = K
        x_prior = x @ model.F.T
        x = x_prior + (observations[:, t] - x_prior @ model.H.T) @ K.T
        estimates[:, t] = x
    return estimates, gains


def ekf_filter_batch(model: LorenzModel, observations: np.ndarray, x0: np.ndarray, sigma0=None) -> np.ndarray:
    """Vectorized EKF over (N, T, 3) observations; returns estimates (N, T, 3).

    Trajectories whose estimate diverges are marked with NaN from that step on
    rather than aborting the batch.
    """
    N, T, n = observations.shape
    x = np.broadcast_to(np.asarray(x0, dtype=np.float64), (N, 3)).copy()
    P = np.zeros((N, 3, 3)) if sigma0 is None else np.broadcast_to(sigma0, (N, 3, 3)).copy()
    H, Q, R = model.H, model.Q, model.R
    dt = model.dt
    estimates = np.empty((N, T, 3))
    for t in range(T):
        A = np.zeros((N, 3, 3))
        A[:, 0, 0], A[:, 0, 1] = -model.sigma, model.sigma
        A[:, 1, 0], A[:, 1, 1] = model.rho - x[:, 2], -1.0
        A[:, 2, 0], A[:, 2, 2] = x[:, 1], -model.beta
        A *= dt
        F = np.broadcast_to(np.eye(3), (N, 3, 3)).copy()
        term = F.copy()
        for j in range(1, model.taylor_order + 1):
            term = term @ A / j
            F += term
        x_prior = lorenz_propagate(model, x)
        P_prior = F @ P @ F.transpose(0, 2, 1) + Q
        S = H @ P_prior @ H.T + R
        cross = P_prior @ H.T
        if np.any(S):
            K = np.linalg.solve(S, cross.transpose(0, 2, 1)).transpose(0, 2, 1)
        else:
            K = np.zeros_like(cross)
        innov = observations[:, t] - x_prior @ H.T
        x = x_prior + np.einsum("bij,bj->bi", K, innov)
        P = P_prior - K @ S @ K.transpose(0, 2, 1)
        P = 0.5 * (P + P.transpose(0, 2, 1))
        bad = ~np.isfinite(x).all(axis=1) | (np.linalg.norm(x, axis=1) > DIVERGENCE_LIMIT)
        if bad.any():
            x[bad] = np.nan
            P[bad] = np.nan
        estimates[:, t] = x
    return estimates


def riccati_steady_state(model: LinearModel, tol: float = 1e-13, max_iter: int = 100000):
    """Iterate the covariance recursion to its fixed point.

    Returns ``(sigma_prior, s_prior, gain, sigma_post)`` at steady state.
    """
    st = KfState(np.zeros(model.m), np.zeros((model.m, model.m)))
    prev = None
    for _ in range(max_iter):
        _, _, sigma_prior, s_prior = kf_predict(model, st)
        K = kf_gain(sigma_prior, model.H, s_prior)
        sigma_post = _symmetrize(sigma_prior - K @ s_prior @ K.T)
        st = KfState(st.x_post, sigma_post)
        if prev is not None and np.abs(sigma_prior - prev).max() < tol:
            return sigma_prior, s_prior, K, sigma_post
        prev = sigma_prior
    raise NumericalError("Riccati recursion did not converge")
