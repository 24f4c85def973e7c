"""Independent reference computations used by the tests."""
import numpy as np
import scipy.linalg

from kalmannet.ssm import LinearModel


def random_linear_model(rng, m, n, scale=1.0):
    F = rng.normal(size=(m, m)) * 0.7
    H = rng.normal(size=(n, m))
    A = rng.normal(size=(m, m))
    B = rng.normal(size=(n, n))
    Q = scale * (A @ A.T / m + 0.1 * np.eye(m))
    R = scale * (B @ B.T / n + 0.1 * np.eye(n))
    return LinearModel(F, H, Q, R)


def conditional_means(model, x0, Y):
    """E[x_t | y_1..y_t] for every t by conditioning the joint Gaussian of all states
    and observations; x0 is known exactly."""
    F, H, Q, R = model.F, model.H, model.Q, model.R
    m, n = model.m, model.n
    T = Y.shape[0]
    # x_t = F^t x0 + sum_{k<=t} F^{t-k} w_k
    powers = [np.linalg.matrix_power(F, k) for k in range(T + 1)]
    mean_x = np.concatenate([powers[t] @ x0 for t in range(1, T + 1)])
    L = np.zeros((T * m, T * m))
    for t in range(T):
        for k in range(t + 1):
            L[t * m:(t + 1) * m, k * m:(k + 1) * m] = powers[t - k]
    cov_x = L @ np.kron(np.eye(T), Q) @ L.T
    Hbig = np.kron(np.eye(T), H)
    cov_y = Hbig @ cov_x @ Hbig.T + np.kron(np.eye(T), R)
    cov_xy = cov_x @ Hbig.T
    mean_y = Hbig @ mean_x
    out = np.empty((T, m))
    for t in range(T):
        k = (t + 1) * n
        gain = np.linalg.solve(cov_y[:k, :k], cov_xy[t * m:(t + 1) * m, :k].T).T
        out[t] = mean_x[t * m:(t + 1) * m] + gain @ (Y[:t + 1].ravel() - mean_y[:k])
    return out


def dare_prior(model):
    """Steady prior covariance from scipy's discrete algebraic Riccati solver."""
    return scipy.linalg.solve_discrete_are(model.F.T, model.H.T, model.Q, model.R)


def steady_posterior(model):
    P = dare_prior(model)
    S = model.H @ P @ model.H.T + model.R
    K = P @ model.H.T @ np.linalg.inv(S)
    return P - K @ S @ K.T, K
