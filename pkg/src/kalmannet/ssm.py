"""State-space models and reproducible trajectory generation.

Two model families are provided: a linear-Gaussian model ``x_t = F x_{t-1} + w_t``,
``y_t = H x_t + v_t`` and a discretized Lorenz attractor whose transition matrix
is a truncated Taylor series of the matrix exponential of the state-dependent
Lorenz dynamics matrix. Datasets are generated with one independent random
substream per trajectory so that generation is reproducible and order-free.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Union

import numpy as np

from kalmannet.errors import InvalidArgumentError

__all__ = [
    "LinearModel",
    "LorenzModel",
    "NoiseSpec",
    "LinearKnowledge",
    "LorenzKnowledge",
    "Trajectory",
    "Dataset",
    "db_to_linear",
    "linear_to_db",
    "canonical_linear_model",
    "step_state",
    "observe",
    "lorenz_dynamics_matrix",
    "lorenz_transition",
    "lorenz_propagate",
    "generate_dataset",
    "trajectory_rng",
    "model_from_descriptor",
]


def db_to_linear(value_db: float) -> float:
    return 10.0 ** (value_db / 10.0)


def linear_to_db(value: float) -> float:
    return 10.0 * math.log10(value)


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise InvalidArgumentError(f"{name} must be a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def _check_psd(a: np.ndarray, name: str) -> None:
    if a.shape[0] != a.shape[1]:
        raise InvalidArgumentError(f"{name} must be square, got {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise InvalidArgumentError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(a).min() < -1e-12 * max(1.0, np.abs(a).max()):
        raise InvalidArgumentError(f"{name} must be positive semi-definite")


def _noise_factor(cov: np.ndarray) -> np.ndarray:
    """Return L with L @ L.T == cov; handles singular (e.g. zero) covariances."""
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
    factor.setflags(write=False)
    return factor


def _vec(x, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (dim,):
        raise InvalidArgumentError(f"{name} must have shape ({dim},), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class NoiseSpec:
    """Process/observation noise variances on a linear scale."""

    q2: float
    r2: float

    def __post_init__(self):
        if not (self.q2 > 0 and self.r2 > 0):
            raise InvalidArgumentError("q2 and r2 must be positive")

    @property
    def nu(self) -> float:
        return self.q2 / self.r2

    @property
    def nu_db(self) -> float:
        return linear_to_db(self.nu)

    @classmethod
    def from_db(cls, inv_r2_db: float, nu_db: float = 0.0) -> "NoiseSpec":
        """Build from the ``1/r^2`` grid coordinate and ``nu = q^2/r^2``, both in dB."""
        r2 = db_to_linear(-inv_r2_db)
        return cls(q2=r2 * db_to_linear(nu_db), r2=r2)


@dataclass(frozen=True)
class LinearKnowledge:
    """The part of a linear model a learned filter may see: F and H only."""

    F: np.ndarray
    H: np.ndarray

    @property
    def m(self) -> int:
        return self.F.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Batched state prediction ``x @ F.T``; ``x`` has shape (B, m)."""
        return x @ self.F.T


@dataclass(frozen=True, eq=False)
class LinearModel:
    F: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        F = _as_matrix(self.F, "F")
        H = _as_matrix(self.H, "H")
        Q = _as_matrix(self.Q, "Q")
        R = _as_matrix(self.R, "R")
        m, n = F.shape[0], H.shape[0]
        if F.shape != (m, m):
            raise InvalidArgumentError(f"F must be square, got {F.shape}")
        if H.shape != (n, m):
            raise InvalidArgumentError(f"H must be {n}x{m}, got {H.shape}")
        if Q.shape != (m, m) or R.shape != (n, n):
            raise InvalidArgumentError("Q must be m x m and R must be n x n")
        _check_psd(Q, "Q")
        _check_psd(R, "R")
        for name, val in zip("FHQR", (F, H, Q, R)):
            object.__setattr__(self, name, val)

    @classmethod
    def isotropic(cls, F, H, q2: float, r2: float) -> "LinearModel":
        F = np.asarray(F, dtype=np.float64)
        H = np.asarray(H, dtype=np.float64)
        return cls(F, H, q2 * np.eye(F.shape[0]), r2 * np.eye(H.shape[0]))

    @property
    def m(self) -> int:
        return self.F.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @cached_property
    def q_factor(self) -> np.ndarray:
        return _noise_factor(self.Q)

    @cached_property
    def r_factor(self) -> np.ndarray:
        return _noise_factor(self.R)

    def knowledge(self) -> LinearKnowledge:
        return LinearKnowledge(self.F, self.H)

    def with_noise(self, q2: float, r2: float) -> "LinearModel":
        return LinearModel.isotropic(self.F, self.H, q2, r2)

    def descriptor(self) -> dict:
        return {
            "kind": "linear",
            "F": self.F.tolist(),
            "H": self.H.tolist(),
            "Q": self.Q.tolist(),
            "R": self.R.tolist(),
        }

    def __eq__(self, other):
        if not isinstance(other, LinearModel):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in "FHQR")

    __hash__ = None


def canonical_linear_model(m: int, n: Optional[int] = None, q2: float = 1.0, r2: float = 1.0,
                           F=None, H=None, form: str = "triangular") -> LinearModel:
    """Structured linear model with ``Q = q2 I`` and ``R = r2 I``.

    ``form="triangular"`` (default): F is the identity with its first row set to
    ones and H is the identity with its last row set to ones, e.g. for m = n = 2
    ``F = [[1, 1], [0, 1]]`` and ``H = [[1, 0], [1, 1]]``. F is marginally stable
    (all eigenvalues 1).

    ``form="companion"``: F has a unit superdiagonal and last row
    ``0.1 * (-1)**k``; H is identity-like. Its stability is checked.

    ``F``/``H`` overrides replace the structured matrices verbatim.
    """
    n = m if n is None else n
    if form not in ("triangular", "companion"):
        raise InvalidArgumentError(f"unknown canonical form {form!r}")
    if F is None:
        if form == "triangular":
            F = np.eye(m)
            F[0, :] = 1.0
        else:
            F = np.diag(np.ones(m - 1), k=1) if m > 1 else np.zeros((1, 1))
            F[-1, :] = 0.1 * (-1.0) ** np.arange(m)
            radius = np.abs(np.linalg.eigvals(F)).max()
            if radius >= 1.0:
                raise InvalidArgumentError(f"companion F is not stable (spectral radius {radius})")
    if H is None:
        H = np.eye(n, m)
        if form == "triangular":
            H[-1, :] = 1.0
    return LinearModel.isotropic(F, H, q2, r2)


# ----------------------------------------------------------------------------- Lorenz


def lorenz_dynamics_matrix(x, sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.array([
        [-sigma, sigma, 0.0],
        [rho - x[2], -1.0, 0.0],
        [x[1], 0.0, -beta],
    ])


def _lorenz_apply(x: np.ndarray, v: np.ndarray, sigma, rho, beta) -> np.ndarray:
    """Batched ``A(x) @ v`` for arrays of shape (B, 3)."""
    out = np.empty_like(v)
    out[:, 0] = sigma * (v[:, 1] - v[:, 0])
    out[:, 1] = (rho - x[:, 2]) * v[:, 0] - v[:, 1]
    out[:, 2] = x[:, 1] * v[:, 0] - beta * v[:, 2]
    return out


@dataclass(frozen=True)
class LorenzKnowledge:
    """Lorenz dynamics constants and H; no noise statistics."""

    sigma: float
    rho: float
    beta: float
    dt: float
    taylor_order: int
    H: np.ndarray

    @property
    def m(self) -> int:
        return 3

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return lorenz_propagate(self, x)


@dataclass(frozen=True, eq=False)
class LorenzModel:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    dt: float = 0.02
    taylor_order: int = 5
    q2: float = 1.0
    r2: float = 1.0
    H: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        H = _as_matrix(self.H, "H")
        if H.shape != (3, 3):
            raise InvalidArgumentError(f"Lorenz H must be 3x3, got {H.shape}")
        object.__setattr__(self, "H", H)
        if not (self.sigma > 0 and self.rho > 0 and self.beta > 0):
            raise InvalidArgumentError("Lorenz coefficients must be positive")
        if self.dt < 0:
            raise InvalidArgumentError("dt must be non-negative")
        if int(self.taylor_order) != self.taylor_order or self.taylor_order < 1:
            raise InvalidArgumentError("taylor_order must be a positive integer")
        if self.q2 < 0 or self.r2 < 0:
            raise InvalidArgumentError("noise variances must be non-negative")

    m = 3
    n = 3

    @property
    def Q(self) -> np.ndarray:
        return self.q2 * np.eye(3)

    @property
    def R(self) -> np.ndarray:
        return self.r2 * np.eye(3)

    @cached_property
    def q_factor(self) -> np.ndarray:
        return _noise_factor(self.Q)

    @cached_property
    def r_factor(self) -> np.ndarray:
        return _noise_factor(self.R)

    def knowledge(self) -> LorenzKnowledge:
        return LorenzKnowledge(self.sigma, self.rho, self.beta, self.dt, self.taylor_order, self.H)

    def with_noise(self, q2: float, r2: float) -> "LorenzModel":
        return LorenzModel(self.sigma, self.rho, self.beta, self.dt, self.taylor_order, q2, r2, self.H)

    def descriptor(self) -> dict:
        return {
            "kind": "lorenz",
            "sigma": self.sigma, "rho": self.rho, "beta": self.beta,
            "dt": self.dt, "taylor_order": self.taylor_order,
            "q2": self.q2, "r2": self.r2, "H": self.H.tolist(),
        }

    def __eq__(self, other):
        if not isinstance(other, LorenzModel):
            return NotImplemented
        return self.descriptor() == other.descriptor()

    __hash__ = None


Model = Union[LinearModel, LorenzModel]


def lorenz_transition(model: Union[LorenzModel, LorenzKnowledge], x) -> np.ndarray:
    """Discrete transition ``F(x) = sum_{j=0..J} (A(x) dt)^j / j!`` at state ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (3,):
        raise InvalidArgumentError(f"Lorenz state must have shape (3,), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("Lorenz state must be finite")
    A = lorenz_dynamics_matrix(x, model.sigma, model.rho, model.beta) * model.dt
    F = np.eye(3)
    term = np.eye(3)
    for j in range(1, model.taylor_order + 1):
        term = term @ A / j
        F = F + term
    return F


def lorenz_propagate(model: Union[LorenzModel, LorenzKnowledge], x: np.ndarray) -> np.ndarray:
    """Batched ``F(x) @ x`` for x of shape (B, 3) without forming F."""
    term = x
    out = x.copy()
    for j in range(1, model.taylor_order + 1):
        term = _lorenz_apply(x, term, model.sigma, model.rho, model.beta) * (model.dt / j)
        out = out + term
    return out


def model_from_descriptor(desc: dict) -> Model:
    kind = desc.get("kind")
    if kind == "linear":
        return LinearModel(desc["F"], desc["H"], desc["Q"], desc["R"])
    if kind == "lorenz":
        return LorenzModel(desc["sigma"], desc["rho"], desc["beta"], desc["dt"],
                           int(desc["taylor_order"]), desc["q2"], desc["r2"], np.array(desc["H"]))
    raise InvalidArgumentError(f"unknown model kind {kind!r}")


# ----------------------------------------------------------------------------- sampling


def step_state(model: LinearModel, x_prev, rng: np.random.Generator) -> np.ndarray:
    x_prev = _vec(x_prev, model.m, "x_prev")
    return model.F @ x_prev + model.q_factor @ rng.standard_normal(model.m)


def observe(model: Model, x_t, rng: np.random.Generator) -> np.ndarray:
    x_t = _vec(x_t, model.m, "x_t")
    return model.H @ x_t + model.r_factor @ rng.standard_normal(model.n)


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for trajectory ``index`` of a dataset seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


# ----------------------------------------------------------------------------- containers


class Trajectory:
    """One rollout: known initial state, optional ground truth and observations."""

    __slots__ = ("x0", "states", "observations")

    def __init__(self, x0, observations, states=None):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.observations = np.asarray(observations, dtype=np.float64)
        self.states = None if states is None else np.asarray(states, dtype=np.float64)
        if self.x0.ndim != 1 or self.observations.ndim != 2:
            raise InvalidArgumentError("x0 must be a vector and observations a T x n array")
        if self.states is not None and (
            self.states.shape[0] != self.observations.shape[0] or self.states.shape[1] != self.x0.shape[0]
        ):
            raise InvalidArgumentError(
                f"states shape {self.states.shape} inconsistent with T={self.T}, m={self.m}"
            )

    @property
    def T(self) -> int:
        return self.observations.shape[0]

    @property
    def m(self) -> int:
        return self.x0.shape[0]

    @property
    def n(self) -> int:
        return self.observations.shape[1]

    @property
    def labeled(self) -> bool:
        return self.states is not None

    def unlabeled(self) -> "Trajectory":
        return Trajectory(self.x0, self.observations)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        if self.labeled != other.labeled:
            return False
        same = np.array_equal(self.x0, other.x0) and np.array_equal(self.observations, other.observations)
        return same and (not self.labeled or np.array_equal(self.states, other.states))

    __hash__ = None

    def __repr__(self):
        return f"Trajectory(m={self.m}, n={self.n}, T={self.T}, labeled={self.labeled})"


@dataclass(eq=False)
class Dataset:
    trajectories: list
    labeled: bool
    seed: int
    model_descriptor: dict

    def __post_init__(self):
        if not self.trajectories:
            raise InvalidArgumentError("a dataset needs at least one trajectory")
        first = self.trajectories[0]
        for tr in self.trajectories:
            if (tr.m, tr.n) != (first.m, first.n):
                raise InvalidArgumentError("all trajectories must share m and n")
            if tr.labeled != self.labeled:
                raise InvalidArgumentError("labeled flag does not match trajectory contents")

    def __len__(self):
        return len(self.trajectories)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Dataset(self.trajectories[idx], self.labeled, self.seed, self.model_descriptor)
        return self.trajectories[idx]

    def __iter__(self):
        return iter(self.trajectories)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.labeled == other.labeled
            and self.seed == other.seed
            and json.dumps(self.model_descriptor, sort_keys=True) == json.dumps(other.model_descriptor, sort_keys=True)
            and self.trajectories == other.trajectories
        )

    __hash__ = None

    @property
    def m(self) -> int:
        return self.trajectories[0].m

    @property
    def n(self) -> int:
        return self.trajectories[0].n

    @property
    def T(self) -> int:
        lengths = {tr.T for tr in self.trajectories}
        if len(lengths) != 1:
            raise InvalidArgumentError("trajectories have different lengths")
        return lengths.pop()

    def subset(self, indices) -> "Dataset":
        return Dataset([self.trajectories[i] for i in indices], self.labeled, self.seed, self.model_descriptor)

    def unlabeled(self) -> "Dataset":
        return Dataset([tr.unlabeled() for tr in self.trajectories], False, self.seed, self.model_descriptor)

    def observations(self) -> np.ndarray:
        """Stacked observations, shape (N, T, n)."""
        return np.stack([tr.observations for tr in self.trajectories])

    def states(self) -> np.ndarray:
        """Stacked ground truth, shape (N, T, m)."""
        if not self.labeled:
            raise InvalidArgumentError("dataset is unlabeled")
        return np.stack([tr.states for tr in self.trajectories])

    def initial_states(self) -> np.ndarray:
        return np.stack([tr.x0 for tr in self.trajectories])

    def split(self, fractions=(0.8, 0.1, 0.1)):
        """Contiguous train/validation/test split by trajectory; empty parts are ``None``."""
        N = len(self)
        cuts = np.floor(np.cumsum(fractions)[:-1] * N).astype(int)
        bounds = [0, *cuts.tolist(), N]
        return tuple(self.subset(range(a, b)) if b > a else None for a, b in zip(bounds[:-1], bounds[1:]))


def generate_dataset(model: Model, N: int, T: int, x0=None, labeled: bool = True, seed: int = 0) -> Dataset:
    """Roll out ``N`` trajectories of length ``T`` from the known initial state ``x0``.

    Trajectory ``i`` draws its noise from ``trajectory_rng(seed, i)``: first the
    T x m process noise, then the T x n observation noise.
    """
    if N < 1 or T < 1:
        raise InvalidArgumentError("N and T must be >= 1")
    m, n = model.m, model.n
    if x0 is None:
        x0 = np.ones(3) if isinstance(model, LorenzModel) else np.zeros(m)
    x0 = _vec(x0, m, "x0")

    W = np.empty((N, T, m))
    V = np.empty((N, T, n))
    for i in range(N):
        rng = trajectory_rng(seed, i)
        W[i] = rng.standard_normal((T, m)) @ model.q_factor.T
        V[i] = rng.standard_normal((T, n)) @ model.r_factor.T

    X = np.empty((N, T, m))
    x = np.broadcast_to(x0, (N, m)).copy()
    for t in range(T):
        if isinstance(model, LorenzModel):
            x = lorenz_propagate(model, x) + W[:, t]
        else:
            x = x @ model.F.T + W[:, t]
        X[:, t] = x
    Y = X @ model.H.T + V

    trajs = [Trajectory(x0.copy(), Y[i], X[i] if labeled else None) for i in range(N)]
    return Dataset(trajs, labeled, int(seed), model.descriptor())
