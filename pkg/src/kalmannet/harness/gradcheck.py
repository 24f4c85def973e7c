"""Finite-difference checks of the reverse-mode gradients.

Each check perturbs a random sample of entries in every parameter block and
compares central differences with the tape gradient. The error of a block is
``|a - d| / max(|a|, |d|)`` over the sampled entries (vector norms), so a
block whose sampled gradient is exactly zero on both sides counts as exact.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from kalmannet.nn import tape as T
from kalmannet.nn.layers import GainNetworkParams
from kalmannet.nn.tape import Tape, backward
from kalmannet.ssm import LorenzModel, canonical_linear_model, generate_dataset
from kalmannet.training import innovation_gradient_oracle, traced_batch_loss

__all__ = ["GradcheckResult", "check_gradients", "gradcheck_suite", "DEFAULT_TOL"]

DEFAULT_TOL = 1e-4


@dataclass
class GradcheckResult:
    name: str
    seed: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} seed={self.seed} max_rel_err={self.max_rel_error:.3e}"


def _rel(a: np.ndarray, d: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(d))
    return 0.0 if denom == 0.0 else float(np.linalg.norm(a - d) / denom)


def check_gradients(loss_fn: Callable[[Dict[str, T.Node]], T.Node], arrays: Dict[str, np.ndarray],
                    rng: np.random.Generator, entries_per_block: int = 4, eps: float = 1e-6) -> Dict[str, float]:
    """Relative error of the tape gradient of ``loss_fn`` per block of ``arrays``.

    An empty ``arrays`` dict is a vacuous pass (returns ``{}``).
    """
    if not arrays:
        return {}
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    with Tape() as tape:
        nodes = tape.watch(arrays)
        loss = loss_fn(nodes)
    grads = backward(tape, loss)

    def value(name, flat_idx, delta):
        pert = dict(arrays)
        a = arrays[name].copy()
        a.flat[flat_idx] += delta
        pert[name] = a
        return float(loss_fn(pert).value)

    errors = {}
    for name, arr in arrays.items():
        if arr.size == 0:
            errors[name] = 0.0
            continue
        idx = rng.choice(arr.size, size=min(entries_per_block, arr.size), replace=False)
        analytic = grads[name].ravel()[idx]
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            h = eps * max(1.0, abs(arr.flat[i]))
            numeric[j] = (value(name, i, h) - value(name, i, -h)) / (2 * h)
        errors[name] = _rel(analytic, numeric)
    return errors


def _knet_check(seed: int, kind: str, mode: str, tol: float) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    if kind == "lorenz":
        model = LorenzModel(q2=0.1, r2=0.1)
        steps = 3
    else:
        m, n = (int(v) for v in rng.integers(1, 4, size=2))
        model = canonical_linear_model(m, n, q2=0.5, r2=0.5)
        steps = 4
    ds = generate_dataset(model, 2, steps, seed=seed)
    params = GainNetworkParams.initialize(model.m, model.n, rng, out_scale=1.0)
    knowledge = model.knowledge()
    Y, x0, X = ds.observations(), ds.initial_states(), ds.states()
    gamma = 1e-3

    def loss_fn(P):
        loss, *_ = traced_batch_loss(P, knowledge, Y, x0, (model.m, model.n), mode, gamma, states=X)
        return loss

    errs = check_gradients(loss_fn, params.tensors, rng)
    return GradcheckResult(f"bptt/{kind}/{mode}", seed, max(errs.values()), tol)


def _oracle_check(seed: int, tol: float) -> GradcheckResult:
    """Closed-form innovation gradient w.r.t. the previous gain vs finite differences."""
    rng = np.random.default_rng(seed)
    m, n = (int(v) for v in rng.integers(1, 4, size=2))
    F, H = rng.standard_normal((m, m)), rng.standard_normal((n, m))
    K = rng.standard_normal((m, n))
    dy_prev, dy_minus = rng.standard_normal(n), rng.standard_normal(n)

    def loss_fn(P):
        # innovation at t: dy_minus - H F K dy_prev, written with tape ops
        Kdy = T.batched_matvec(T.reshape(P["K"], (1, m, n)), dy_prev[None])
        innov = T.sub(dy_minus[None], T.linear_map(Kdy, H @ F))
        return T.sum_squares(innov)

    with Tape() as tape:
        P = tape.watch({"K": K})
        loss = loss_fn(P)
    tape_grad = backward(tape, loss)["K"]
    oracle = innovation_gradient_oracle(F, H, K, dy_prev, dy_minus)
    f = lambda KK: float(np.sum((dy_minus - H @ F @ KK @ dy_prev) ** 2))
    numeric = np.empty_like(K)
    for i in range(K.size):
        h = 1e-6 * max(1.0, abs(K.flat[i]))
        Kp, Km = K.copy(), K.copy()
        Kp.flat[i] += h
        Km.flat[i] -= h
        numeric.flat[i] = (f(Kp) - f(Km)) / (2 * h)
    err = max(_rel(oracle, numeric), _rel(tape_grad, numeric))
    return GradcheckResult("innovation-oracle", seed, err, tol)


def gradcheck_suite(seeds: Sequence[int], tol: float = DEFAULT_TOL) -> List[GradcheckResult]:
    """Innovation oracle plus full BPTT checks (linear both losses, Lorenz) per seed."""
    results = []
    for seed in seeds:
        results.append(_oracle_check(seed, tol))
        results.append(_knet_check(seed, "linear", "unsupervised", tol))
        results.append(_knet_check(seed, "linear", "supervised", tol))
        results.append(_knet_check(seed, "lorenz", "unsupervised", tol))
    return results
