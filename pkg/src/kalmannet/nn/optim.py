"""Adaptive-moment (Adam) first-order optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from kalmannet.errors import NumericalError

__all__ = ["OptimizerState", "optimizer_step"]


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moment1: Dict[str, np.ndarray] = field(default_factory=dict)
    moment2: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.learning_rate, self.beta1, self.beta2, self.eps, self.step,
            {k: v.copy() for k, v in self.moment1.items()},
            {k: v.copy() for k, v in self.moment2.items()},
        )


def optimizer_step(opt: OptimizerState, params, grads: Dict[str, np.ndarray], context: Optional[dict] = None):
    """Apply one bias-corrected Adam update and return new parameters.

    ``params`` is a :class:`GainNetworkParams` or a plain ``{name: array}`` dict;
    the return value has the same type. ``opt`` is advanced in place.
    ``context`` (e.g. ``{"epoch": 3, "batch": 7}``) is quoted in error messages.
    """
    tensors = params.tensors if hasattr(params, "tensors") else params
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            where = ", ".join(f"{k} {v}" for k, v in (context or {}).items())
            raise NumericalError(f"non-finite gradient in parameter block {name}" + (f" ({where})" if where else ""))
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    updated = {}
    for name, p in tensors.items():
        g = grads.get(name)
        if g is None:
            updated[name] = p
            continue
        m = opt.moment1.get(name)
        v = opt.moment2.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        opt.moment1[name] = m
        opt.moment2[name] = v
        updated[name] = p - opt.learning_rate * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    if hasattr(params, "replace"):
        return params.replace(updated)
    return updated
