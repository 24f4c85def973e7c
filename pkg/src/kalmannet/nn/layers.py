"""Gain-network parameters and the two layer types it uses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from kalmannet.errors import InvalidArgumentError, NumericalError
from kalmannet.nn import tape as T

__all__ = ["GainNetworkParams", "network_dims", "param_shapes", "fc_forward", "gru_forward", "PARAM_NAMES"]

PARAM_NAMES = (
    "fc_in.W", "fc_in.b",
    "gru.W_z", "gru.b_z", "gru.W_r", "gru.b_r", "gru.W_c", "gru.b_c",
    "fc_out.W", "fc_out.b",
)


def network_dims(m: int, n: int) -> tuple:
    """``(d_in, d_h, d_g)`` for an m-state, n-observation model."""
    d_in = 2 * n
    d_h = 10 * (m + n)
    d_g = int(np.clip(4 * (m * m + n * n), 32, 256))
    return d_in, d_h, d_g


def param_shapes(m, n, d_in, d_h, d_g) -> Dict[str, tuple]:
    d_out = m * n
    return {
        "fc_in.W": (d_h, d_in), "fc_in.b": (d_h,),
        "gru.W_z": (d_g, d_g + d_h), "gru.b_z": (d_g,),
        "gru.W_r": (d_g, d_g + d_h), "gru.b_r": (d_g,),
        "gru.W_c": (d_g, d_g + d_h), "gru.b_c": (d_g,),
        "fc_out.W": (d_out, d_g), "fc_out.b": (d_out,),
    }


@dataclass(eq=False)
class GainNetworkParams:
    """All trainable arrays of the gain network plus the model dimensions they serve.

    ``tensors`` maps each name in ``PARAM_NAMES`` to a float64 array. Instances are
    treated as immutable snapshots; the optimizer returns new ones.
    """

    m: int
    n: int
    d_in: int
    d_h: int
    d_g: int
    tensors: Dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.shapes()
        if set(self.tensors) != set(expected):
            raise InvalidArgumentError(f"parameter names {sorted(self.tensors)} do not match {sorted(expected)}")
        for name, shape in expected.items():
            arr = np.asarray(self.tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise InvalidArgumentError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"{name} has non-finite entries")
            self.tensors[name] = arr

    def shapes(self) -> Dict[str, tuple]:
        return param_shapes(self.m, self.n, self.d_in, self.d_h, self.d_g)

    @classmethod
    def initialize(cls, m: int, n: int, rng: np.random.Generator, dims=None,
                   out_scale: float = 0.01) -> "GainNetworkParams":
        """Glorot-uniform FC layers, uniform(+-1/sqrt(d_g)) GRU weights, zero biases.

        The output layer's Glorot draw is multiplied by ``out_scale`` so the
        initial gain is close to zero; a full-size random gain typically makes the
        error dynamics unstable.
        """
        d_in, d_h, d_g = network_dims(m, n) if dims is None else dims
        d_out = m * n

        def glorot(fan_out, fan_in):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=(fan_out, fan_in))

        gru_bound = 1.0 / np.sqrt(d_g)
        tensors = {
            "fc_in.W": glorot(d_h, d_in),
            "fc_in.b": np.zeros(d_h),
            "gru.W_z": rng.uniform(-gru_bound, gru_bound, size=(d_g, d_g + d_h)),
            "gru.b_z": np.zeros(d_g),
            "gru.W_r": rng.uniform(-gru_bound, gru_bound, size=(d_g, d_g + d_h)),
            "gru.b_r": np.zeros(d_g),
            "gru.W_c": rng.uniform(-gru_bound, gru_bound, size=(d_g, d_g + d_h)),
            "gru.b_c": np.zeros(d_g),
            "fc_out.W": glorot(d_out, d_g) * out_scale,
            "fc_out.b": np.zeros(d_out),
        }
        return cls(m, n, d_in, d_h, d_g, tensors)

    @classmethod
    def zeros(cls, m: int, n: int, dims=None) -> "GainNetworkParams":
        d_in, d_h, d_g = network_dims(m, n) if dims is None else dims
        shapes = param_shapes(m, n, d_in, d_h, d_g)
        return cls(m, n, d_in, d_h, d_g, {k: np.zeros(s) for k, s in shapes.items()})

    def replace(self, tensors: Dict[str, np.ndarray]) -> "GainNetworkParams":
        merged = dict(self.tensors)
        merged.update(tensors)
        return GainNetworkParams(self.m, self.n, self.d_in, self.d_h, self.d_g, merged)

    def copy(self) -> "GainNetworkParams":
        return self.replace({k: v.copy() for k, v in self.tensors.items()})

    def squared_norm(self) -> float:
        return float(sum(np.sum(v * v) for v in self.tensors.values()))

    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def __getitem__(self, name):
        return self.tensors[name]

    def __eq__(self, other):
        if not isinstance(other, GainNetworkParams):
            return NotImplemented
        return (self.m, self.n, self.d_in, self.d_h, self.d_g) == (other.m, other.n, other.d_in, other.d_h, other.d_g) \
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in PARAM_NAMES)

    __hash__ = None


def _check_finite(node, layer: str):
    if not np.all(np.isfinite(node.value)):
        raise NumericalError(f"non-finite output in layer {layer}")
    return node


def fc_forward(W, b, v, name: str = "fc"):
    """Affine layer on a batch of row vectors."""
    W_shape = W.value.shape if isinstance(W, T.Node) else np.shape(W)
    v_shape = v.value.shape if isinstance(v, T.Node) else np.shape(v)
    if v_shape[-1] != W_shape[1]:
        raise InvalidArgumentError(f"{name}: input width {v_shape[-1]} does not match weights {W_shape}")
    return _check_finite(T.affine(v, W, b), name)


def gru_forward(p: Dict[str, object], h_prev, v, name: str = "gru"):
    """One GRU step on batched rows.

    ``z = sig(W_z [h; v] + b_z)``, ``r = sig(W_r [h; v] + b_r)``,
    ``c = tanh(W_c [r*h; v] + b_c)``, ``h' = h + z * (c - h)``.
    ``p`` maps ``W_z, b_z, W_r, b_r, W_c, b_c`` to arrays or tape nodes.
    """
    hv = T.concat([h_prev, v])
    W_shape = p["W_z"].value.shape if isinstance(p["W_z"], T.Node) else np.shape(p["W_z"])
    if hv.value.shape[-1] != W_shape[1]:
        raise InvalidArgumentError(f"{name}: [h; v] width {hv.value.shape[-1]} does not match weights {W_shape}")
    z = T.sigmoid(T.affine(hv, p["W_z"], p["b_z"]))
    r = T.sigmoid(T.affine(hv, p["W_r"], p["b_r"]))
    c = T.tanh(T.affine(T.concat([T.mul(r, h_prev), v]), p["W_c"], p["b_c"]))
    h_new = T.add(h_prev, T.mul(z, T.sub(c, h_prev)))
    return _check_finite(h_new, name)
