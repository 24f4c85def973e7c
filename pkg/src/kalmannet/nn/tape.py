"""Reverse-mode differentiation over a recorded list of primitive operations.

Values are float64 numpy arrays, usually batched along axis 0. While a
:class:`Tape` is active every primitive appends its output node; ``backward``
walks the nodes in reverse creation order, which is a valid reverse
topological order because a node can only consume nodes created before it.
Outside a tape the same primitives just compute values.
"""
from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from kalmannet.errors import KalmanNetError

__all__ = [
    "Node", "Tape", "TapeError", "backward", "active_tape", "constant",
    "add", "sub", "mul", "div", "scale", "affine", "linear_map", "sigmoid", "tanh", "sqrt",
    "concat", "slice_last", "reshape", "batched_matvec", "sum_squares", "row_sum_squares",
    "total", "lorenz_matvec",
]


class TapeError(KalmanNetError):
    pass


class Node:
    __slots__ = ("value", "parents", "vjp", "tape")

    def __init__(self, value, parents=(), vjp: Optional[Callable] = None, tape=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


_stack: list = []


def active_tape() -> Optional["Tape"]:
    return _stack[-1] if _stack else None


class Tape:
    """Context manager recording primitive operations for one backward pass."""

    def __init__(self):
        self.nodes: list = []
        self.leaves: Dict[str, Node] = {}
        self._open = False

    def __enter__(self):
        _stack.append(self)
        self._open = True
        return self

    def __exit__(self, *exc):
        _stack.remove(self)
        self._open = False
        return False

    def watch(self, arrays: Dict[str, np.ndarray]) -> Dict[str, Node]:
        """Register trainable arrays as leaves and return their nodes."""
        out = {}
        for name, arr in arrays.items():
            node = Node(arr, (), None, self)
            self.nodes.append(node)
            self.leaves[name] = node
            out[name] = node
        return out

    def __len__(self):
        return len(self.nodes)


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def _node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _emit(value, parents: Sequence[Node], vjp) -> Node:
    tape = active_tape()
    if tape is None:
        return Node(value)
    node = Node(value, tuple(parents), vjp, tape)
    tape.nodes.append(node)
    return node


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------------- primitives


def add(a, b) -> Node:
    a, b = _node(a), _node(b)
    sa, sb = a.value.shape, b.value.shape
    return _emit(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = _node(a), _node(b)
    sa, sb = a.value.shape, b.value.shape
    return _emit(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    a, b = _node(a), _node(b)
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    a, b = _node(a), _node(b)
    av, bv = a.value, b.value
    out = av / bv
    return _emit(out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def scale(a, c: float) -> Node:
    a = _node(a)
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def affine(x, W, b) -> Node:
    """``x @ W.T + b`` for x of shape (B, d_in), W (d_out, d_in), b (d_out,)."""
    x, W, b = _node(x), _node(W), _node(b)
    xv, Wv = x.value, W.value
    return _emit(xv @ Wv.T + b.value, (x, W, b), lambda g: (g @ Wv, g.T @ xv, g.sum(axis=0)))


def linear_map(x, M: np.ndarray) -> Node:
    """``x @ M.T`` with a constant matrix M (e.g. the known F or H)."""
    x = _node(x)
    return _emit(x.value @ M.T, (x,), lambda g: (g @ M,))


def sigmoid(x) -> Node:
    x = _node(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Node:
    x = _node(x)
    out = np.tanh(x.value)
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),))


def sqrt(x) -> Node:
    x = _node(x)
    out = np.sqrt(x.value)
    return _emit(out, (x,), lambda g: (0.5 * g / out,))


def concat(xs: Sequence, axis: int = -1) -> Node:
    nodes = [_node(x) for x in xs]
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return _emit(
        np.concatenate([n.value for n in nodes], axis=axis),
        nodes,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def slice_last(x, start: int, stop: int) -> Node:
    x = _node(x)
    shape = x.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return _emit(x.value[..., start:stop], (x,), vjp)


def reshape(x, shape) -> Node:
    x = _node(x)
    old = x.value.shape
    return _emit(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def batched_matvec(K, v) -> Node:
    """``K[b] @ v[b]`` for K of shape (B, m, n) and v (B, n)."""
    K, v = _node(K), _node(v)
    Kv, vv = K.value, v.value
    return _emit(
        np.einsum("bmn,bn->bm", Kv, vv),
        (K, v),
        lambda g: (g[:, :, None] * vv[:, None, :], np.einsum("bmn,bm->bn", Kv, g)),
    )


def sum_squares(x) -> Node:
    """Scalar sum of squared entries."""
    x = _node(x)
    xv = x.value
    return _emit(np.asarray(np.sum(xv * xv)), (x,), lambda g: (2.0 * g * xv,))


def row_sum_squares(x) -> Node:
    """Per-row squared norm, (B, d) -> (B, 1)."""
    x = _node(x)
    xv = x.value
    return _emit(np.sum(xv * xv, axis=-1, keepdims=True), (x,), lambda g: (2.0 * g * xv,))


def total(x) -> Node:
    """Scalar sum of all entries."""
    x = _node(x)
    shape = x.value.shape
    return _emit(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def lorenz_matvec(x, v, sigma: float, rho: float, beta: float) -> Node:
    """Batched Lorenz dynamics matrix product ``A(x) @ v``; bilinear in (x, v)."""
    x, v = _node(x), _node(v)
    xv, vv = x.value, v.value
    out = np.empty_like(vv)
    out[:, 0] = sigma * (vv[:, 1] - vv[:, 0])
    out[:, 1] = (rho - xv[:, 2]) * vv[:, 0] - vv[:, 1]
    out[:, 2] = xv[:, 1] * vv[:, 0] - beta * vv[:, 2]

    def vjp(g):
        gx = np.zeros_like(xv)
        gx[:, 2] = -g[:, 1] * vv[:, 0]
        gx[:, 1] = g[:, 2] * vv[:, 0]
        gv = np.empty_like(vv)
        gv[:, 0] = -sigma * g[:, 0] + (rho - xv[:, 2]) * g[:, 1] + xv[:, 1] * g[:, 2]
        gv[:, 1] = sigma * g[:, 0] - g[:, 1]
        gv[:, 2] = -beta * g[:, 2]
        return gx, gv

    return _emit(out, (x, v), vjp)


# ----------------------------------------------------------------------------- reverse sweep


def backward(tape: Tape, loss: Node, wrt: Optional[Dict[str, Node]] = None) -> Dict[str, np.ndarray]:
    """Gradients of the scalar ``loss`` with respect to the tape's watched leaves.

    Leaves that the loss does not depend on get exact zeros.
    """
    if tape._open:
        raise TapeError("tape is still recording; call backward after the with-block")
    if loss.tape is not tape:
        raise TapeError("loss node was not recorded on this tape")
    if np.ndim(loss.value) != 0:
        raise TapeError(f"loss must be a scalar, got shape {np.shape(loss.value)}")
    wrt = tape.leaves if wrt is None else wrt
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None) if node.vjp is not None else None
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent.tape is not tape:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {name: np.asarray(grads.get(id(leaf), np.zeros_like(leaf.value)), dtype=np.float64).reshape(leaf.value.shape)
            for name, leaf in wrt.items()}
