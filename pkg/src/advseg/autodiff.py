"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float64 ndarray and remembers how it was produced.
Calling :meth:`Tensor.backward` on a scalar walks the graph in reverse
topological order, visiting every node exactly once, and accumulates
gradients into ``.grad``. A :class:`Tape` optionally records every node
created inside a ``with`` block so the computation can be replayed or
inspected; recording is not required for backward to work.

The op set is deliberately small: what a per-point MLP, a pooled
encoder-decoder and their losses need, nothing more.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GraphError


class Tape:
    """Append-only record of nodes in creation (hence topological) order."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape._stack.pop()

    @classmethod
    def record(cls, node: "Tensor") -> None:
        if cls._stack:
            cls._stack[-1].nodes.append(node)

    def replay(self) -> float:
        """Recompute every recorded op from its operands.

        Returns the maximum absolute deviation from the stored forward
        values (0.0 when the replay is bit-identical, which it must be
        for deterministic ops).
        """
        worst = 0.0
        for node in self.nodes:
            if node._recompute is None:
                continue
            fresh = node._recompute()
            worst = max(worst, float(np.max(np.abs(fresh - node.data), initial=0.0)))
        return worst


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_recompute", "op")

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (),
                 op: str = "leaf", recompute: Optional[Callable[[], np.ndarray]] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward: Optional[Callable[[], None]] = None
        self._recompute = recompute
        self.op = op
        Tape.record(self)

    # -- graph plumbing ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar node; each node is visited once."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss node, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        for node in topo:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.requires_grad:
                node._backward()

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` to undo numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def make_op(value: np.ndarray, parents: Sequence[Tensor], op: str,
            backward: Callable[[Tensor], None],
            recompute: Optional[Callable[[], np.ndarray]] = None) -> Tensor:
    """Build a graph node from a precomputed value and a backward rule.

    ``backward`` receives the output node and must push gradients into
    the parents via ``parent._accumulate``. Used for fused ops (chamfer,
    softmax cross-entropy) whose forward pass is cheaper outside the
    elementary op set.
    """
    out = Tensor(value, parents=parents, op=op, recompute=recompute)
    if out.requires_grad:
        out._backward = lambda: backward(out)
    return out


# -- elementary ops ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, parents=(a, b), op="add",
                 recompute=lambda: a.data + b.data)

    def _bw():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.data.shape))

    out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, parents=(a, b), op="mul",
                 recompute=lambda: a.data * b.data)

    def _bw():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

    out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data, parents=(a, b), op="div",
                 recompute=lambda: a.data / b.data)

    def _bw():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

    out._backward = _bw
    return out


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    out = Tensor(a.data ** e, parents=(a,), op=f"pow{e}",
                 recompute=lambda: a.data ** e)

    def _bw():
        a._accumulate(out.grad * e * a.data ** (e - 1.0))

    out._backward = _bw
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data, parents=(a, b), op="matmul",
                 recompute=lambda: a.data @ b.data)

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)

    out._backward = _bw
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), parents=(a,), op="relu",
                 recompute=lambda: np.maximum(a.data, 0.0))

    def _bw():
        a._accumulate(out.grad * (a.data > 0.0))

    out._backward = _bw
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data), parents=(a,), op="tanh",
                 recompute=lambda: np.tanh(a.data))

    def _bw():
        a._accumulate(out.grad * (1.0 - out.data * out.data))

    out._backward = _bw
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data), parents=(a,), op="exp",
                 recompute=lambda: np.exp(a.data))

    def _bw():
        a._accumulate(out.grad * out.data)

    out._backward = _bw
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data), parents=(a,), op="log",
                 recompute=lambda: np.log(a.data))

    def _bw():
        a._accumulate(out.grad / a.data)

    out._backward = _bw
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed stably; derivative is the sigmoid."""
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data), parents=(a,), op="softplus",
                 recompute=lambda: np.logaddexp(0.0, a.data))

    def _bw():
        sig = 1.0 / (1.0 + np.exp(-a.data))
        a._accumulate(out.grad * sig)

    out._backward = _bw
    return out


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi), parents=(a,), op="clamp",
                 recompute=lambda: np.clip(a.data, lo, hi))

    def _bw():
        inside = (a.data >= lo) & (a.data <= hi)
        a._accumulate(out.grad * inside)

    out._backward = _bw
    return out


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,), op="sum",
                 recompute=lambda: a.data.sum(axis=axis, keepdims=keepdims))

    def _bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    out._backward = _bw
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(a, axis: int) -> Tensor:
    """Max along one axis; gradient routes to the first argmax."""
    a = as_tensor(a)
    out = Tensor(a.data.max(axis=axis), parents=(a,), op="max",
                 recompute=lambda: a.data.max(axis=axis))

    def _bw():
        idx = a.data.argmax(axis=axis)
        g = np.zeros_like(a.data)
        grid = np.indices(idx.shape)
        coords = list(grid)
        coords.insert(axis, idx)
        g[tuple(coords)] = out.grad
        a._accumulate(g)

    out._backward = _bw
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), parents=(a,), op="reshape",
                 recompute=lambda: a.data.reshape(shape))

    def _bw():
        a._accumulate(out.grad.reshape(a.data.shape))

    out._backward = _bw
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 parents=tuple(parts), op="concat",
                 recompute=lambda: np.concatenate([p.data for p in parts], axis=axis))

    def _bw():
        offset = 0
        for p in parts:
            size = p.data.shape[axis]
            sl = [slice(None)] * out.data.ndim
            sl[axis] = slice(offset, offset + size)
            if p.requires_grad:
                p._accumulate(out.grad[tuple(sl)])
            offset += size

    out._backward = _bw
    return out


def take_rows(a, indices: np.ndarray) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(a.data[idx], parents=(a,), op="take_rows",
                 recompute=lambda: a.data[idx])

    def _bw():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        a._accumulate(g)

    out._backward = _bw
    return out


def repeat_rows(a, repeats: int) -> Tensor:
    """Repeat every row ``repeats`` times: (N, d) -> (N * repeats, d)."""
    a = as_tensor(a)
    out = Tensor(np.repeat(a.data, repeats, axis=0), parents=(a,), op="repeat_rows",
                 recompute=lambda: np.repeat(a.data, repeats, axis=0))

    def _bw():
        g = out.grad.reshape(a.data.shape[0], repeats, *a.data.shape[1:]).sum(axis=1)
        a._accumulate(g)

    out._backward = _bw
    return out


def softmax_rows(a) -> Tensor:
    """Row-wise softmax with the full Jacobian in backward."""
    a = as_tensor(a)

    def fwd():
        z = a.data - a.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    out = Tensor(fwd(), parents=(a,), op="softmax", recompute=fwd)

    def _bw():
        y = out.data
        dot = (out.grad * y).sum(axis=1, keepdims=True)
        a._accumulate(y * (out.grad - dot))

    out._backward = _bw
    return out


def softmax_cross_entropy(logits, labels: np.ndarray, weights: Optional[np.ndarray] = None) -> Tensor:
    """Weighted-mean cross-entropy fused with the softmax.

    ``weights`` defaults to ones; zero-weight rows contribute nothing to
    either the value or the gradient. A zero total weight yields an
    exact 0 loss with zero gradient.
    """
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64)
    n, c = logits.data.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    wsum = w.sum()

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    per_point = lse - z[np.arange(n), y]
    value = np.array((per_point * w).sum() / wsum) if wsum > 0 else np.array(0.0)

    out = Tensor(value, parents=(logits,), op="softmax_ce")

    def _bw():
        if wsum <= 0:
            return
        p = np.exp(z - lse[:, None])
        p[np.arange(n), y] -= 1.0
        logits._accumulate(p * (w / wsum)[:, None] * out.grad)

    out._backward = _bw
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Run backprop on a loss node that was recorded on ``tape``.

    Raises :class:`GraphError` when the node is detached from the tape.
    """
    if not any(node is loss for node in tape.nodes):
        raise GraphError("loss node is detached from the tape")
    loss.backward()
