"""Minimal reverse-mode automatic differentiation on top of numpy.

Only the primitives needed by the few-shot architecture are provided. Every
op accepts optional leading batch dimensions so a whole mini-batch of
episodes runs through one graph.

The graph is recorded implicitly: each non-leaf ``Tensor`` keeps references
to its parents and a closure mapping the output gradient to one gradient per
parent. ``Tensor.backward`` collects the reachable nodes and replays them in
reverse creation order, so every node is visited exactly once.
"""

from __future__ import annotations

import itertools
import os
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, ParameterError

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "add",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "swap_last",
    "reshape",
    "concat",
    "concat_channels",
    "relu",
    "sigmoid",
    "tanh",
    "softmax_lastdim",
    "cross_entropy",
    "conv1d_causal",
    "tensor_sum",
    "mean",
]

# Set FSHGR_DEBUG=1 to assert finiteness after every forward op.
DEBUG = bool(os.environ.get("FSHGR_DEBUG"))

_ids = itertools.count()


class Tensor:
    """An n-dimensional array that records how it was computed.

    Args:
        data: array-like payload. Integer input is promoted to float64.
        requires_grad: whether gradients should flow into this tensor.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op=""):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self._op = _op
        self._id = next(_ids)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{op})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    @property
    def T(self):
        return swap_last(self)

    # -- backward ------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        pending = {self._id: grad}
        for node in sorted(nodes.values(), key=lambda n: n._id, reverse=True):
            g = pending.pop(node._id, None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in pending:
                    pending[parent._id] = pending[parent._id] + pg
                else:
                    pending[parent._id] = pg


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.array(data, dtype=dtype) if dtype is not None else np.array(data)
    return Tensor(arr, requires_grad=requires_grad)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def relu(x) -> Tensor:
    # subgradient at 0 is 0
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1 - t * t),), "tanh")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swap_last(x) -> Tensor:
    """Swap the last two axes (matrix transpose with batch dims)."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"swap_last needs at least 2 dims, got shape {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {x.shape} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def _getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward, "getitem")


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != ax):
            shapes = ", ".join(str(t.shape) for t in ts)
            raise DimensionError(f"concat along axis {axis}: shapes {shapes} differ outside that axis")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, ts, backward, "concat")


def concat_channels(x, y) -> Tensor:
    """Stack ``x`` (..., C1, l) and ``y`` (..., C2, l) into (..., C1+C2, l)."""
    x, y = _as_tensor(x), _as_tensor(y)
    if x.ndim < 2 or y.ndim < 2:
        raise DimensionError(f"concat_channels expects (..., C, l) inputs, got {x.shape} and {y.shape}")
    return concat([x, y], axis=-2)


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tensor_sum(x, axis=axis), 1.0 / n)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 2-D weight multiplied into a batched activation receives the sum of the
    per-sample gradients.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                # shared weight: fold batch dims into one GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), backward, "matmul")


def softmax_lastdim(x, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax over the last axis.

    ``mask`` (boolean, broadcastable to ``x``) marks the entries that may
    receive weight; the others are treated as -inf and get exactly 0. Every
    slice must keep at least one unmasked entry.
    """
    x = _as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    s = (e / np.sum(e, axis=-1, keepdims=True)).astype(x.dtype)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is (N,) with a scalar label, or (..., N) with an integer label
    array matching the leading shape. The result is a scalar.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    n_cls = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: labels shape {labels.shape} vs logits shape {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise IndexError(f"cross_entropy: labels must be integers, got {labels.dtype}")
    if np.any(labels < 0) or np.any(labels >= n_cls):
        raise IndexError(f"cross_entropy: label out of range [0, {n_cls}): {labels.tolist()}")
    z = logits.data - np.max(logits.data, axis=-1, keepdims=True)
    logsum = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    logp = z - logsum
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    count = max(labels.size, 1)
    loss = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], axis=-1) - 1, axis=-1)
        return (grad * (g / count),)

    return _make(loss, (logits,), backward, "cross_entropy")


def conv1d_causal(x, w, dilation: int = 1) -> Tensor:
    """Dilated causal 1-D convolution.

    Args:
        x: input (..., C_in, l).
        w: kernel (C_out, C_in, k). Tap ``j`` looks ``(k-1-j)*dilation`` steps back.
        dilation: spacing between taps, >= 1.

    Returns:
        (..., C_out, l); the input is left-padded with ``dilation*(k-1)`` zeros so
        output position t only sees inputs at positions <= t.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if int(dilation) != dilation or dilation < 1:
        raise ParameterError(f"conv1d_causal: dilation must be a positive integer, got {dilation}")
    if w.ndim != 3 or w.shape[2] < 1:
        raise ParameterError(f"conv1d_causal: kernel must be (C_out, C_in, k>=1), got {w.shape}")
    if x.ndim < 2 or x.shape[-2] != w.shape[1]:
        raise DimensionError(f"conv1d_causal: input {x.shape} does not match kernel {w.shape}")
    dilation = int(dilation)
    c_out, c_in, k = w.shape
    lead, l = x.shape[:-2], x.shape[-1]
    m = int(np.prod(lead)) if lead else 1
    pad = dilation * (k - 1)
    xp = np.pad(x.data.reshape(m, c_in, l), [(0, 0), (0, 0), (pad, 0)])
    # im2col: cols[c, j, b, t] = xp[b, c, j*dilation + t]
    cols = np.empty((c_in, k, m, l), dtype=xp.dtype)
    for j in range(k):
        cols[:, j] = np.swapaxes(xp[:, :, j * dilation : j * dilation + l], 0, 1)
    cols = cols.reshape(c_in * k, m * l)
    out = (w.data.reshape(c_out, c_in * k) @ cols).reshape(c_out, m, l)
    out = np.swapaxes(out, 0, 1).reshape(lead + (c_out, l))

    def backward(g):
        gmat = np.swapaxes(g.reshape(m, c_out, l), 0, 1).reshape(c_out, m * l)
        gx = gw = None
        if w.requires_grad:
            gw = (gmat @ cols.T).reshape(w.shape)
        if x.requires_grad:
            gcols = (w.data.reshape(c_out, c_in * k).T @ gmat).reshape(c_in, k, m, l)
            gxp = np.zeros((m, c_in, l + pad), dtype=g.dtype)
            for j in range(k):
                gxp[:, :, j * dilation : j * dilation + l] += np.swapaxes(gcols[:, j], 0, 1)
            gx = gxp[:, :, pad:].reshape(x.shape)
        return gx, gw

    return _make(np.asarray(out, dtype=np.result_type(x.data, w.data)), (x, w), backward, "conv1d_causal")
