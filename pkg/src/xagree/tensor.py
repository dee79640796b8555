"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded when at least one operand requires a gradient.  Outside a tape
nothing is recorded, which is how inference runs.

Elementwise binary operations broadcast only over leading batch dimensions:
the smaller operand's shape must be a suffix of the larger one's (or a
scalar).  Anything else raises :class:`~xagree.errors.ShapeError`.

Every recorded node carries a ``kind`` used by the DeepLIFT backward pass:
``"linear"`` and ``"chain"`` nodes propagate ordinary gradients, ``"rescale"``
nodes (elementwise nonlinearities) substitute the finite-difference multiplier
``(f(x) - f(x')) / (x - x')``.  Nodes with ``kind=None`` cannot take part in a
DeepLIFT pass.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import CapabilityError, ContractError, ShapeError, StateError, VocabIndexError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "current_tape",
    "record_op",
    "finite_diff_check",
    "matmul",
    "concat",
    "stack",
    "gather",
    "softmax",
    "log_softmax",
    "layer_norm",
    "tanh",
    "sigmoid",
    "relu",
    "gelu",
    "exp",
    "log",
    "absolute",
]

# inputs with |x - x'| below this use the analytic derivative in DeepLIFT
RESCALE_EPS = 1e-7
MASK_FILL = -1e9

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("op", "inputs", "output", "backward", "kind", "deriv")

    def __init__(self, op, inputs, output, backward, kind, deriv):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.kind = kind
        self.deriv = deriv


class Tape:
    """Ordered record of operations, consumed by exactly one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def watch(self, tensor: "Tensor") -> None:
        if id(tensor) not in self._leaf_ids:
            self._leaf_ids.add(id(tensor))
            self.leaves.append(tensor)

    def backward(self, loss: "Tensor", *, deeplift_pairs: Optional[int] = None) -> None:
        """Populate ``grad`` on every leaf watched by this tape.

        With ``deeplift_pairs=k`` the batch is read as ``k`` inputs followed by
        ``k`` references, and elementwise nonlinearities apply the Rescale
        multiplier instead of their derivative.
        """
        if self.consumed:
            raise StateError("backward already ran on this tape; record a new forward pass")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            if deeplift_pairs is not None and node.kind != "linear" and node.kind != "chain":
                if node.kind != "rescale":
                    raise CapabilityError(f"operation {node.op!r} has no DeepLIFT rule")
                in_grads = _rescale_backward(node, g, deeplift_pairs)
            else:
                in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64)


def _rescale_backward(node: _Node, g: np.ndarray, k: int):
    x = node.inputs[0].data
    y = node.output.data
    if x.ndim == 0 or x.shape[0] != 2 * k:
        return node.backward(g)
    dx = x[:k] - x[k:]
    dy = y[:k] - y[k:]
    small = np.abs(dx) < RESCALE_EPS
    safe = np.where(small, 1.0, dx)
    mult = np.where(small, node.deriv(x[:k]), dy / safe)
    return (g * np.concatenate([mult, mult], axis=0),)


def backward(loss: "Tensor", **kwargs) -> None:
    """Run backward on the tape that recorded ``loss``."""
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not recorded on any tape")
    tape.backward(loss, **kwargs)


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(
    op: str,
    out: np.ndarray,
    inputs: Sequence["Tensor"],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    kind: Optional[str] = None,
    deriv: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> "Tensor":
    """Wrap ``out`` in a Tensor and record it on the active tape if needed.

    ``backward_fn`` maps the upstream gradient to one gradient per input
    (``None`` for inputs that need none).  ``kind`` is ``"linear"``,
    ``"chain"``, ``"rescale"`` (requires ``deriv``) or ``None``.
    """
    result = Tensor(out)
    tape = current_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return result
    for t in inputs:
        if t.requires_grad:
            if t._tape is None:
                tape.watch(t)
            elif t._tape is not tape:
                raise StateError(f"operand of {op!r} was recorded on a different tape")
    result.requires_grad = True
    result._tape = tape
    tape.nodes.append(_Node(op, tuple(inputs), result, backward_fn, kind, deriv))
    return result


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} do not conform (only leading batch dims broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    # matmul may broadcast a size-1 batch dim
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        if requires_grad:
            tape = current_tape()
            if tape is not None:
                tape.watch(self)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def backward(self, **kwargs) -> None:
        backward(self, **kwargs)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


# elementwise binary

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return record_op("add", a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "linear")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return record_op("sub", a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "linear")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return record_op("mul", ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "chain")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return record_op("div", out, (a, b), bw, "chain")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return record_op("neg", -a.data, (a,), lambda g: (-g,), "linear")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la and lb and la != lb and not all(x == y or x == 1 or y == 1 for x, y in zip(la[::-1], lb[::-1])):
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record_op("matmul", ad @ bd, (a, b), bw, "linear")


# elementwise unary nonlinearities

def _unary(name, a, out, deriv):
    a = _as_tensor(a)
    x = a.data
    return record_op(name, out, (a,), lambda g: (g * deriv(x),), "rescale", deriv)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    return _unary("tanh", a, np.tanh(a.data), lambda x: 1.0 - np.tanh(x) ** 2)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split branches keep exp() from overflowing
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)

    def deriv(x):
        s = _sigmoid(x)
        return s * (1.0 - s)

    return _unary("sigmoid", a, _sigmoid(a.data), deriv)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    return _unary("relu", a, np.maximum(a.data, 0.0), lambda x: (x > 0).astype(np.float64))


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def _gelu_deriv(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    return _unary("gelu", a, _gelu(a.data), _gelu_deriv)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    return _unary("exp", a, np.exp(a.data), np.exp)


_TINY = np.finfo(np.float64).tiny


def log(a) -> Tensor:
    """Natural log; inputs are clamped at the smallest normal float."""
    a = _as_tensor(a)
    return _unary("log", a, np.log(np.maximum(a.data, _TINY)), lambda x: 1.0 / np.maximum(x, _TINY))


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    return _unary("abs", a, np.abs(a.data), np.sign)


# reductions and shape ops

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record_op("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), bw, "linear")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([shape[i] for i in axes])) if axes else 1

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return record_op("mean", a.data.mean(axis=axes, keepdims=keepdims), (a,), bw, "linear")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return record_op("reshape", out, (a,), lambda g: (g.reshape(old),), "linear")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record_op("transpose", np.transpose(a.data, axes), (a,),
                     lambda g: (np.transpose(g, inv),), "linear")


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    out = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def bw(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return record_op("slice", np.array(out, dtype=np.float64), (a,), bw, "linear")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat along axis {axis}: shapes {ts[0].shape} and {t.shape} do not conform")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return record_op("concat", np.concatenate([t.data for t in ts], axis=ax), ts,
                     lambda g: tuple(np.split(g, bounds, axis=ax)), "linear")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack of an empty list")
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack: shapes {ts[0].shape} and {t.shape} differ")
    ax = axis % (ts[0].ndim + 1)
    n = len(ts)
    return record_op("stack", np.stack([t.data for t in ts], axis=ax), ts,
                     lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)), "linear")


def gather(table, ids) -> Tensor:
    """Rows of a 2-D ``table`` selected by integer ``ids`` of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"gather needs a 2-D table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])].reshape(-1)[0]
        raise VocabIndexError(f"index {int(bad)} outside vocabulary of size {table.shape[0]}")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return record_op("gather", table.data[ids], (table,), bw, "linear")


# normalisations

def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax.

    ``mask`` (boolean, broadcastable to ``a``) marks admissible positions;
    the rest receive an additive ``-1e9`` before normalisation.
    """
    a = _as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, x + MASK_FILL)
    y = _softmax_np(x, axis)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record_op("softmax", y, (a,), bw, "chain")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return record_op("log_softmax", out, (a,), bw, "chain")


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: input {a.shape} with gain {gamma.shape} and bias {beta.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record_op("layer_norm", xhat * gd + beta.data, (a, gamma, beta), bw, "chain")


def finite_diff_check(function: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    The error per coordinate is ``|g - c| / (|g| + |c| + 1e-12)`` where ``g``
    is the analytic gradient and ``c`` the central-difference estimate.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with Tape() as tape:
        x = Tensor(x0.copy(), requires_grad=True)
        out = function(x)
    if out.requires_grad:
        tape.backward(out)
        analytic = x.grad
    else:
        analytic = np.zeros_like(x0)
    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy()
        xp.reshape(-1)[i] += step
        xm = x0.copy()
        xm.reshape(-1)[i] -= step
        flat[i] = (function(Tensor(xp)).item() - function(Tensor(xm)).item()) / (2 * step)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0
