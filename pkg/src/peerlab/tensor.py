"""Dense numpy tensors with a reverse-mode differentiation tape.

Every differentiable operation returns a new :class:`Tensor` carrying a
:class:`Node` that records the operation kind, its inputs and a closure
mapping the output gradient to input gradients. Calling :func:`backward`
on a scalar collects the reachable nodes into a :class:`Tape` ordered by
creation and sweeps it once in reverse.

Example:
    >>> x = Tensor([-1.0, 2.0], requires_grad=True)
    >>> grads = backward(x.relu().mean())
    >>> grads[x]
    array([0. , 0.5])
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.float64
_node_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""

    def __init__(self, kind: str, *shapes):
        self.kind = kind
        self.shapes = shapes
        desc = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{kind}: incompatible shapes {desc}")


class ParameterError(ValueError):
    """Raised for an invalid non-tensor operation parameter (e.g. a temperature)."""


class ContractError(RuntimeError):
    """Raised when a call violates a documented precondition."""


def set_default_dtype(dtype) -> None:
    """Select float64 (default, required for gradient checks) or float32."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple
    backward_fn: Callable
    id: int = field(default_factory=lambda: next(_node_ids))


class Tensor:
    """A real array that optionally participates in the differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut from the tape (a constant for every consumer)."""
        return Tensor(self.data)

    # arithmetic sugar; every method routes through the op functions below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self):
        return mean(self)

    def flatten(self):
        return flatten(self)

    def log_softmax(self, tau: float = 1.0):
        return log_softmax(self, tau)

    def backward(self, seed: float = 1.0) -> dict:
        return backward(self, seed)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(kind, tuple(inputs), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); the gradient is zero where the floor is active. NaN passes through."""
    a = _as_tensor(a)
    mask = a.data >= floor
    return _make("clamp-min", np.maximum(a.data, floor), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- linear maps


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def add_bias(x, b) -> Tensor:
    """Add a per-feature bias: last axis for 2-D input, channel axis for 4-D."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.ndim != 1:
        raise ShapeError("affine-bias", x.shape, b.shape)
    if x.ndim == 4:
        if x.shape[1] != b.shape[0]:
            raise ShapeError("affine-bias", x.shape, b.shape)
        return _make("affine-bias", x.data + b.data[None, :, None, None], (x, b),
                     lambda g: (g, g.sum(axis=(0, 2, 3))))
    if x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError("affine-bias", x.shape, b.shape)
    axes = tuple(range(x.ndim - 1))
    return _make("affine-bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def conv2d(x, w) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1.

    x is (N, C, H, W) and w is (O, C, 3, 3); the output is (N, O, H, W).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # (N, C, H, W, 3, 3) view, no copy
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", win, w.data, optimize=True)

    def back(g):
        gw = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + h, j:j + wd] += np.einsum("nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True)
        return gxp[:, :, 1:-1, 1:-1], gw

    return _make("conv2d", out, (x, w), back)


def max_pool2d(x) -> Tensor:
    """2x2 max-pool with stride 2; odd trailing rows/columns are dropped.

    Ties route the gradient to the first maximal element in row-major order.
    """
    x = _as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError("max-pool", x.shape)
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = (x.data[:, :, :2 * h2, :2 * w2]
              .reshape(n, c, h2, 2, w2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h2, w2, 4))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        gx = np.zeros_like(x.data)
        gx[:, :, :2 * h2, :2 * w2] = gb
        return (gx,)

    return _make("max-pool", out, (x,), back)


def flatten(x) -> Tensor:
    """Collapse every axis after the first (batch) axis."""
    x = _as_tensor(x)
    if x.ndim < 1:
        raise ShapeError("flatten", x.shape)
    shape = x.shape
    return _make("flatten", x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


# ---------------------------------------------------------------- reductions


def sum_(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        return _make("sum", np.asarray(x.data.sum()), (x,),
                     lambda g: (np.broadcast_to(g, x.shape).copy(),))
    out = x.data.sum(axis=axis)
    return _make("sum", out, (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))


def mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    if n == 0:
        raise ShapeError("mean", x.shape)
    return _make("mean", np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),))


def max_(x, axis: int = -1) -> Tensor:
    """Maximum along one axis; ties send the gradient to the lowest index."""
    x = _as_tensor(x)
    idx = x.data.argmax(axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make("max", out, (x,), back)


def log_softmax(x, tau: float = 1.0) -> Tensor:
    """Row-wise log softmax of x / tau along the last axis (max-subtracted)."""
    x = _as_tensor(x)
    if not tau > 0:
        raise ParameterError(f"log-softmax temperature must be > 0, got {tau}")
    z = x.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    prob = np.exp(out)

    def back(g):
        return ((g - prob * g.sum(axis=-1, keepdims=True)) / tau,)

    return _make("log-softmax", out, (x,), back)


_KINDS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "max-pool": max_pool2d,
    "flatten": flatten,
    "affine-bias": add_bias,
    "scale": scale,
    "log-softmax": log_softmax,
    "mean": mean,
    "sum": sum_,
    "exp": exp,
    "clamp-min": clamp_min,
    "max": max_,
}


def forward_op(kind: str, *inputs, **params) -> Tensor:
    """Apply an operation by its kind name, e.g. ``forward_op("log-softmax", z, tau=2)``."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ParameterError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **params)


# ---------------------------------------------------------------- tape


@dataclass
class Tape:
    """Nodes reachable from one scalar output, in creation (topological) order."""

    nodes: list
    output: Tensor

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = {}
        stack = [out]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or node.id in seen:
                continue
            seen[node.id] = node
            stack.extend(node.inputs)
        return cls(nodes=[seen[k] for k in sorted(seen)], output=out)


def backward(out, seed: float = 1.0) -> dict:
    """Reverse sweep over the tape of ``out``.

    Returns a dict mapping each leaf tensor with ``requires_grad`` to its
    gradient array; the same arrays are stored on the leaves' ``grad``.
    """
    tape = out if isinstance(out, Tape) else Tape.from_output(out)
    root = tape.output
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {root.shape}")
    seed_grad = np.full(root.shape, seed, dtype=root.data.dtype)
    if root._node is None:
        if not root.requires_grad:
            return {}
        root.grad = seed_grad
        return {root: seed_grad}
    pending = {root._node.id: seed_grad}
    leaves: dict[int, list] = {}
    for node in reversed(tape.nodes):
        g = pending.pop(node.id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if not inp.requires_grad:
                continue
            if inp._node is not None:
                k = inp._node.id
                pending[k] = pending[k] + gi if k in pending else gi
            elif id(inp) in leaves:
                leaves[id(inp)][1] = leaves[id(inp)][1] + gi
            else:
                leaves[id(inp)] = [inp, gi]
    result = {}
    for t, g in leaves.values():
        t.grad = g
        result[t] = g
    return result


def finite_diff_grad(loss_fn: Callable, x, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``loss_fn`` receives a float64 array shaped like ``x`` and may return a
    float or a scalar :class:`Tensor`. Used as the oracle for :func:`backward`.
    """
    if not h > 0:
        raise ParameterError("finite difference step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)

    def value(arr):
        out = loss_fn(arr)
        return float(out.item() if isinstance(out, Tensor) else out)

    flat, gflat = base.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = value(base)
        flat[i] = keep - h
        down = value(base)
        flat[i] = keep
        gflat[i] = (up - down) / (2 * h)
    return grad
