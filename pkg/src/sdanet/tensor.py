"""Float32 tensors with a small reverse-mode autodiff engine.

Every differentiable op records a ``Node`` on its output holding the inputs and
a local gradient rule. ``backward`` linearizes the recorded graph into a
``Tape`` (topological order), replays it in reverse, then drops the graph.
Reductions accumulate in float64 before rounding back to float32.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

_GRAD_ENABLED = True


@contextlib.contextmanager
def precision(dtype):
    """Compute new tensors in ``dtype`` inside the block (float32 by default)."""
    global DTYPE
    prev = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    __slots__ = ("name", "inputs", "backward")

    def __init__(self, name: str, inputs: tuple, backward: Callable):
        self.name = name
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "keep_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.keep_grad = False
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after backward."""
        self.keep_grad = True
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple, backward: Callable, name: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(name, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- construction ----------------------------------------------------------

def from_data(shape: Sequence[int], values: Iterable[float], requires_grad: bool = False) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"negative extent in shape {shape}")
    vals = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=DTYPE).reshape(-1)
    if vals.size != math.prod(shape):
        raise ValueError(f"shape {shape} needs {math.prod(shape)} values, got {vals.size}")
    return Tensor(vals.reshape(shape), requires_grad=requires_grad)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=requires_grad)


# -- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting sum."""
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw, "add")


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return add(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting product."""
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, sa) if a.requires_grad else None
        gb = _unbroadcast(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    if not math.isfinite(s):
        raise ValueError("scale factor must be finite")
    f = DTYPE(s)
    return _result(a.data * f, (a,), lambda g: (g * f,), "scale")


def broadcast_mul(a: Tensor, s: Tensor) -> Tensor:
    """Per-channel weighting: ``a[..., y, x, k] * s[..., 0, 0, k]``."""
    if a.ndim < 3 or s.ndim != a.ndim:
        raise ValueError(f"expected matching ranks >= 3, got {a.shape} and {s.shape}")
    if s.shape[-1] != a.shape[-1]:
        raise ValueError(f"channel mismatch: {a.shape[-1]} vs {s.shape[-1]}")
    if s.shape[-3] != 1 or s.shape[-2] != 1:
        raise ValueError(f"weights must be 1x1 spatially, got {s.shape}")
    return mul(a, s)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, DTYPE(0))
    return _result(out, (x,), lambda g: (g * (out > 0),), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = (0.5 * (1.0 + np.tanh(0.5 * x.data.astype(np.float64)))).astype(DTYPE)
    return _result(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def square(x: Tensor) -> Tensor:
    d = x.data
    return _result(d * d, (x,), lambda g: (2 * g * d,), "square")


# -- reductions / shape ----------------------------------------------------

def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axes {axes}")
    return tuple(sorted(out))


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    out = a.data.sum(axis=axes, dtype=np.float64, keepdims=keepdims).astype(DTYPE)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return _result(out, (a,), bw, "sum")


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    if count == 0:
        raise ValueError("mean over an empty extent")
    out = a.data.mean(axis=axes, dtype=np.float64, keepdims=keepdims).astype(DTYPE)
    shape = a.shape
    inv = DTYPE(1.0 / count)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * inv, shape).astype(DTYPE),)

    return _result(out, (a,), bw, "mean")


def reshape(a: Tensor, new_shape: Sequence[int]) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if -1 not in new_shape and math.prod(new_shape) != a.size:
        raise ValueError(f"cannot reshape {a.shape} ({a.size} values) to {new_shape}")
    shape = a.shape
    try:
        out = a.data.reshape(new_shape)
    except ValueError as exc:
        raise ValueError(str(exc)) from None
    return _result(out, (a,), lambda g: (g.reshape(shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` keeping that axis with extent 1."""
    axis = axis % a.ndim
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(index, index + 1)
    sl = tuple(sl)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[sl] = g
        return (full,)

    return _result(a.data[sl], (a,), bw, "take")


def flat_index(a: Tensor, idx: tuple) -> Tensor:
    """Scalar element ``a[idx]`` as a differentiable 0-d tensor."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return _result(np.asarray(a.data[idx]), (a,), bw, "index")


def stack_sum(items: Sequence[Tensor]) -> Tensor:
    """Left fold of elementwise sums, recorded as a single op."""
    if not items:
        raise ValueError("empty sequence")
    shape = items[0].shape
    for t in items:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {t.shape} vs {shape}")
    acc = items[0].data.copy()
    for t in items[1:]:
        acc += t.data
    return _result(acc, tuple(items), lambda g: tuple(g for _ in items), "stack_sum")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), bw, "matmul")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data.astype(np.float64)
    shifted = d - d.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        g64 = g.astype(np.float64)
        return ((g64 - p * g64.sum(axis=axis, keepdims=True)).astype(DTYPE),)

    return _result(out.astype(DTYPE), (x,), bw, "log_softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data.astype(np.float64)
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    p64 = e / e.sum(axis=axis, keepdims=True)
    p = p64.astype(DTYPE)

    def bw(g):
        g64 = g.astype(np.float64)
        return ((p64 * (g64 - (g64 * p64).sum(axis=axis, keepdims=True))).astype(DTYPE),)

    return _result(p, (x,), bw, "softmax")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# -- backward --------------------------------------------------------------

class Tape:
    """Operations reachable from a loss, in topological order (inputs first)."""

    def __init__(self, loss: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for inp in t.node.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        self.records = order

    def __len__(self):
        return len(self.records)

    def replay(self, root: Tensor, seed: np.ndarray):
        grads: dict[int, np.ndarray] = {id(root): seed}
        for t in reversed(self.records):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None or t.keep_grad:
                t.grad = g.astype(DTYPE, copy=False) if t.grad is None else t.grad + g
            if t.node is None:
                continue
            in_grads = t.node.backward(g)
            for inp, ig in zip(t.node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig

    def release(self):
        for t in self.records:
            t.node = None
        self.records = []


def backward(loss: Tensor):
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. The graph is
    discarded afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape(loss)
    tape.replay(loss, np.ones(loss.shape, dtype=DTYPE))
    tape.release()


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-3) -> list[float]:
    """Max relative error of analytic vs central-difference gradients.

    ``loss_fn`` is re-evaluated with each coordinate of each tensor in
    ``tensors`` perturbed in place. Returns one error per tensor.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    loss = loss_fn()
    backward(loss)
    errors = []
    for t in tensors:
        analytic = np.zeros(t.shape, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64)
        numeric = np.zeros(t.shape, dtype=np.float64)
        flat = t.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                hi = flat.dtype.type(orig + eps)
                lo = flat.dtype.type(orig - eps)
                flat[i] = hi
                f_hi = float(loss_fn().data.astype(np.float64).sum())
                flat[i] = lo
                f_lo = float(loss_fn().data.astype(np.float64).sum())
                flat[i] = orig
                numeric.reshape(-1)[i] = (f_hi - f_lo) / (float(hi) - float(lo))
        rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
        errors.append(float(rel.max()) if rel.size else 0.0)
    return errors


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between backward() and central differences of ``f`` at ``x``."""
    leaf = Tensor(x.data.copy(), requires_grad=True)
    return check_gradients(lambda: f(leaf), [leaf], eps)[0]
