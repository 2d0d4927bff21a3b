"""A small dense-tensor reverse-mode differentiation engine.

Operations record onto the active :class:`Tape` when one is open and at least
one input requires a gradient. Outside a tape nothing is recorded, which is how
inference runs. Only scalar-with-tensor broadcasting is allowed; anything else
goes through an explicit op such as :func:`expand_rows`.

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(hadamard(x @ w, x @ w))
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DEBUG = True

_state = threading.local()


class AutodiffError(RuntimeError):
    pass


class ShapeMismatch(ValueError):
    pass


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.tape = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.tape is None

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        out.tape = self
        out.requires_grad = True
        self.nodes.append(_Node(out, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise AutodiffError("loss was not produced on this tape (detached graph)")
        if self.consumed:
            raise AutodiffError("backward already ran on this tape; start a new forward pass")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.tape is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    grads[key] = gi if key not in grads else grads[key] + gi


def backward(loss: Tensor) -> None:
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise AutodiffError("loss is not attached to a tape (detached graph)")
    loss.tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.tape = None
    out.name = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _finish(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b.T`` without materialising the transpose on the tape."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"matmul_nt: cannot multiply {a.shape} by transpose of {b.shape}")
    A, B = a.data, b.data
    return _finish(A @ B.T, (a, b), lambda g: (g @ B, g.T @ A))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _finish(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _finish(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "hadamard")
    A, B = a.data, b.data
    return _finish(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _finish(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    return _finish(a.data + float(c), (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _finish(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _finish(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _finish(t, (a,), lambda g: (g * (1.0 - t * t),))


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _finish(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _finish(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got {a.shape}")
    return _finish(a.data.T.copy(), (a,), lambda g: (g.T,))


def expand_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a length-F vector into an (n, F) matrix."""
    v = _as_tensor(v)
    if v.data.ndim != 1:
        raise ShapeMismatch(f"expand_rows expects a vector, got {v.shape}")
    return _finish(np.broadcast_to(v.data, (n, v.shape[0])).copy(), (v,), lambda g: (g.sum(axis=0),))


def index(a: Tensor, i: int) -> Tensor:
    """Slice ``a[i]`` along the leading axis."""
    a = _as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[i] = g
        return (full,)

    return _finish(a.data[i].copy(), (a,), back)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a matrix."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"columns expects a matrix, got {a.shape}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _finish(a.data[:, start:stop].copy(), (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat of nothing")
    nd = tensors[0].data.ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.data.ndim != nd or any(t.shape[d] != tensors[0].shape[d] for d in range(nd) if d != ax):
            raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _finish(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


def mean_over(a: Tensor, axis: int) -> Tensor:
    """Mean along one axis; the axis is dropped."""
    a = _as_tensor(a)
    shape = a.shape
    n = shape[axis]
    return _finish(
        a.data.mean(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),),
    )


def weighted_mean(x: Tensor, weights: np.ndarray, normalized: bool = False) -> Tensor:
    """Row i is sum_j W[i, j] x_j / sum_j W[i, j].

    ``weights`` is a constant (no gradient). Pass ``normalized=True`` if the rows
    already sum to one.
    """
    x = _as_tensor(x)
    W = np.asarray(weights, dtype=np.float64)
    if x.data.ndim != 2 or W.shape != (x.shape[0], x.shape[0]):
        raise ShapeMismatch(f"weighted_mean: X {x.shape} with weights {W.shape}")
    if not normalized:
        s = W.sum(axis=1, keepdims=True)
        if np.any(s <= 0):
            raise ValueError("weighted_mean: a row of weights sums to zero")
        W = W / s
    return _finish(W @ x.data, (x,), lambda g: (W.T @ g,))


def conv_time(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid 1-D convolution along the time axis, applied to every node independently.

    x: (T, N, C_in), kernel: (Kt, C_in, C_out), bias: (C_out,) -> (T - Kt + 1, N, C_out)
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    X, K = x.data, kernel.data
    if X.ndim != 3 or K.ndim != 3 or X.shape[2] != K.shape[1]:
        raise ShapeMismatch(f"conv_time: x {X.shape} with kernel {K.shape}")
    T, N, _ = X.shape
    kt, _, c_out = K.shape
    if T < kt:
        raise ShapeMismatch(f"conv_time: {T} time steps is shorter than kernel width {kt}")
    t_out = T - kt + 1
    c_in = X.shape[2]
    # windows[t, n] = X[t:t+kt, n, :] flattened, so the whole conv is one matmul
    windows = np.concatenate([X[k:k + t_out] for k in range(kt)], axis=2).reshape(-1, kt * c_in)
    K2 = K.reshape(kt * c_in, c_out)
    out = (windows @ K2).reshape(t_out, N, c_out)
    inputs = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeMismatch(f"conv_time: bias {bias.shape}, expected ({c_out},)")
        out += bias.data
        inputs.append(bias)

    def back(g):
        g2 = g.reshape(-1, c_out)
        gw = (g2 @ K2.T).reshape(t_out, N, kt, c_in)
        gx = np.zeros_like(X)
        for k in range(kt):
            gx[k:k + t_out] += gw[:, :, k, :]
        gk = (windows.T @ g2).reshape(K.shape)
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return _finish(out, inputs, back)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               floor: float = 1e-6) -> float:
    """Worst relative error between taped gradients and central differences.

    ``f`` builds the loss from the current values of ``params``. The relative
    error uses ``max(|analytic|, |numeric|, floor)`` as denominator so exact
    zeros do not divide by zero.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        g = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            err = abs(g[i] - numeric) / max(abs(g[i]), abs(numeric), floor)
            worst = max(worst, err)
    return worst
