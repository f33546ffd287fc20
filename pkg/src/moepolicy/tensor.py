"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays. Every differentiable operation appends its output
to a global tape; ``backward`` replays the tape in reverse creation order,
which is always a valid topological order. Gradients accumulate additively
until ``zero_grad`` / a fresh tape, so composite losses can be backpropagated
term by term.

Precision is process-global: float64 for gradient checks and oracles,
float32 for training. Switch with ``set_default_dtype``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "ContractError",
    "set_default_dtype",
    "get_default_dtype",
    "new_rng",
    "no_grad",
    "clear_tape",
    "tape_size",
    "backward",
    "parameter",
    "kaiming_uniform",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "pow_const",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "getitem",
    "index_rows",
    "scatter_rows",
    "broadcast_to",
    "softmax",
    "log",
    "exp",
    "gelu",
    "t_sum",
    "t_mean",
    "layer_norm",
    "mse",
    "Adam",
]


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class ContractError(RuntimeError):
    """Raised when a caller violates an operation's preconditions."""


_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Set the dtype used for new tensors: np.float64 (tests) or np.float32 (training)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


def new_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the single PRNG used for init and noise draws."""
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# Tape

_tape: list["Tensor"] = []
_grad_enabled = True


def clear_tape() -> None:
    _tape.clear()


def tape_size() -> int:
    return len(_tape)


@contextmanager
def no_grad():
    """Disable tape recording (inference / sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "frozen", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype != _default_dtype:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.frozen = False
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


def parameter(data, name: str) -> Tensor:
    """A leaf tensor holding learnable values."""
    t = Tensor(np.asarray(data, dtype=_default_dtype), requires_grad=True, name=name)
    return t


def kaiming_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = math.sqrt(3.0) / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(_default_dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: tuple, backward_fn: Callable) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        _tape.append(out)
    return out


def _send(pending: dict, t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t in pending:
        pending[t] = pending[t] + g
    else:
        pending[t] = g


def backward(root: Tensor) -> None:
    """Accumulate gradients of `root` into every reachable grad-requiring tensor.

    Gradients add across repeated calls until cleared.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.data.shape}")
    if not _tape:
        raise ContractError("backward called with an empty tape")
    pending: dict[Tensor, np.ndarray] = {root: np.ones_like(root.data)}
    for t in reversed(_tape):
        g = pending.pop(t, None)
        if g is None:
            continue
        _accumulate(t, g)
        if t._backward is not None:
            t._backward(g, pending)
    for t, g in pending.items():
        _accumulate(t, g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and arithmetic ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeMismatchError(f"add: shapes {a.data.shape} and {b.data.shape}") from None

    def bw(g, pending):
        _send(pending, a, _unbroadcast(g, a.data.shape))
        _send(pending, b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)

    def bw(g, pending):
        _send(pending, a, -g)

    return _record(out, (a,), bw)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeMismatchError(f"mul: shapes {a.data.shape} and {b.data.shape}") from None

    def bw(g, pending):
        _send(pending, a, _unbroadcast(g * b.data, a.data.shape))
        _send(pending, b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)

    def bw(g, pending):
        _send(pending, a, g * c)

    return _record(out, (a,), bw)


def pow_const(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    out = Tensor(a.data**p)

    def bw(g, pending):
        _send(pending, a, g * p * a.data ** (p - 1.0))

    return _record(out, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))

    def bw(g, pending):
        _send(pending, a, g / a.data)

    return _record(out, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))

    def bw(g, pending):
        _send(pending, a, g * out.data)

    return _record(out, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximation GELU: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    a = _as_tensor(a)
    x = a.data
    inner = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    out = Tensor(0.5 * x * (1.0 + inner))

    def bw(g, pending):
        sech2 = 1.0 - inner * inner
        local = 0.5 * (1.0 + inner) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        _send(pending, a, g * local)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# Linear algebra and structure ops


def matmul(a, b) -> Tensor:
    """Matrix product; supports 2-D operands and numpy-style batched stacks."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(np.matmul(a.data, b.data))
    except ValueError:
        raise ShapeMismatchError(f"matmul: shapes {a.data.shape} and {b.data.shape}") from None

    def bw(g, pending):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            _send(pending, a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            _send(pending, b, _unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))

    def bw(g, pending):
        _send(pending, a, g.reshape(a.data.shape))

    return _record(out, (a,), bw)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bw(g, pending):
        _send(pending, a, g.transpose(inv))

    return _record(out, (a,), bw)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    except ValueError:
        raise ShapeMismatchError(f"concat: shapes {[t.data.shape for t in ts]}") from None
    sizes = [t.data.shape[axis] for t in ts]
    offs = np.cumsum([0] + sizes)

    def bw(g, pending):
        for t, lo, hi in zip(ts, offs[:-1], offs[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            _send(pending, t, g[tuple(idx)])

    return _record(out, tuple(ts), bw)


def getitem(a, key) -> Tensor:
    """Basic slicing (slices / ints); gradient scatters back into zeros."""
    a = _as_tensor(a)
    out = Tensor(a.data[key])

    def bw(g, pending):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] += g
            _send(pending, a, full)

    return _record(out, (a,), bw)


def index_rows(a, idx) -> Tensor:
    """Gather rows by integer index array (embedding lookup / token dispatch)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx])

    def bw(g, pending):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _send(pending, a, full)

    return _record(out, (a,), bw)


def scatter_rows(values, idx, num_rows: int) -> Tensor:
    """Scatter-add rows of `values` into a zero matrix of `num_rows` rows."""
    values = _as_tensor(values)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = np.zeros((num_rows,) + values.data.shape[1:], dtype=values.data.dtype)
    np.add.at(out_data, idx, values.data)
    out = Tensor(out_data)

    def bw(g, pending):
        _send(pending, values, g[idx])

    return _record(out, (values,), bw)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = Tensor(np.broadcast_to(a.data, shape).copy())

    def bw(g, pending):
        _send(pending, a, _unbroadcast(g, a.data.shape))

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# Reductions and composites


def t_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g, pending):
        if axis is None:
            _send(pending, a, np.broadcast_to(g, a.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _send(pending, a, np.broadcast_to(g, a.data.shape).copy())

    return _record(out, (a,), bw)


def t_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return scale(t_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def bw(g, pending):
        dot = (g * p).sum(axis=axis, keepdims=True)
        _send(pending, a, p * (g - dot))

    return _record(out, (a,), bw)


def layer_norm(a, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    a = _as_tensor(a)
    if gain.data.shape != a.data.shape[-1:] or bias.data.shape != a.data.shape[-1:]:
        raise ShapeMismatchError(
            f"layer_norm: input {a.data.shape}, gain {gain.data.shape}, bias {bias.data.shape}"
        )
    mu = t_mean(a, axis=-1, keepdims=True)
    centered = sub(a, mu)
    var = t_mean(mul(centered, centered), axis=-1, keepdims=True)
    inv_std = pow_const(add(var, Tensor(np.full_like(var.data, eps))), -0.5)
    normed = mul(centered, inv_std)
    return add(mul(normed, gain), bias)


def mse(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"mse: shapes {a.data.shape} and {b.data.shape}")
    d = sub(a, b)
    return t_mean(mul(d, d))


# ---------------------------------------------------------------------------
# Optimizer


class Adam:
    """Adam with bias correction and per-parameter freezing.

    Frozen parameters are skipped entirely: no moment update, no step, and
    their bytes are untouched. A live parameter with no gradient is an error
    unless allow_unused is set (multitask nets train per-task batches that
    legitimately never touch other tasks' routers).
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 allow_unused: bool = False):
        self.params = list(params)
        self.allow_unused = allow_unused
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {id(p): np.zeros_like(p.data) for p in self.params}
        self._v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in self.params:
            if p.frozen:
                continue
            if p.grad is None:
                if self.allow_unused:
                    continue
                raise ContractError(f"parameter {p.name!r} has no gradient")
            m = self._m[id(p)]
            v = self._v[id(p)]
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
