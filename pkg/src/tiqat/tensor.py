"""Dense numpy tensors with a first-order reverse-mode gradient tape.

Only the primitives the encoder, the quantizer and the distillation losses
need are provided. Every primitive has an analytic backward rule; there is
no second-order support.

Ops are recorded on the innermost active :class:`Tape` of the calling thread
and only when at least one input requires a gradient. Outside a tape nothing
is recorded, which is how teacher traces stay gradient-free.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import DoubleBackward, ShapeMismatch

DTYPE = np.float32

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording for the enclosed block (pushes an empty slot)."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, (np.ndarray, np.generic)) and data.dtype.kind == "f" else DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        tape = current_tape()
        if tape is None:
            raise RuntimeError("backward() called outside an active tape")
        tape.backward(self)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _Op:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed primitives.

    Inputs of an op are always recorded before the op itself, so walking the
    list backwards is a valid reverse topological order. A tape supports one
    backward pass; call :meth:`reset` to reuse it.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self._consumed = False

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Backward) -> None:
        if self._consumed:
            raise DoubleBackward("tape already replayed; reset() before recording")
        self.ops.append(_Op(out, inputs, backward))

    def reset(self) -> None:
        self.ops = []
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise DoubleBackward("backward() called twice on the same tape")
        if loss.data.size != 1:
            raise ShapeMismatch(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True
        produced = {id(op.out) for op in self.ops}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for op in reversed(self.ops):
            g = grads.pop(id(op.out), None)
            if g is None:
                continue
            op.out.grad = g
            for inp, gi in zip(op.inputs, op.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
        self.ops = []


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(value: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    """Wrap ``value`` as the output of a primitive and record it if needed."""
    out = Tensor(value)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(_binary(np.add, a, b), (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(_binary(np.subtract, a, b), (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(_binary(np.multiply, a, b), (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def gelu(x) -> Tensor:
    """Exact GeLU, x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = (x.data * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype),)

    return make_op(out, (x,), backward)


# -- shape -------------------------------------------------------------------

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return make_op(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def split_heads(x, heads: int) -> Tensor:
    """(B, n, d) -> (B, H, n, d/H)."""
    x = as_tensor(x)
    b, n, d = x.shape
    if d % heads:
        raise ShapeMismatch(f"hidden size {d} not divisible by {heads} heads")
    out = x.data.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)
    return make_op(out, (x,), lambda g: (g.transpose(0, 2, 1, 3).reshape(b, n, d),))


def merge_heads(x) -> Tensor:
    """(B, H, n, d_h) -> (B, n, H*d_h)."""
    x = as_tensor(x)
    b, h, n, dh = x.shape
    out = x.data.transpose(0, 2, 1, 3).reshape(b, n, h * dh)
    return make_op(out, (x,), lambda g: (g.reshape(b, n, h, dh).transpose(0, 2, 1, 3),))


def concat_last_dim(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    lead = parts[0].shape[:-1]
    if any(p.shape[:-1] != lead for p in parts):
        raise ShapeMismatch("concat_last_dim: leading shapes differ")
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=-1)
    return make_op(out, parts,
                   lambda g: tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def take_token(x, index: int = 0) -> Tensor:
    """(B, n, d) -> (B, d), the hidden state at one sequence position."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, index, :] = g
        return (full,)

    return make_op(x.data[:, index, :], (x,), backward)


def embedding_lookup(table, ids: np.ndarray) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(f"token id out of range for table of {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return make_op(table.data[ids], (table,), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} x {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # (..., k) x (k, m): fold the leading axes into one GEMM
        k, m = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (m,))

        def backward(g):
            g2 = g.reshape(-1, m)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return make_op(out, (a, b), backward)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op(a.data @ b.data, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- normalisations ----------------------------------------------------------

def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_op(p, (x,), backward)


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make_op(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layernorm: affine shapes {gamma.shape}, {beta.shape} for d={d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op(out, (x, gamma, beta), backward)


# -- reductions and losses ---------------------------------------------------

def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return make_op(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return make_op(x.data.mean(), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def mse(a, b) -> Tensor:
    """Mean over all elements of (a - b)^2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    c = a.dtype.type(2.0 / n)
    return make_op(np.mean(diff * diff), (a, b), lambda g: (g * c * diff, -g * c * diff))


def soft_cross_entropy(logits, target_probs) -> Tensor:
    """Mean over the batch of -sum(target * log_softmax(logits))."""
    logits, target = as_tensor(logits), as_tensor(target_probs)
    if logits.shape != target.shape:
        raise ShapeMismatch(f"soft_cross_entropy: {logits.shape} vs {target.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    batch = logits.data.size // logits.shape[-1]
    value = -(target.data * logp).sum() / batch

    def backward(g):
        p = np.exp(logp)
        tsum = target.data.sum(axis=-1, keepdims=True)
        return g * (p * tsum - target.data) / batch, -g * logp / batch

    return make_op(value, (logits, target), backward)


def softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
