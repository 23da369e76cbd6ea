"""Minimal reverse-mode automatic differentiation on top of numpy.

Only the operations the CTRN model needs are provided. Every tensor keeps a
reference to its parents and a closure that pushes the output gradient back to
them; :func:`backward` walks the recorded graph once in reverse topological
order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

BCE_EPS = 1e-7

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


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


class Tensor:
    """Dense n-d array with an optional gradient slot.

    ``data`` is never mutated by the operations in this module; ``grad`` is
    filled by :func:`backward` for leaf tensors with ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), "scale", lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0).astype(x.dtype, copy=False), (x,), "relu",
                 lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    return _make(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sum_(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), "sum", bw)


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis), 1.0 / n)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` whose shape equals the trailing dims of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"bias_add: bias {b.shape} does not match trailing dims of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    return _make(x.data + b.data, (x, b), "bias_add", lambda g: (g, g.sum(axis=lead)))


def apply_mask(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Zero entries whose leading-index mask is 0; ``mask`` is a constant."""
    if mask is None:
        return x
    m = np.asarray(mask, dtype=x.dtype)
    if x.shape[: m.ndim] != m.shape:
        raise ShapeError(f"apply_mask: mask {m.shape} is not a prefix of {x.shape}")
    m = m.reshape(m.shape + (1,) * (x.ndim - m.ndim))
    return _make(x.data * m, (x,), "mask", lambda g: (g * m,))


# ----------------------------------------------------------------- structure

def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape).copy(), (x,), "reshape", lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose",
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def repeat_new_axis(x: Tensor, n: int, axis: int) -> Tensor:
    """Insert a new axis of extent ``n`` at ``axis`` holding copies of ``x``."""
    x = as_tensor(x)
    data = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _make(data, (x,), "repeat", lambda g: (g.sum(axis=axis),))


# ------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) dims follow numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}") from exc
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), "matmul", bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), "softmax", bw)


def conv1d_same(x: Tensor, weight: Tensor, bias: Tensor | None, padding: int) -> Tensor:
    """Zero-padded cross-correlation along the last axis.

    ``x`` is B x D x T, ``weight`` is Dout x D x K with K odd and
    ``padding == (K - 1) // 2`` so the time extent is preserved.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv1d_same: input {x.shape} incompatible with weight {weight.shape}")
    k = weight.shape[2]
    if k % 2 == 0:
        raise ValueError(f"conv1d_same: kernel size must be odd, got {k}")
    if padding != (k - 1) // 2:
        raise ValueError(f"conv1d_same: padding {padding} inconsistent with kernel size {k}")
    B, D, T = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    w = weight.data
    Dout = w.shape[0]
    # im2col: rows are (b, t), columns are (d, j)
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # B D T K
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(B * T, D * k)
    wf = w.reshape(Dout, D * k)
    out = (cols @ wf.T).reshape(B, T, Dout)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (Dout,):
            raise ShapeError(f"conv1d_same: bias {bias.shape} does not match {Dout} outputs")
        out = out + bias.data
        parents = parents + (bias,)
    out = np.ascontiguousarray(out.transpose(0, 2, 1))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * T, Dout)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wf).reshape(B, T, D, k)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j:j + T] += gcols[:, :, :, j].transpose(0, 2, 1)
        grads = [gxp[:, :, padding:padding + T], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return _make(out, parents, "conv1d", bw)


# ------------------------------------------------------- stochastic / losses

def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


def bce(pred: Tensor, target, mask=None) -> Tensor:
    """Mean binary cross-entropy over unmasked elements, clamped at 1e-7."""
    pred = as_tensor(pred)
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise ShapeError(f"bce: prediction {pred.shape} and target {y.shape} differ")
    if mask is None:
        m = np.ones_like(y)
    else:
        m = np.asarray(mask, dtype=pred.dtype)
        if m.shape != pred.shape:
            m = np.broadcast_to(m.reshape(m.shape + (1,) * (pred.ndim - m.ndim)), pred.shape)
    n = m.sum()
    if n == 0:
        raise ValueError("bce: mask selects no elements")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    inside = (pred.data >= BCE_EPS) & (pred.data <= 1.0 - BCE_EPS)
    loss = -(m * (y * np.log(p) + (1.0 - y) * np.log1p(-p))).sum() / n

    def bw(g):
        dp = -(y / p - (1.0 - y) / (1.0 - p)) * m / n
        return (g * dp * inside,)

    return _make(np.asarray(loss, dtype=pred.dtype), (pred,), "bce", bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mask=None, eps: float = 1e-5,
               running: tuple[np.ndarray, np.ndarray] | None = None,
               training: bool = True, momentum: float = 0.1) -> Tensor:
    """Normalise over every axis but the last, ignoring masked positions.

    ``mask`` covers a prefix of ``x``'s axes. In training mode the masked
    batch statistics are used and ``running`` (mean, var) is updated in
    place; in eval mode ``running`` is used. Masked positions output 0.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"batch_norm: affine params must be ({D},)")
    if mask is None:
        m = np.ones(x.shape[:-1] + (1,), dtype=x.dtype)
    else:
        m = np.asarray(mask, dtype=x.dtype)
        m = m.reshape(m.shape + (1,) * (x.ndim - m.ndim))
        m = np.broadcast_to(m, x.shape[:-1] + (1,))
    axes = tuple(range(x.ndim - 1))
    if training:
        n = m.sum()
        if n == 0:
            raise ValueError("batch_norm: mask selects no elements")
        mu = (x.data * m).sum(axis=axes) / n
        var = (m * (x.data - mu) ** 2).sum(axis=axes) / n
        if running is not None:
            rm, rv = running
            unbiased = var * n / max(n - 1.0, 1.0)
            rm *= 1.0 - momentum
            rm += momentum * mu
            rv *= 1.0 - momentum
            rv += momentum * unbiased
    else:
        if running is None:
            raise ValueError("batch_norm: eval mode needs running statistics")
        mu, var = running
        n = None
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = m * (xhat * gamma.data + beta.data)
    gd = gamma.data

    def bw(g):
        gm = g * m
        dgamma = (gm * xhat).sum(axis=axes)
        dbeta = gm.sum(axis=axes)
        gh = gm * gd
        if training:
            dx = m * inv * (gh - gh.sum(axis=axes) / n - xhat * (gh * xhat).sum(axis=axes) / n)
        else:
            dx = gh * inv
        return dx, dgamma, dbeta

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), "batch_norm", bw)


# ------------------------------------------------------------------ backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Gradients add onto whatever is already stored; zero them between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not attached to any tensor that requires grad")
    order = _topo_order(loss)
    local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = local.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in local:
                local[key] = local[key] + pg
            else:
                local[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is re-evaluated with each element of each input perturbed by
    +/- ``eps``; the error per element is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    return max(grad_check_report(f, inputs, eps).values(), default=0.0)


def grad_check_report(f: Callable[[], Tensor], inputs: Sequence[Tensor],
                      eps: float = 1e-4) -> dict[int, float]:
    """Per-input max relative error, keyed by position in ``inputs``."""
    for t in inputs:
        t.grad = None
        if not t.data.flags.c_contiguous or not t.data.flags.writeable:
            t.data = np.ascontiguousarray(t.data).copy()
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    errors: dict[int, float] = {}
    with no_grad():
        for idx, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            a_flat = analytic[idx].reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                a = float(a_flat[i])
                worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
            errors[idx] = worst
    for t in inputs:
        t.grad = None
    return errors
