"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op records its parents and a backward closure on the
output tensor. ``backward`` orders the recorded graph topologically (the
tape) and pushes gradients from the loss to every ``requires_grad`` leaf.
Storage is float32 by default; float64 tensors flow through the same ops and
are used by :func:`grad_check`.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import InvalidTarget, NotScalar, ShapeMismatch

LAYER_NORM_EPS = 1e-6
L2_NORMALIZE_EPS = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if dtype is None:
            dtype = np.float32
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.name = None
        return t

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operators ---------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        return Tensor._wrap(x)
    return Tensor._wrap(np.asarray(x, dtype=np.float32))


def _pair(a, b):
    """Coerce an operand pair; a bare constant adopts the dtype of the tensor it meets."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor._wrap(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor._wrap(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Record a differentiable op.

    ``backward_fn(g)`` receives the output gradient and returns one gradient
    (or None) per parent, each shaped like that parent.
    """
    out = Tensor._wrap(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- tape traversal -----------------------------------------------------------

def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = g.astype(node.data.dtype, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return custom_op(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(out, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return custom_op(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(-np.logaddexp(0, -a.data)).astype(a.dtype, copy=False)
    return custom_op(out, (a,), lambda g: (g * out * (1 - out),))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return custom_op(out, (a, b), lambda g: (_unbroadcast(np.where(cond, g, 0), a.shape),
                                             _unbroadcast(np.where(cond, 0, g), b.shape)))


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = ndtr(x)
    out = x * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)
        return (g * (cdf + x * pdf),)

    return custom_op(out, (a,), bw)


# -- reductions and shape ops -------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return custom_op(np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a, i, j) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def take(a, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    a = as_tensor(a)
    out = a.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return custom_op(np.array(out, dtype=a.dtype), (a,), bw)


def concat(tensors: Sequence, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(out, tensors, bw)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()
    return custom_op(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading batch axes broadcast; gradients are reduced back onto each
    operand's own shape.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored as [in, out]."""
    y = matmul(x, weight)
    return y if bias is None else y + bias


# -- normalizations and probability ops --------------------------------------

def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return custom_op(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return custom_op(out, (a,), bw)


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    weights = np.exp(a.data - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return custom_op(out, (a,), bw)


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.shape[-1] < 1:
        raise ShapeMismatch("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return custom_op(out, (x, gamma, beta), bw)


def l2_normalize(x, eps=L2_NORMALIZE_EPS) -> Tensor:
    """Scale each last-axis vector to unit norm; norms below eps divide by eps."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom

    def bw(g):
        radial = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(norm > eps, (g - out * radial) / denom, g / eps),)

    return custom_op(out, (x,), bw)


def cross_entropy(logits, targets, ignore_index=255) -> Tensor:
    """Mean negative log-likelihood over class axis 1, skipping ignore_index."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim < 2 or targets.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeMismatch(f"logits {logits.shape} do not match targets {targets.shape}")
    C = logits.shape[1]
    valid = targets != ignore_index
    bad = valid & ((targets < 0) | (targets >= C))
    if bad.any():
        raise InvalidTarget(f"target {int(targets[bad].flat[0])} outside [0, {C})")
    z = np.moveaxis(logits.data, 1, -1)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    safe = np.where(valid, targets, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    count = int(valid.sum())
    if count == 0:
        return custom_op(np.zeros((), logits.dtype), (logits,), lambda g: (np.zeros_like(logits.data),))
    out = np.asarray(-(picked * valid).sum() / count, dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        d = (p - onehot) * (valid[..., None] * (g / count))
        return (np.moveaxis(d, -1, 1).astype(logits.dtype, copy=False),)

    return custom_op(out, (logits,), bw)


# -- convolution --------------------------------------------------------------

def conv_transpose2d(x, weight, bias=None, stride=2, padding=1, output_padding=1) -> Tensor:
    """Transposed 2-D convolution; x [B,Ci,H,W], weight [Ci,Co,k,k].

    Output extent is ``(H-1)*stride - 2*padding + k + output_padding``, so the
    default 3x3/stride-2 configuration exactly doubles H and W.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    B, Ci, H, W = x.shape
    if weight.shape[0] != Ci:
        raise ShapeMismatch(f"conv_transpose2d: {Ci} input channels vs weight {weight.shape}")
    _, Co, k, _ = weight.shape
    s, p = stride, padding
    Hf, Wf = (H - 1) * s + k, (W - 1) * s + k
    Ho = (H - 1) * s - 2 * p + k + output_padding
    Wo = (W - 1) * s - 2 * p + k + output_padding
    Hpad, Wpad = max(Hf, p + Ho), max(Wf, p + Wo)

    xt = x.data.transpose(0, 2, 3, 1)  # B,H,W,Ci
    cols = (xt.reshape(-1, Ci) @ weight.data.reshape(Ci, -1)).reshape(B, H, W, Co, k, k)
    full = np.zeros((B, Co, Hpad, Wpad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            full[:, :, ki:ki + (H - 1) * s + 1:s, kj:kj + (W - 1) * s + 1:s] += \
                cols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    out = full[:, :, p:p + Ho, p:p + Wo].copy()

    def bw(g):
        gfull = np.zeros((B, Co, Hpad, Wpad), dtype=g.dtype)
        gfull[:, :, p:p + Ho, p:p + Wo] = g
        gcols = np.empty((B, H, W, Co, k, k), dtype=g.dtype)
        for ki in range(k):
            for kj in range(k):
                gcols[:, :, :, :, ki, kj] = \
                    gfull[:, :, ki:ki + (H - 1) * s + 1:s, kj:kj + (W - 1) * s + 1:s].transpose(0, 2, 3, 1)
        gcols = gcols.reshape(-1, Co * k * k)
        gx = (gcols @ weight.data.reshape(Ci, -1).T).reshape(B, H, W, Ci).transpose(0, 3, 1, 2) \
            if x.requires_grad else None
        gw = (xt.reshape(-1, Ci).T @ gcols).reshape(weight.shape) if weight.requires_grad else None
        return gx, gw

    y = custom_op(out, (x, weight), bw)
    if bias is not None:
        y = y + reshape(as_tensor(bias), (1, Co, 1, 1))
    return y


# -- verification harness -----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    worst_index: tuple
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-3, tol: float = 1e-3) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` to central differences.

    Both sides run in float64. The per-entry relative error is
    ``|a - n| / max(|a|, |n|, 1e-2 * max|n|, 1e-12)``, so entries that are
    tiny relative to the largest gradient component are judged on an
    absolute scale instead of amplifying differencing noise.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True, dtype=np.float64)
    loss = f(xt)
    backward(loss)
    analytic = np.zeros_like(x0) if xt.grad is None else np.asarray(xt.grad, dtype=np.float64)

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(x0, dtype=np.float64)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(x0, dtype=np.float64)).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)

    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(1e-2 * scale, 1e-12))
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    max_rel = float(rel.max(initial=0.0))
    return GradCheckReport(max_rel, tol, max_rel <= tol, tuple(int(i) for i in worst), analytic, numeric)
