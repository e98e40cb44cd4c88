"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an n-dimensional float array (float32 by default,
float64 for high-precision gradient checking) together with an optional
gradient buffer and a link into the operation tape. Calling
:meth:`Tensor.backward` on a scalar populates ``grad`` on every tracked
ancestor; repeated calls accumulate.

Everything here is deterministic: the same seed and the same op sequence
produce bit-identical data and grad buffers.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _coerce(data) -> np.ndarray:
    # float64 survives only when handed in as a numpy array or numpy scalar
    # (gradient-check shadow mode); plain Python numbers and everything else
    # become the float32 working precision
    if isinstance(data, (np.ndarray, np.generic)) and data.dtype == np.float64:
        return np.asarray(data)
    arr = np.asarray(data)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """n-d float array with optional reverse-mode gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _coerce(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], tuple] | None = None

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
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={'yes' if self.grad is not None else 'no'})"

    # -- gradient plumbing ----------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from a scalar, accumulating into ``grad`` buffers."""
        if self.data.shape != ():
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that is not tracked")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        # Per-call gradients are staged separately so that repeated backward
        # calls accumulate instead of compounding.
        pending: dict[int, np.ndarray] = {id(self): np.ones((), dtype=self.data.dtype)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype, copy=True)
            else:
                node.grad += g
            if node._backward_fn is None:
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


def add(a, b) -> Tensor:
    # python scalars stay scalars so they cannot widen the working dtype
    if _is_scalar(a):
        a, b = b, a
    if _is_scalar(b):
        a = as_tensor(a)
        s = b

        def backward_scalar(g):
            return (g,)

        return _make(a.data + s, (a,), backward_scalar)

    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    if _is_scalar(a):
        a, b = b, a
    if _is_scalar(b):
        a = as_tensor(a)
        s = b

        def backward_scalar(g):
            return (g * s,)

        return _make(a.data * s, (a,), backward_scalar)

    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)

    def backward(g):
        return ((x.data > 0) * g,)

    return _make(out, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation. Written with in-place updates so the hot
    path allocates two buffers instead of seven."""
    x = as_tensor(x)
    xd = x.data
    t = xd * xd
    t *= 0.044715
    t += 1.0
    t *= xd
    t *= _GELU_C
    np.tanh(t, out=t)  # t = tanh(c * (x + 0.044715 x^3)), kept for backward
    out = t + 1.0
    out *= xd
    out *= 0.5

    def backward(g):
        d = xd * xd
        d *= 3 * 0.044715
        d += 1.0
        d *= _GELU_C
        d *= 1.0 - t * t  # sech^2 of the inner term
        d *= xd
        d += 1.0 + t
        d *= 0.5
        d *= g
        return (d,)

    return _make(out, (x,), backward)


def dropout(x: Tensor, p: float, rng) -> Tensor:
    """Inverted dropout; ``rng`` is a numpy Generator. Identity when p == 0."""
    if p <= 0.0:
        return x
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out = x.data * keep

    def backward(g):
        return (g * keep,)

    return _make(out, (x,), backward)


# -- shape manipulation -------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.transpose(axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _make(out, (x,), backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape)

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return _make(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward)


def getitem(x: Tensor, key) -> Tensor:
    """Basic indexing only (ints, slices, tuples thereof); no fancy indices."""
    x = as_tensor(x)
    parts = key if isinstance(key, tuple) else (key,)
    for p in parts:
        if not isinstance(p, (int, np.integer, slice)) and p is not Ellipsis:
            raise TypeError(f"only basic indexing is differentiable, got {type(p).__name__}")
    out = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _make(out, (x,), backward)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows along the second-to-last axis.

    ``x`` is (N, D) with ``indices`` (k,), or (B, N, D) with ``indices``
    (B, k). Backward scatters into the selected rows and leaves the rest
    exactly zero. Indices must be unique per row but may be in any order;
    the output honors the given order.
    """
    x = as_tensor(x)
    idx = np.asarray(indices)
    if x.ndim == 2:
        if idx.ndim != 1:
            raise ValueError(f"expected 1-d indices for 2-d input, got shape {idx.shape}")
        n = x.shape[0]
        _check_indices(idx, n)
        out = x.data[idx]

        def backward(g):
            gx = np.zeros_like(x.data)
            gx[idx] = g
            return (gx,)

        return _make(out, (x,), backward)

    if x.ndim == 3:
        if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
            raise ValueError(
                f"expected indices of shape ({x.shape[0]}, k) for input {x.shape}, got {idx.shape}"
            )
        n = x.shape[1]
        for row in idx:
            _check_indices(row, n)
        expanded = idx[:, :, None]
        out = np.take_along_axis(x.data, np.broadcast_to(expanded, idx.shape + (x.shape[2],)), axis=1)

        def backward(g):
            gx = np.zeros_like(x.data)
            # unique indices per row, so put == scatter-add
            np.put_along_axis(gx, np.broadcast_to(expanded, g.shape), g, axis=1)
            return (gx,)

        return _make(out, (x,), backward)

    raise ValueError(f"gather_rows expects a 2-d or 3-d tensor, got {x.ndim}-d")


def _check_indices(idx: np.ndarray, n: int) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"index out of range: values must be in [0, {n}), got {idx.tolist()}")
    if len(np.unique(idx)) != idx.size:
        raise ValueError(f"duplicate indices not allowed: {idx.tolist()}")


# -- reductions ---------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.shape).astype(x.data.dtype, copy=True),)

    return _make(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else x.data.size // out.size

    def backward(g):
        if axis is None:
            g2 = g
        else:
            g2 = g if keepdims else np.expand_dims(g, axis)
        scaled = g2 / count
        return (np.broadcast_to(scaled, x.shape).astype(x.data.dtype, copy=True),)

    return _make(out, (x,), backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy-style leading-dimension broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul requires >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape} (inner dims {a.shape[-1]} != {b.shape[-2]})")
    out = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


# -- normalization and activations over the last axis -------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        g_gamma = (g * xhat).sum(axis=lead)
        g_beta = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gamma, g_beta

    return _make(out, (x, gamma, beta), backward)


# -- convolution --------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation (no kernel flip) with zero padding.

    ``x`` is (C, H, W) or (B, C, H, W); ``w`` is (C_out, C_in, kh, kw).
    The output spatial size must come out integral or the call is rejected.
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects (B,C,H,W) and (Cout,Cin,kh,kw), got {x.shape} and {w.shape}")
    b, c, h, wd = xd.shape
    c_out, c_in, kh, kw = w.shape
    if c != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {c_in}")
    if (h + 2 * padding - kh) % stride or (wd + 2 * padding - kw) % stride:
        raise ValueError(
            f"conv2d output size is not integral for input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols2 = cols.reshape(b, c * kh * kw, ho * wo)
    w2 = w.data.reshape(c_out, c * kh * kw)
    out = (w2 @ cols2).reshape(b, c_out, ho, wo)

    def backward(g):
        if squeeze:
            g = g[None]
        g2 = g.reshape(b, c_out, ho * wo)
        gw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = (w2.T @ g2).reshape(b, c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return (gx[0] if squeeze else gx), gw

    return _make(out[0] if squeeze else out, (x, w), backward)


# -- losses -------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy from logits, stable log-sum-exp form."""
    logits = as_tensor(logits)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.data.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"targets shape {y.shape} != logits shape {logits.shape}")
    z = logits.data
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = per.mean(dtype=z.dtype)
    n = z.size

    def backward(g):
        return (g * (_sigmoid(z) - y) / n,)

    return _make(np.asarray(out, dtype=z.dtype), (logits,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """-log softmax(logits)[label], stable; batched input averages over rows.

    ``logits`` is (C,) with an int label or (B, C) with (B,) int labels.
    """
    logits = as_tensor(logits)
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z2.ndim != 2 or lab.shape != (z2.shape[0],):
        raise ValueError(f"cross_entropy got logits {z.shape} and labels shape {lab.shape}")
    c = z2.shape[1]
    if lab.min() < 0 or lab.max() >= c:
        raise ValueError(f"class index out of range [0, {c}): {lab.tolist()}")
    m = z2.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z2 - m).sum(axis=1))
    rows = np.arange(z2.shape[0])
    per = lse - z2[rows, lab]
    out = per.mean(dtype=z.dtype)
    bsz = z2.shape[0]

    def backward(g):
        p = np.exp(z2 - m)
        p /= p.sum(axis=1, keepdims=True)
        p[rows, lab] -= 1.0
        gz = (g / bsz) * p
        return (gz[0] if single else gz,)

    return _make(np.asarray(out, dtype=z.dtype), (logits,), backward)
