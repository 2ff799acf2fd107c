"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op below records its inputs and a closure computing the vector-Jacobian
product.  ``Tensor.backward`` walks the recorded graph once in reverse
topological order.  Storage is a numpy array; all training math is float64.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, InputTooShortError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / decoding)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._consumed = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward -------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every requires_grad ancestor of this scalar.

        Gradients accumulate into leaves that already hold one.  The graph is
        released afterwards, so a second call on the same tensor raises.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise ContractError("backward() already ran on this graph; rebuild the forward pass")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad=True")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            node._consumed = True
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -- operators ------------------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._make(out, (a, b),
                        lambda g: (_unbroadcast(g / bd, ad.shape),
                                   _unbroadcast(-g * out / bd, bd.shape)))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return Tensor._make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    ad = a.data
    keep = ad >= floor
    return Tensor._make(np.where(keep, ad, floor), (a,), lambda g: (g * keep,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (a,), back)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by a constant (no gradient there)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return Tensor._make(np.where(mask, value, a.data), (a,), lambda g: (np.where(mask, 0.0, g),))


# -- reductions / shape ---------------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; the backward scatter-adds repeated indices."""
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    shape = a.shape

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(a.data[idx], (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, back)


# -- linear algebra -----------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(ad @ bd, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- normalisation / probability ---------------------------------------------
def softmax(x: Tensor, temperature: float = 1.0, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis of ``x / temperature``.

    ``mask`` (True = keep) sends excluded logits to -inf.  A row with every
    entry excluded yields all zeros.
    """
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def back(g):
        return ((y * (g - (g * y).sum(axis=-1, keepdims=True))) / temperature,)

    return Tensor._make(y, (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    out = z - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(out, (x,), back)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along ``axis``; all -inf slices give -inf with zero gradient."""
    z = x.data
    m = z.max(axis=axis, keepdims=True)
    finite = np.isfinite(m)
    m_safe = np.where(finite, m, 0.0)
    with np.errstate(divide="ignore"):
        out_k = m_safe + np.log(np.exp(z - m_safe).sum(axis=axis, keepdims=True))
    out_k = np.where(finite, out_k, -np.inf)
    out = np.squeeze(out_k, axis=axis)

    def back(g):
        w = np.where(finite, np.exp(z - np.where(finite, out_k, 0.0)), 0.0)
        return (np.expand_dims(g, axis) * w,)

    return Tensor._make(out, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if not eps > 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: features {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    xd, gd = x.data, gain.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + bias.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return Tensor._make(out, (x, gain, bias), back)


def conv1d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 1-D convolution.

    x: [T_in, c_in], kernel: [c_out, c_in, k] -> [T_out, c_out] with
    T_out = (T_in - k) // stride + 1.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    t_in, c_in = x.shape
    c_out, kc_in, k = kernel.shape
    if kc_in != c_in:
        raise DimensionError(f"conv1d: input channels {x.shape} vs kernel {kernel.shape}")
    if t_in < k:
        raise InputTooShortError(f"conv1d input length {t_in} shorter than kernel width {k}")
    t_out = (t_in - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=0)[::stride][:t_out]
    cols = windows.reshape(t_out, c_in * k)
    kmat = kernel.data.reshape(c_out, c_in * k)
    out = cols @ kmat.T

    def back(g):
        dk = (g.T @ cols).reshape(kernel.shape)
        dcols = (g @ kmat).reshape(t_out, c_in, k)
        dx = np.zeros((t_in, c_in), dtype=DTYPE)
        span = stride * (t_out - 1) + 1
        for j in range(k):
            dx[j:j + span:stride] += dcols[:, :, j]
        return dx, dk

    return Tensor._make(out, (x, kernel), back)


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale vectors on the last axis to unit norm; norms are floored at ``eps``."""
    norm = sqrt(tsum(mul(x, x), axis=-1, keepdims=True))
    return div(x, clamp_min(norm, eps))


def cosine_sim(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """a.b / (|a| |b|) along the last axis.

    Zero vectors do not raise: each norm is floored at ``eps`` so the result is 0.
    """
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_sim: {a.shape} vs {b.shape}")
    return tsum(mul(l2_normalize(a, eps), l2_normalize(b, eps)), axis=-1)


def cross_entropy(log_probs: Tensor, targets: Iterable[int], ignore_index: Optional[int] = None) -> Tensor:
    """Mean of -log p(target) over rows whose target is not ``ignore_index``.

    With every row ignored the loss is 0 and all gradients are 0.
    """
    n, v = log_probs.shape
    tgt = np.asarray(list(targets), dtype=np.int64)
    if tgt.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows but {tgt.shape[0]} targets")
    keep = np.ones(n, dtype=bool) if ignore_index is None else tgt != ignore_index
    bad = np.nonzero(keep & ((tgt < 0) | (tgt >= v)))[0]
    if bad.size:
        p = int(bad[0])
        raise IndexError(f"cross_entropy target {int(tgt[p])} at position {p} outside [0, {v})")
    rows = np.nonzero(keep)[0]
    count = rows.size
    if count == 0:
        return Tensor._make(np.asarray(0.0), (log_probs,), lambda g: (np.zeros((n, v)),))
    cols = tgt[rows]
    value = -log_probs.data[rows, cols].sum() / count

    def back(g):
        out = np.zeros((n, v), dtype=DTYPE)
        out[rows, cols] = -g / count
        return (out,)

    return Tensor._make(np.asarray(value), (log_probs,), back)
