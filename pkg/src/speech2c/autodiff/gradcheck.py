"""Central finite-difference checks against ``Tensor.backward``."""
from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import Tensor


def rel_err(a, b, floor: float = 1e-10) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Entry-wise central differences of scalar ``fn()`` w.r.t. ``t.data``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn().item()
        flat[i] = old - h
        down = fn().item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def analytic_grads(fn: Callable[[], Tensor], tensors: Mapping[str, Tensor]) -> dict:
    for t in tensors.values():
        t.grad = None
    fn().backward()
    return {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for k, t in tensors.items()}


def _noise_floor(fn) -> float:
    # central differences of an O(|f|) value carry ~|f| * 1e-11 rounding noise;
    # gradients below this floor count as zero on both sides
    return 1e-6 * max(1.0, abs(fn().item()))


def check_entrywise(fn: Callable[[], Tensor], tensors: Mapping[str, Tensor], h: float = 1e-5) -> dict:
    """name -> relative error between backward and entry-wise finite differences."""
    floor = _noise_floor(fn)
    ana = analytic_grads(fn, tensors)
    return {k: rel_err(ana[k], numeric_grad(fn, t, h), floor) for k, t in tensors.items()}


def check_directional(fn: Callable[[], Tensor], tensors: Mapping[str, Tensor],
                      rng: Optional[np.random.Generator] = None, h: float = 1e-5) -> dict:
    """name -> relative error of grad.u against (f(x+hu) - f(x-hu)) / 2h.

    One random unit direction per tensor; cheap enough for whole models.
    """
    rng = rng or np.random.default_rng(0)
    floor = _noise_floor(fn)
    ana = analytic_grads(fn, tensors)
    out = {}
    for k, t in tensors.items():
        u = rng.standard_normal(t.shape)
        u /= np.linalg.norm(u) or 1.0
        base = t.data.copy()
        t.data = base + h * u
        up = fn().item()
        t.data = base - h * u
        down = fn().item()
        t.data = base
        fd = (up - down) / (2 * h)
        an = float((ana[k] * u).sum())
        out[k] = abs(an - fd) / max(abs(an), abs(fd), floor)
    return out
