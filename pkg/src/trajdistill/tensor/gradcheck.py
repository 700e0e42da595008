"""Central finite differences, used as the independent gradient oracle."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tape import Tensor


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor | np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """(f(x + eps*e_i) - f(x - eps*e_i)) / (2 eps) for every coordinate i.

    ``f`` receives a fresh constant Tensor each call and must return a
    scalar.  Nothing is recorded, so the result never touches a tape.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    flat = base.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)

    def value(arr):
        r = f(Tensor(arr.copy()))
        return float(r.data.reshape(-1)[0]) if isinstance(r, Tensor) else float(r)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = value(base)
        flat[i] = orig - eps
        lo = value(base)
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(base.shape)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error ||a-b|| / max(||a||, ||b||, tiny)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-300)
    return float(np.abs(a - b).max(initial=0.0) / denom)
