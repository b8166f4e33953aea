"""Numpy implementations of the numeric kernels.

This is the fallback backend: always available, selected when the
compiled extension is absent or disabled. Both backends share one
contract (see kernels/__init__.py): C-contiguous 2-D float32/float64
arrays in, freshly allocated arrays of the same dtype out.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def matmul(a: np.ndarray, b: np.ndarray, ta: bool = False,
           tb: bool = False) -> np.ndarray:
    out = (a.T if ta else a) @ (b.T if tb else b)
    return np.ascontiguousarray(out)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a - b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a * b


def scale(a: np.ndarray, c: float) -> np.ndarray:
    return a * a.dtype.type(c)


def add_scalar(a: np.ndarray, c: float) -> np.ndarray:
    return a + a.dtype.type(c)


def scale_rows(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    # row i multiplied by v[i]
    return a * v[:, None]


def softmax_rows(a: np.ndarray) -> np.ndarray:
    shifted = a - np.max(a, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def softmax_rows_bwd(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    dot = np.sum(y * gy, axis=1, keepdims=True)
    return y * (gy - dot)


def sqrt_nonneg(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(a, 0))


def sqrt_nonneg_bwd(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    # subgradient 0 where the forward clamped at zero
    out = np.zeros_like(y)
    nz = y > 0
    out[nz] = gy[nz] / (2 * y[nz])
    return out


def softplus(a: np.ndarray) -> np.ndarray:
    # log(1 + e^x), stable for large |x|
    return np.logaddexp(a.dtype.type(0), a)


def softplus_bwd(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    np.exp(-np.abs(x), out=out)
    sig = np.where(x >= 0, 1.0 / (1.0 + out), out / (1.0 + out))
    return (gy * sig).astype(x.dtype, copy=False)


def normalize_rows(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.sum(a * a, axis=1))
    if np.any(norms == 0):
        raise ValueError("degenerate feature: zero-norm row cannot be normalized")
    return a / norms[:, None], norms


def normalize_rows_bwd(y: np.ndarray, norms: np.ndarray,
                       gy: np.ndarray) -> np.ndarray:
    dot = np.sum(y * gy, axis=1, keepdims=True)
    return (gy - y * dot) / norms[:, None]


def sum_all(a: np.ndarray) -> float:
    # accumulate in f64 regardless of input dtype (matches the compiled backend)
    return float(np.sum(a, dtype=np.float64))
