"""Numeric kernel backends.

Two interchangeable implementations of the hot numeric primitives:

* ``_ckernels`` — Cython extension, used when it compiled successfully;
* ``_pykernels`` — numpy, always available.

The active backend is chosen once at import. Set ``SEQGEO_PURE=1`` to
force the numpy backend (useful for debugging and for benchmarking the
two against each other; see benchmarks/bench_kernels.py).

Shared contract: arguments are C-contiguous 2-D arrays of float32 or
float64 (both operands the same dtype); every function allocates and
returns a new array of that dtype and never mutates its inputs.
"""

from __future__ import annotations

import os

from seqgeo.kernels import _pykernels

if os.environ.get("SEQGEO_PURE"):
    _impl = _pykernels
else:
    try:
        from seqgeo.kernels import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _pykernels

BACKEND = _impl.BACKEND_NAME

matmul = _impl.matmul
add = _impl.add
sub = _impl.sub
mul = _impl.mul
scale = _impl.scale
add_scalar = _impl.add_scalar
scale_rows = _impl.scale_rows
softmax_rows = _impl.softmax_rows
softmax_rows_bwd = _impl.softmax_rows_bwd
sqrt_nonneg = _impl.sqrt_nonneg
sqrt_nonneg_bwd = _impl.sqrt_nonneg_bwd
softplus = _impl.softplus
softplus_bwd = _impl.softplus_bwd
normalize_rows = _impl.normalize_rows
normalize_rows_bwd = _impl.normalize_rows_bwd
sum_all = _impl.sum_all


def get_backend(name: str):
    """Return a backend module by name ("numpy" or "cython")."""
    if name == "numpy":
        return _pykernels
    if name == "cython":
        from seqgeo.kernels import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
