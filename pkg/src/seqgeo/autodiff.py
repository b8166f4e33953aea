"""Minimal dense-matrix engine with reverse-mode gradients.

The engine is deliberately small: 2-D float matrices, a fixed set of
primitive operations, and a Tape that records every primitive applied to
a taped operand. Calling :func:`grad` on a recorded 1x1 output replays
the tape once in reverse, accumulating gradients in a fixed order so
repeated runs are bit-identical.

Dtype discipline: float64 is the default (all gradient checks run in
f64); float32 is supported for training throughput. Operands of one
operation must share a dtype, and no broadcasting is performed — every
shape must match exactly.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from seqgeo import kernels

_ALLOWED_DTYPES = (np.float32, np.float64)


class Matrix:
    """A rows x cols float matrix, optionally recorded on a Tape.

    `array` is the C-contiguous numpy storage; `tape` is None for
    constants (no gradient flows into them) and a Tape for leaves and
    intermediate results of a recorded computation.
    """

    __slots__ = ("array", "tape")

    def __init__(self, data, tape: "Tape | None" = None,
                 dtype=None, validate: bool = True):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        arr = np.ascontiguousarray(arr)
        if arr.ndim != 2:
            raise ValueError(f"Matrix must be 2-D, got shape {arr.shape}")
        if validate and not np.all(np.isfinite(arr)):
            raise ValueError("Matrix entries must be finite")
        self.array = arr
        self.tape = tape

    @property
    def rows(self) -> int:
        return self.array.shape[0]

    @property
    def cols(self) -> int:
        return self.array.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.array.shape

    @property
    def dtype(self):
        return self.array.dtype

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the entries."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ValueError(f"item() requires a 1x1 matrix, got {self.shape}")
        return float(self.array[0, 0])

    def __repr__(self) -> str:
        taped = "taped" if self.tape is not None else "const"
        return f"Matrix({self.rows}x{self.cols}, {self.dtype}, {taped})"


class Tape:
    """Ordered record of primitive operations for reverse-mode replay."""

    __slots__ = ("_records",)

    def __init__(self):
        self._records: list[tuple[Matrix, tuple[Matrix, ...], Callable]] = []

    def var(self, data, dtype=None) -> Matrix:
        """Create a leaf matrix recorded as differentiable on this tape."""
        return Matrix(data, tape=self, dtype=dtype)

    def _record(self, out: Matrix, parents: tuple[Matrix, ...],
                backward: Callable) -> None:
        self._records.append((out, parents, backward))

    def __len__(self) -> int:
        return len(self._records)


def _result_tape(mats: Iterable[Matrix]) -> "Tape | None":
    tape = None
    for m in mats:
        if m.tape is None:
            continue
        if tape is None:
            tape = m.tape
        elif tape is not m.tape:
            raise ValueError("operands recorded on different tapes")
    return tape


def _check_same_dtype(*mats: Matrix) -> None:
    first = mats[0].dtype
    for m in mats[1:]:
        if m.dtype != first:
            raise ValueError(f"dtype mismatch: {first} vs {m.dtype}")


def _check_same_shape(a: Matrix, b: Matrix, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _make(out_array: np.ndarray, tape: "Tape | None",
          parents: tuple[Matrix, ...], backward: Callable) -> Matrix:
    out = Matrix(out_array, tape=tape, validate=False)
    if tape is not None:
        tape._record(out, parents, backward)
    return out


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def matmul(a: Matrix, b: Matrix, tb: bool = False) -> Matrix:
    """a @ b, or a @ b.T when tb is set."""
    _check_same_dtype(a, b)
    inner_a, inner_b = a.cols, (b.cols if tb else b.rows)
    if inner_a != inner_b:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ "
                         f"{b.shape}{'^T' if tb else ''}")
    out = kernels.matmul(a.array, b.array, tb=tb)

    def backward(g: np.ndarray, needs):
        ga = kernels.matmul(g, b.array, tb=not tb) if needs[0] else None
        if needs[1]:
            if tb:
                gb = kernels.matmul(g, a.array, ta=True)
            else:
                gb = kernels.matmul(a.array, g, ta=True)
        else:
            gb = None
        return ga, gb

    return _make(out, _result_tape((a, b)), (a, b), backward)


def add(a: Matrix, b: Matrix) -> Matrix:
    _check_same_dtype(a, b)
    _check_same_shape(a, b, "add")
    out = kernels.add(a.array, b.array)

    def backward(g, needs):
        return (g if needs[0] else None), (g if needs[1] else None)

    return _make(out, _result_tape((a, b)), (a, b), backward)


def sub(a: Matrix, b: Matrix) -> Matrix:
    _check_same_dtype(a, b)
    _check_same_shape(a, b, "sub")
    out = kernels.sub(a.array, b.array)

    def backward(g, needs):
        return (g if needs[0] else None), \
               (kernels.scale(g, -1.0) if needs[1] else None)

    return _make(out, _result_tape((a, b)), (a, b), backward)


def mul(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise product."""
    _check_same_dtype(a, b)
    _check_same_shape(a, b, "mul")
    out = kernels.mul(a.array, b.array)

    def backward(g, needs):
        return (kernels.mul(g, b.array) if needs[0] else None), \
               (kernels.mul(g, a.array) if needs[1] else None)

    return _make(out, _result_tape((a, b)), (a, b), backward)


def scale(a: Matrix, c: float) -> Matrix:
    out = kernels.scale(a.array, float(c))

    def backward(g, needs):
        return (kernels.scale(g, float(c)),)

    return _make(out, a.tape, (a,), backward)


def add_scalar(a: Matrix, c: float) -> Matrix:
    out = kernels.add_scalar(a.array, float(c))

    def backward(g, needs):
        return (g,)

    return _make(out, a.tape, (a,), backward)


def scale_rows(a: Matrix, v: np.ndarray) -> Matrix:
    """Multiply row i by the constant weight v[i] (v is not differentiated)."""
    v = np.ascontiguousarray(np.asarray(v, dtype=a.dtype).reshape(-1))
    if v.shape[0] != a.rows:
        raise ValueError(f"scale_rows: {a.rows} rows vs {v.shape[0]} weights")
    out = kernels.scale_rows(a.array, v)

    def backward(g, needs):
        return (kernels.scale_rows(g, v),)

    return _make(out, a.tape, (a,), backward)


def softmax_rows(a: Matrix) -> Matrix:
    """Row-wise softmax with per-row max subtraction for stability."""
    out = kernels.softmax_rows(a.array)

    def backward(g, needs):
        return (kernels.softmax_rows_bwd(out, g),)

    return _make(out, a.tape, (a,), backward)


def sqrt_elem(a: Matrix) -> Matrix:
    """Elementwise sqrt; negative inputs (roundoff) clamp to 0 with zero grad."""
    out = kernels.sqrt_nonneg(a.array)

    def backward(g, needs):
        return (kernels.sqrt_nonneg_bwd(out, g),)

    return _make(out, a.tape, (a,), backward)


def softplus_elem(a: Matrix) -> Matrix:
    """Elementwise log(1 + e^x), numerically stable for large |x|."""
    out = kernels.softplus(a.array)

    def backward(g, needs):
        return (kernels.softplus_bwd(a.array, g),)

    return _make(out, a.tape, (a,), backward)


def normalize_rows(a: Matrix) -> Matrix:
    """Scale each row to unit L2 norm. Zero rows are an error."""
    out, norms = kernels.normalize_rows(a.array)

    def backward(g, needs):
        return (kernels.normalize_rows_bwd(out, norms, g),)

    return _make(out, a.tape, (a,), backward)


def sum_all(a: Matrix) -> Matrix:
    """Sum of all entries as a 1x1 matrix."""
    out = np.array([[kernels.sum_all(a.array)]], dtype=a.dtype)

    def backward(g, needs):
        return (np.full_like(a.array, g[0, 0]),)

    return _make(out, a.tape, (a,), backward)


def mean_rows(a: Matrix, mask: np.ndarray | None = None) -> Matrix:
    """Mean over rows (1 x cols); with `mask`, mean over rows where mask=1."""
    if mask is None:
        w = np.full(a.rows, 1.0 / a.rows, dtype=a.dtype)
    else:
        mask = np.asarray(mask, dtype=a.dtype).reshape(-1)
        if mask.shape[0] != a.rows:
            raise ValueError(f"mean_rows: {a.rows} rows vs "
                             f"{mask.shape[0]} mask bits")
        k = float(mask.sum())
        if k == 0:
            raise ValueError("mean_rows: mask selects no rows")
        w = np.ascontiguousarray(mask / a.dtype.type(k))
    w2 = np.ascontiguousarray(w.reshape(1, -1))
    out = kernels.matmul(w2, a.array)

    def backward(g, needs):
        return (kernels.matmul(np.ascontiguousarray(w2.T), g),)

    return _make(out, a.tape, (a,), backward)


def concat_cols(mats: Sequence[Matrix]) -> Matrix:
    """Concatenate matrices left-to-right (same row count)."""
    if not mats:
        raise ValueError("concat_cols: empty input")
    _check_same_dtype(*mats)
    rows = mats[0].rows
    for m in mats:
        if m.rows != rows:
            raise ValueError(f"concat_cols: row mismatch {mats[0].shape} "
                             f"vs {m.shape}")
    out = np.concatenate([m.array for m in mats], axis=1)
    widths = [m.cols for m in mats]

    def backward(g, needs):
        grads, at = [], 0
        for w, need in zip(widths, needs):
            grads.append(np.ascontiguousarray(g[:, at:at + w]) if need else None)
            at += w
        return tuple(grads)

    return _make(out, _result_tape(mats), tuple(mats), backward)


def concat_rows(mats: Sequence[Matrix]) -> Matrix:
    """Stack matrices top-to-bottom (same column count)."""
    if not mats:
        raise ValueError("concat_rows: empty input")
    _check_same_dtype(*mats)
    cols = mats[0].cols
    for m in mats:
        if m.cols != cols:
            raise ValueError(f"concat_rows: column mismatch {mats[0].shape} "
                             f"vs {m.shape}")
    out = np.concatenate([m.array for m in mats], axis=0)
    heights = [m.rows for m in mats]

    def backward(g, needs):
        grads, at = [], 0
        for h, need in zip(heights, needs):
            grads.append(np.ascontiguousarray(g[at:at + h, :]) if need else None)
            at += h
        return tuple(grads)

    return _make(out, _result_tape(mats), tuple(mats), backward)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def grad(output: Matrix, wrt: Sequence[Matrix]) -> list[np.ndarray]:
    """Reverse-mode gradients of a recorded 1x1 output.

    Returns one array per entry of `wrt`, in order; a wrt matrix the
    output does not depend on gets a zero matrix. Accumulation follows
    the reverse of the recording order, so results are deterministic.
    """
    if output.shape != (1, 1):
        raise ValueError(f"grad: output must be 1x1, got {output.shape}")
    if output.tape is None:
        raise ValueError("grad: output is not recorded on a tape")
    tape = output.tape
    grads: dict[int, np.ndarray] = {
        id(output): np.ones((1, 1), dtype=output.dtype)
    }
    for out, parents, backward in reversed(tape._records):
        g = grads.get(id(out))
        if g is None:
            continue
        needs = tuple(p.tape is not None for p in parents)
        for parent, pg in zip(parents, backward(g, needs)):
            if pg is None or parent.tape is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return [grads.get(id(w), np.zeros_like(w.array)) for w in wrt]
