#!/usr/bin/env python3
"""Compare the compiled kernel backend against the numpy fallback.

Times the primitive kernels on the matrix shapes the training loop
actually hits (attention over a 7-frame sequence), then a full
forward+backward training step. Run from a built tree:

    python3 benchmarks/bench_kernels.py [--repeats 2000]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from seqgeo import autodiff as ad
from seqgeo.autodiff import Matrix, Tape
from seqgeo.kernels import get_backend
from seqgeo.rng import make_rng
from seqgeo.tfam import DropoutMask, TfamConfig, TfamParams
from seqgeo.training import PairBatch, exhaustive_batch_loss


def time_us(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeats)
    return best * 1e6


def kernel_cases(impl, rng):
    a = rng.normal(size=(7, 32))
    w = rng.normal(size=(32, 8))
    k7 = rng.normal(size=(7, 8))
    logits = rng.normal(size=(7, 7))
    sm = impl.softmax_rows(logits)
    return {
        "matmul 7x32 @ 32x8": lambda: impl.matmul(a, w),
        "matmul 7x8 @ (7x8)^T": lambda: impl.matmul(k7, k7, tb=True),
        "softmax_rows 7x7": lambda: impl.softmax_rows(logits),
        "softmax_bwd 7x7": lambda: impl.softmax_rows_bwd(sm, logits),
        "add 7x32": lambda: impl.add(a, a),
        "scale_rows 7x32": lambda: impl.scale_rows(a, np.ones(7)),
        "normalize_rows 24x32": lambda: impl.normalize_rows(
            rng_cache["feat"]),
        "softplus 24x24": lambda: impl.softplus(rng_cache["sq"]),
    }


rng_cache = {}


def train_step_case(backend_name, rng):
    import os
    # rebuild the op table against the chosen backend
    from seqgeo import kernels
    impl = get_backend(backend_name)
    saved = {n: getattr(kernels, n) for n in dir(impl)
             if not n.startswith("_") and callable(getattr(impl, n, None))}

    def swap(to_impl):
        for name in saved:
            if hasattr(to_impl, name):
                setattr(kernels, name, getattr(to_impl, name))

    cfg = TfamConfig(seq_len=7, dim=32, n_heads=4, n_layers=2)
    params = TfamParams.init(cfg, rng)
    embs = [rng.normal(size=(7, 32)) for _ in range(24)]
    aerial = [rng.normal(size=32) for _ in range(24)]
    masks = [DropoutMask.full(7)] * 24

    def step():
        tape = Tape()
        bound = params.bind(tape)
        batch = PairBatch(ground=[(Matrix(e), m) for e, m in zip(embs, masks)],
                          aerial=aerial)
        loss = exhaustive_batch_loss(batch, bound, cfg, 10.0)
        ad.grad(loss, bound.all())

    return swap, step


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=2000)
    args = parser.parse_args()

    rng = make_rng(0)
    rng_cache["feat"] = rng.normal(size=(24, 32))
    rng_cache["sq"] = rng.normal(size=(24, 24))

    backends = {}
    for name in ("numpy", "cython"):
        try:
            backends[name] = get_backend(name)
        except ImportError:
            print(f"backend {name!r} unavailable, skipping")
    if len(backends) < 2:
        print("only one backend present; timing it alone")

    rows = {}
    for bname, impl in backends.items():
        for case, fn in kernel_cases(impl, make_rng(1)).items():
            rows.setdefault(case, {})[bname] = time_us(fn, args.repeats)

    width = max(len(c) for c in rows) + 2
    names = list(backends)
    header = "kernel".ljust(width) + "".join(n.rjust(12) for n in names)
    if len(names) == 2:
        header += "speedup".rjust(10)
    print(header)
    print("-" * len(header))
    for case, t in rows.items():
        line = case.ljust(width) + "".join(f"{t[n]:9.2f} us" for n in names)
        if len(names) == 2:
            line += f"{t[names[0]] / t[names[1]]:9.2f}x"
        print(line)

    # whole training step (forward + reverse pass, batch of 24)
    from seqgeo import kernels as kmod
    print()
    step_times = {}
    for bname, impl in backends.items():
        swap, step = train_step_case(bname, make_rng(2))
        swap(impl)
        step_times[bname] = time_us(step, max(10, args.repeats // 100)) / 1000
        swap(backends.get("cython", backends["numpy"]))
    line = "train step (B=24, D=32, 2 layers)".ljust(width)
    line += "".join(f"{step_times[n]:9.2f} ms" for n in names)
    if len(names) == 2:
        line += f"{step_times[names[0]] / step_times[names[1]]:9.2f}x"
    print(line)


if __name__ == "__main__":
    main()
