"""Temporal feature aggregation over per-frame embeddings.

A stack of multi-head self-attention blocks turns a T x D matrix of
frame features into one D-vector: sinusoidal position codes are added
once to the input, each block projects to per-head query/key/value
subspaces, attends, concatenates the heads, and projects back to width
D; the final rows are averaged into the sequence descriptor.

Variable-length sequences are handled by a binary keep-mask. Two
masking modes exist:

* ``strict`` — dropped indices are removed from the computation: their
  attention-logit columns are set to -inf before the softmax, their
  output rows are zeroed (they do not act as queries), and pooling skips
  them. A dropped frame therefore cannot influence the result at all.
* ``paper_literal`` — key rows at dropped indices are zeroed instead,
  which makes the pre-softmax logit column exactly zero but still leaves
  the dropped index with nonzero post-softmax weight; kept for
  comparison with the strict mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from seqgeo import autodiff as ad
from seqgeo.autodiff import Matrix, Tape

MASKING_MODES = ("strict", "paper_literal")


@dataclass
class TfamConfig:
    seq_len: int = 7
    dim: int = 64
    n_heads: int = 8
    n_layers: int = 6
    masking_mode: str = "strict"
    residual: bool = False
    scale_per_head: bool = False

    def __post_init__(self):
        if self.seq_len < 1:
            raise ValueError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.n_heads < 1:
            raise ValueError(f"n_heads must be >= 1, got {self.n_heads}")
        if self.dim % self.n_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by "
                             f"n_heads {self.n_heads}")
        if self.masking_mode not in MASKING_MODES:
            raise ValueError(f"masking_mode must be one of {MASKING_MODES}, "
                             f"got {self.masking_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads


@dataclass(frozen=True)
class DropoutMask:
    """Length-T binary keep-mask; at least one bit must be set."""

    bits: tuple[int, ...]

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("mask bits must be 0 or 1")
        if sum(self.bits) == 0:
            raise ValueError("mask must keep at least one index")

    @classmethod
    def full(cls, t: int) -> "DropoutMask":
        return cls(bits=(1,) * t)

    @classmethod
    def drop_first(cls, t: int, n: int) -> "DropoutMask":
        """Mask with the first n indices dropped (tail kept)."""
        if n >= t:
            raise ValueError(f"cannot drop {n} of {t} frames")
        return cls(bits=(0,) * n + (1,) * (t - n))

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return np.asarray(self.bits, dtype=dtype)

    @property
    def n_kept(self) -> int:
        return sum(self.bits)


def sample_dropout_mask(t: int, j: int,
                        rng: np.random.Generator) -> DropoutMask:
    """Draw e uniformly from {0..j} and zero e distinct positions."""
    if not 0 <= j < t:
        raise ValueError(f"max dropped count must satisfy 0 <= J < T, "
                         f"got J={j}, T={t}")
    e = int(rng.integers(0, j + 1))
    bits = [1] * t
    for idx in rng.choice(t, size=e, replace=False):
        bits[int(idx)] = 0
    return DropoutMask(bits=tuple(bits))


def positional_encoding(t: int, d: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal position codes: sin on even columns, cos on odd ones."""
    if d % 2 != 0:
        raise ValueError(f"encoding width must be even, got {d}")
    pe = np.empty((t, d), dtype=dtype)
    pos = np.arange(t, dtype=np.float64)[:, None]
    div = np.power(10000.0, np.arange(0, d, 2, dtype=np.float64) / d)
    pe[:, 0::2] = np.sin(pos / div)
    pe[:, 1::2] = np.cos(pos / div)
    return pe


@dataclass
class TfamParams:
    """Trainable weights: per layer, per head W_q/W_k/W_v, plus W_o.

    Declaration order (layer 0 .. N-1; within a layer: all W_q by head,
    all W_k, all W_v, then W_o) is the canonical flattening used by the
    optimizer and the checkpoint format.
    """

    config: TfamConfig
    w_q: list[list[np.ndarray]] = field(default_factory=list)
    w_k: list[list[np.ndarray]] = field(default_factory=list)
    w_v: list[list[np.ndarray]] = field(default_factory=list)
    w_o: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def init(cls, config: TfamConfig, rng: np.random.Generator,
             dtype=np.float64) -> "TfamParams":
        """Xavier-normal initialization of every projection."""
        d, hd = config.dim, config.head_dim
        std_qkv = math.sqrt(2.0 / (d + hd))
        std_o = math.sqrt(2.0 / (d + d))
        p = cls(config=config)
        for _ in range(config.n_layers):
            p.w_q.append([rng.normal(0.0, std_qkv, (d, hd)).astype(dtype)
                          for _ in range(config.n_heads)])
            p.w_k.append([rng.normal(0.0, std_qkv, (d, hd)).astype(dtype)
                          for _ in range(config.n_heads)])
            p.w_v.append([rng.normal(0.0, std_qkv, (d, hd)).astype(dtype)
                          for _ in range(config.n_heads)])
            p.w_o.append(rng.normal(0.0, std_o, (d, d)).astype(dtype))
        return p

    def matrices(self) -> list[np.ndarray]:
        """All weights, flattened in declaration order."""
        out: list[np.ndarray] = []
        for layer in range(self.config.n_layers):
            out.extend(self.w_q[layer])
            out.extend(self.w_k[layer])
            out.extend(self.w_v[layer])
            out.append(self.w_o[layer])
        return out

    def replace_matrices(self, arrays: list[np.ndarray]) -> None:
        """Overwrite all weights from a declaration-order flat list."""
        expected = self.config.n_layers * (3 * self.config.n_heads + 1)
        if len(arrays) != expected:
            raise ValueError(f"expected {expected} weight matrices, "
                             f"got {len(arrays)}")
        it = iter(arrays)
        for layer in range(self.config.n_layers):
            self.w_q[layer] = [next(it) for _ in range(self.config.n_heads)]
            self.w_k[layer] = [next(it) for _ in range(self.config.n_heads)]
            self.w_v[layer] = [next(it) for _ in range(self.config.n_heads)]
            self.w_o[layer] = next(it)

    def astype(self, dtype) -> "TfamParams":
        out = TfamParams(config=self.config)
        out.w_q = [[w.astype(dtype) for w in layer] for layer in self.w_q]
        out.w_k = [[w.astype(dtype) for w in layer] for layer in self.w_k]
        out.w_v = [[w.astype(dtype) for w in layer] for layer in self.w_v]
        out.w_o = [w.astype(dtype) for w in self.w_o]
        return out

    def bind(self, tape: Tape | None) -> "BoundTfamParams":
        return BoundTfamParams(self, tape)


class BoundTfamParams:
    """Weights wrapped as engine matrices, shared across every forward
    pass of one training step so gradients of a batch accumulate onto
    one set of leaves."""

    def __init__(self, params: TfamParams, tape: Tape | None):
        wrap = (lambda a: tape.var(a)) if tape is not None \
            else (lambda a: Matrix(a, validate=False))
        self.config = params.config
        self.w_q = [[wrap(w) for w in layer] for layer in params.w_q]
        self.w_k = [[wrap(w) for w in layer] for layer in params.w_k]
        self.w_v = [[wrap(w) for w in layer] for layer in params.w_v]
        self.w_o = [wrap(w) for w in params.w_o]

    def all(self) -> list[Matrix]:
        """Flat leaf list in the canonical declaration order."""
        out: list[Matrix] = []
        for layer in range(self.config.n_layers):
            out.extend(self.w_q[layer])
            out.extend(self.w_k[layer])
            out.extend(self.w_v[layer])
            out.append(self.w_o[layer])
        return out


def tfam_forward(f_prime: Matrix, mask: DropoutMask, params: BoundTfamParams,
                 cfg: TfamConfig,
                 pos_encoding: np.ndarray | None = None) -> tuple[Matrix, Matrix]:
    """Run the full aggregation stack on one sequence.

    Returns (aggregated T x D rows, pooled 1 x D descriptor). Position
    codes are added once, before the first block; pass `pos_encoding`
    explicitly (e.g. zeros) to override the standard sinusoidal table.
    """
    t, d = cfg.seq_len, cfg.dim
    if f_prime.shape != (t, d):
        raise ValueError(f"embedding shape {f_prime.shape} does not match "
                         f"config ({t}, {d})")
    if len(mask.bits) != t:
        raise ValueError(f"mask length {len(mask.bits)} does not match "
                         f"seq_len {t}")
    dtype = f_prime.dtype
    if pos_encoding is None:
        pos_encoding = positional_encoding(t, d, dtype=dtype)
    pe = Matrix(pos_encoding.astype(dtype, copy=False), validate=False)

    maskvec = mask.as_array(dtype)
    strict = cfg.masking_mode == "strict"
    if strict:
        # -inf on dropped key columns: exact zero attention weight
        col_bias = np.where(maskvec > 0, 0.0, -np.inf)[None, :]
        bias = Matrix(np.repeat(col_bias, t, axis=0).astype(dtype),
                      validate=False)

    denom = cfg.head_dim if cfg.scale_per_head else d
    inv_sqrt_d = 1.0 / math.sqrt(denom)

    x = ad.add(f_prime, pe)
    for layer in range(cfg.n_layers):
        heads = []
        for h in range(cfg.n_heads):
            q = ad.matmul(x, params.w_q[layer][h])
            k = ad.matmul(x, params.w_k[layer][h])
            if not strict:
                k = ad.scale_rows(k, maskvec)
            v = ad.matmul(x, params.w_v[layer][h])
            logits = ad.scale(ad.matmul(q, k, tb=True), inv_sqrt_d)
            if strict:
                logits = ad.add(logits, bias)
            attn = ad.softmax_rows(logits)
            heads.append(ad.matmul(attn, v))
        out = ad.matmul(ad.concat_cols(heads), params.w_o[layer])
        if cfg.residual:
            out = ad.add(x, out)
        if strict:
            out = ad.scale_rows(out, maskvec)
        x = out

    pooled = ad.mean_rows(x, mask=maskvec)
    return x, pooled
