"""Metric-learning training loop.

Ground sequences are aggregated into descriptors, aerial features pass
through a pluggable embedder (identity by default), both sides are
L2-normalized, and a soft-margin triplet objective over every in-batch
anchor/positive/negative combination pushes matched pairs together.
Optimization is Adam with a plateau-then-linear-decay learning rate.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from seqgeo import autodiff as ad
from seqgeo.autodiff import Matrix, Tape
from seqgeo.rng import make_rng
from seqgeo.tfam import (BoundTfamParams, DropoutMask, TfamConfig, TfamParams,
                         sample_dropout_mask, tfam_forward)


@dataclass
class TrainConfig:
    gamma: float = 10.0
    batch_size: int = 24
    epochs: int = 50
    lr_start: float = 1e-5
    lr_end: float = 5e-7
    decay_start_epoch: int = 30
    weight_decay: float = 1e-6
    j_max_dropped: int = 6
    seed: int = 0
    dtype: str = "f32"
    decoupled_decay: bool = False
    max_steps: Optional[int] = None
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.lr_end > self.lr_start:
            raise ValueError(f"lr_end {self.lr_end} exceeds lr_start {self.lr_start}")
        if self.decay_start_epoch > self.epochs:
            raise ValueError(f"decay_start_epoch {self.decay_start_epoch} "
                             f"exceeds epochs {self.epochs}")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be f32 or f64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


@dataclass
class PairBatch:
    """Index-aligned matched pairs: ground[i] corresponds to aerial[i]."""

    ground: list[tuple[Matrix, DropoutMask]]
    aerial: list[np.ndarray]

    def __post_init__(self):
        if len(self.ground) != len(self.aerial):
            raise ValueError(f"batch sides differ: {len(self.ground)} ground "
                             f"vs {len(self.aerial)} aerial")

    def __len__(self) -> int:
        return len(self.ground)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """v / ||v||; zero vectors are rejected."""
    v = np.asarray(v)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("degenerate feature: zero vector cannot be normalized")
    return v / norm


def triplet_loss(d_pos: float, d_neg: float, gamma: float) -> float:
    """log(1 + e^(gamma * (d_pos - d_neg))), evaluated stably."""
    if d_pos < 0 or d_neg < 0:
        raise ValueError("distances must be non-negative")
    return float(np.logaddexp(0.0, gamma * (d_pos - d_neg)))


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant lr_start before decay_start_epoch, then linear to lr_end
    at the final epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.decay_start_epoch:
        return cfg.lr_start
    span = (cfg.epochs - 1) - cfg.decay_start_epoch
    if span <= 0:
        return cfg.lr_end
    frac = (epoch - cfg.decay_start_epoch) / span
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac


def pairwise_distance_graph(g: Matrix, a: Matrix) -> Matrix:
    """B x B Euclidean distances between unit rows of g and a.

    Both inputs must be row-normalized; uses d^2 = 2 - 2 g.a with the
    tiny negative roundoff clamped at zero.
    """
    sim = ad.matmul(g, a, tb=True)
    d2 = ad.add_scalar(ad.scale(sim, -2.0), 2.0)
    return ad.sqrt_elem(d2)


def exhaustive_triplet_loss_graph(ground: Matrix, aerial: Matrix,
                                  gamma: float) -> Matrix:
    """Mean soft-margin loss over all 2*B*(B-1) in-batch triplets.

    `ground`/`aerial` are B x D raw features (normalization happens
    here). Every ground row anchors against its matched aerial row and
    the B-1 unmatched ones; symmetrically for every aerial row.
    """
    b = ground.rows
    if b < 2:
        raise ValueError("no negatives available: batch must have >= 2 pairs")
    dtype = ground.dtype
    dist = pairwise_distance_graph(ad.normalize_rows(ground),
                                   ad.normalize_rows(aerial))
    eye = Matrix(np.eye(b, dtype=dtype), validate=False)
    ones = Matrix(np.ones((b, b), dtype=dtype), validate=False)
    diag = ad.mul(dist, eye)
    pos_by_row = ad.matmul(diag, ones)   # row i filled with d(g_i, a_i)
    pos_by_col = ad.matmul(ones, diag)   # column j filled with d(g_j, a_j)
    m_ground = ad.softplus_elem(ad.scale(ad.sub(pos_by_row, dist), gamma))
    m_aerial = ad.softplus_elem(ad.scale(ad.sub(pos_by_col, dist), gamma))
    offdiag = Matrix(np.ones((b, b), dtype=dtype) - np.eye(b, dtype=dtype),
                     validate=False)
    total = ad.sum_all(ad.mul(ad.add(m_ground, m_aerial), offdiag))
    return ad.scale(total, 1.0 / (2 * b * (b - 1)))


def exhaustive_batch_loss(batch: PairBatch, params: BoundTfamParams,
                          cfg: TfamConfig, gamma: float) -> Matrix:
    """Forward every pair through the aggregator and build the batch loss."""
    if len(batch) < 2:
        raise ValueError("no negatives available: batch must have >= 2 pairs")
    pooled = [tfam_forward(emb, mask, params, cfg)[1]
              for emb, mask in batch.ground]
    ground = ad.concat_rows(pooled)
    aerial = Matrix(np.stack([np.asarray(a).reshape(-1) for a in batch.aerial]),
                    validate=False)
    if aerial.dtype != ground.dtype:
        aerial = Matrix(aerial.array.astype(ground.dtype), validate=False)
    return exhaustive_triplet_loss_graph(ground, aerial, gamma)


@dataclass
class AdamState:
    """First/second-moment accumulators, one pair per weight matrix."""

    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def init(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              state: AdamState, t: int, lr: float,
              weight_decay: float = 0.0, decoupled: bool = False) -> None:
    """One in-place Adam update (t is the 1-based step count).

    Weight decay is coupled by default (added to the gradient);
    `decoupled` subtracts lr*wd*theta instead. A non-finite gradient
    refuses the whole step.
    """
    if t < 1:
        raise ValueError(f"step count must be >= 1, got {t}")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient: step refused")
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = g.astype(p.dtype, copy=False)
        if weight_decay and not decoupled:
            g = g + p.dtype.type(weight_decay) * p
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p -= (lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(p.dtype)
        if weight_decay and decoupled:
            p -= p.dtype.type(lr * weight_decay) * p


@dataclass
class PairDataset:
    """Matched training pairs: per-sequence T x D frame embeddings and
    the corresponding aerial feature vectors."""

    ground: np.ndarray  # (n, T, D)
    aerial: np.ndarray  # (n, D)
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.ground.ndim != 3 or self.aerial.ndim != 2:
            raise ValueError("ground must be (n, T, D) and aerial (n, D)")
        if self.ground.shape[0] != self.aerial.shape[0]:
            raise ValueError(f"pair counts differ: {self.ground.shape[0]} "
                             f"vs {self.aerial.shape[0]}")
        if self.ground.shape[2] != self.aerial.shape[1]:
            raise ValueError(f"feature widths differ: {self.ground.shape[2]} "
                             f"vs {self.aerial.shape[1]}")
        if not self.ids:
            self.ids = [f"p{i:06d}" for i in range(self.ground.shape[0])]

    def __len__(self) -> int:
        return self.ground.shape[0]


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    lr: float
    wall_ms: float

    def to_json_dict(self) -> dict:
        return asdict(self)


def train(dataset: PairDataset, model_cfg: TfamConfig, cfg: TrainConfig,
          params: TfamParams | None = None,
          out_dir: Optional[str] = None,
          forced_masks: Optional[list[DropoutMask]] = None,
          ) -> tuple[TfamParams, list[EpochMetrics]]:
    """Run the full loop: shuffled mini-batches, a fresh dropout mask per
    sequence per batch, Adam updates on an epoch-level schedule.

    Deterministic given cfg.seed. `forced_masks` (one per dataset index)
    replaces mask sampling — a test hook for isolating the dropout
    randomness. When `out_dir` is set, checkpoints and a metrics log are
    written there.
    """
    dtype = cfg.np_dtype
    if cfg.j_max_dropped >= model_cfg.seq_len:
        raise ValueError(f"max dropped count must satisfy 0 <= J < T, "
                         f"got J={cfg.j_max_dropped}, T={model_cfg.seq_len}")
    rng = make_rng(cfg.seed)
    if params is None:
        params = TfamParams.init(model_cfg, rng, dtype=dtype)
    else:
        params = params.astype(dtype)
    ground = dataset.ground.astype(dtype)
    aerial = dataset.aerial.astype(dtype)

    mats = params.matrices()
    state = AdamState.init(mats)
    t_model = model_cfg.seq_len
    metrics: list[EpochMetrics] = []
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(len(dataset))
        losses: list[float] = []
        for at in range(0, len(order), cfg.batch_size):
            idx = order[at:at + cfg.batch_size]
            if len(idx) < 2:
                continue  # a single pair has no in-batch negative
            tape = Tape()
            bound = params.bind(tape)
            gpairs = []
            for i in idx:
                if forced_masks is not None:
                    mask = forced_masks[int(i)]
                elif cfg.j_max_dropped > 0:
                    mask = sample_dropout_mask(t_model, cfg.j_max_dropped, rng)
                else:
                    mask = DropoutMask.full(t_model)
                gpairs.append((Matrix(ground[i], validate=False), mask))
            batch = PairBatch(ground=gpairs,
                              aerial=[aerial[i] for i in idx])
            loss = exhaustive_batch_loss(batch, bound, model_cfg, cfg.gamma)
            leaves = bound.all()
            grads = ad.grad(loss, leaves)
            step += 1
            adam_step(mats, grads, state, step, lr,
                      weight_decay=cfg.weight_decay,
                      decoupled=cfg.decoupled_decay)
            losses.append(loss.item())
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        wall_ms = (time.perf_counter() - started) * 1000.0
        metrics.append(EpochMetrics(epoch=epoch,
                                    mean_loss=float(np.mean(losses)) if losses else math.nan,
                                    lr=lr, wall_ms=wall_ms))
        if out_dir is not None:
            _write_progress(out_dir, params, model_cfg, cfg, step, epoch, metrics)
        if done:
            break
    return params, metrics


def _write_progress(out_dir: str, params: TfamParams, model_cfg: TfamConfig,
                    cfg: TrainConfig, step: int, epoch: int,
                    metrics: list[EpochMetrics]) -> None:
    # imported lazily: the serialization module depends on the config
    # types defined here
    from seqgeo import dataio
    import os

    os.makedirs(out_dir, exist_ok=True)
    last = epoch == cfg.epochs - 1
    periodic = cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0
    if last or periodic or (cfg.max_steps is not None and step >= cfg.max_steps):
        dataio.save_checkpoint(os.path.join(out_dir, "checkpoint.sgck"),
                               params, cfg, step)
    dataio.write_metrics_log(os.path.join(out_dir, "metrics.jsonl"), metrics)
