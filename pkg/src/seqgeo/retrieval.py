"""Gallery construction, exact nearest-neighbor search, and recall@K.

The gallery is small enough (<= 1e5 rows) that search is exhaustive and
exact: Euclidean distance over L2-normalized rows, ascending stable
sort, ties broken by insertion order.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from seqgeo.autodiff import Matrix
from seqgeo.tfam import DropoutMask, TfamConfig, TfamParams, tfam_forward
from seqgeo.training import PairDataset, l2_normalize


@dataclass
class RetrievalIndex:
    """Ordered gallery of unit feature rows with stable ids."""

    ids: list[str]
    features: np.ndarray  # (n, d) float64, rows normalized

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def build_index(aerial_features: list[tuple[str, np.ndarray]]) -> RetrievalIndex:
    """Normalize and store gallery vectors in input order."""
    if not aerial_features:
        raise ValueError("cannot build an empty index")
    ids = [str(i) for i, _ in aerial_features]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate gallery ids: {', '.join(dupes)}")
    rows = []
    for gid, vec in aerial_features:
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if rows and vec.shape != rows[0].shape:
            raise ValueError(f"gallery id {gid!r}: dim {vec.shape[0]} differs "
                             f"from {rows[0].shape[0]}")
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            raise ValueError(f"gallery id {gid!r}: zero vector")
        rows.append(vec / norm)
    return RetrievalIndex(ids=ids, features=np.vstack(rows))


def query_topk(index: RetrievalIndex, query: np.ndarray, k: int) -> list[str]:
    """Ids of the k nearest gallery rows (ascending distance, stable ties)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > len(index):
        warnings.warn(f"k={k} exceeds gallery size {len(index)}; clamping")
        k = len(index)
    q = l2_normalize(np.asarray(query, dtype=np.float64).reshape(-1))
    if q.shape[0] != index.dim:
        raise ValueError(f"query dim {q.shape[0]} != index dim {index.dim}")
    dist = np.linalg.norm(index.features - q[None, :], axis=1)
    order = np.argsort(dist, kind="stable")
    return [index.ids[i] for i in order[:k]]


@dataclass
class RecallReport:
    """Recall fractions at each requested K plus per-query ranks."""

    r_at: dict[int, float]
    k_for_1pct: int
    n_queries: int
    per_query_rank: list[int] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        ks = sorted(self.r_at)
        return {"Ks": ks, "recalls": [self.r_at[k] for k in ks],
                "k_1pct": self.k_for_1pct, "n_queries": self.n_queries}

    def write_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("K,recall\n")
            for k in sorted(self.r_at):
                fh.write(f"{k},{self.r_at[k]}\n")


def k_for_one_percent(n_gallery: int) -> int:
    """K used for the recall-at-1% metric: floor(N/100), at least 1."""
    return max(1, n_gallery // 100)


def recall_report(index: RetrievalIndex,
                  queries: list[tuple[np.ndarray, str]],
                  ks: list[int], include_1pct: bool = True) -> RecallReport:
    """Fraction of queries whose true id ranks within each K."""
    id_pos = {gid: i for i, gid in enumerate(index.ids)}
    for _, true_id in queries:
        if true_id not in id_pos:
            raise ValueError(f"true id {true_id!r} not present in the gallery")
    ks = sorted(set(int(k) for k in ks))
    k1 = k_for_one_percent(len(index))
    wanted = set(ks) | ({k1} if include_1pct else set())
    ranks: list[int] = []
    for vec, true_id in queries:
        q = l2_normalize(np.asarray(vec, dtype=np.float64).reshape(-1))
        dist = np.linalg.norm(index.features - q[None, :], axis=1)
        t = id_pos[true_id]
        dt = dist[t]
        # stable rank: strictly closer rows, plus equal rows inserted earlier
        rank = 1 + int(np.sum(dist < dt)) + int(np.sum(dist[:t] == dt))
        ranks.append(rank)
    ranks_arr = np.asarray(ranks)
    r_at = {k: float(np.mean(ranks_arr <= k)) for k in sorted(wanted)}
    return RecallReport(r_at=r_at, k_for_1pct=k1, n_queries=len(queries),
                        per_query_rank=ranks)


def sequence_descriptor(embedding: np.ndarray, mask: DropoutMask,
                        params: TfamParams, cfg: TfamConfig) -> np.ndarray:
    """Aggregate one T x D frame-embedding matrix into its descriptor."""
    bound = params.bind(None)
    _, pooled = tfam_forward(Matrix(embedding, dtype=embedding.dtype),
                             mask, bound, cfg)
    return pooled.array.reshape(-1)


def evaluate(params: TfamParams, cfg: TfamConfig, dataset: PairDataset,
             ks: list[int], drop_first: int = 0) -> RecallReport:
    """Retrieval evaluation of a model over a paired dataset.

    The gallery is the dataset's aerial side; each ground sequence
    queries it. `drop_first` zeroes the leading mask bits, mimicking a
    shorter sequence at test time.
    """
    t = cfg.seq_len
    if drop_first >= t:
        raise ValueError(f"cannot drop {drop_first} of {t} frames")
    mask = DropoutMask.drop_first(t, drop_first)
    index = build_index([(pid, dataset.aerial[i])
                         for i, pid in enumerate(dataset.ids)])
    dtype = np.float32 if params.w_o and params.w_o[0].dtype == np.float32 \
        else np.float64
    queries = []
    for i, pid in enumerate(dataset.ids):
        desc = sequence_descriptor(dataset.ground[i].astype(dtype), mask,
                                   params, cfg)
        queries.append((desc, pid))
    return recall_report(index, queries, ks)


def eval_variable_length(params: TfamParams, cfg: TfamConfig,
                         dataset: PairDataset, ks: list[int],
                         drop_counts: list[int]) -> dict[int, RecallReport]:
    """Recall under the leading-frame-drop protocol, one report per count."""
    return {n: evaluate(params, cfg, dataset, ks, drop_first=n)
            for n in drop_counts}
