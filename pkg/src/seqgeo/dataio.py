"""File formats, dataset loading, and the synthetic benchmark generator.

Formats owned here:

* tracks — JSON-lines, one frame per line:
  ``{"id", "lat", "lon", "heading", "image"?}``
* sequences — JSON-lines, one record per line:
  ``{"seq_id", "frame_ids", "frames", "tile"?}``
* embeddings (.sgeo) — binary: magic ``SGEO``, u32 version=1, u32 n_rows,
  u32 dim, u8 dtype (0 = f32), then n_rows*dim little-endian floats;
  a companion ``<path>.json`` manifest lists the row ids in order.
* checkpoints (.sgck) — magic ``SGCK``, u32 header length, a UTF-8 JSON
  header (model/train configs, format version, step), then all weight
  matrices as little-endian f32 in declaration order.
* run config — one flat JSON object whose keys mirror the TfamConfig /
  TrainConfig field names.

Floats in the JSON formats are written with repr-level precision, so a
write/read round trip is exact.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from seqgeo.geo import AerialTile, GeoFrame, SequenceRecord
from seqgeo.rng import make_rng
from seqgeo.tfam import TfamConfig, TfamParams
from seqgeo.training import EpochMetrics, PairDataset, TrainConfig

EMBEDDING_MAGIC = b"SGEO"
EMBEDDING_VERSION = 1
CHECKPOINT_MAGIC = b"SGCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIIB")


class ParseError(ValueError):
    """Malformed input file; message carries the file location."""


# ---------------------------------------------------------------------------
# tracks and sequences (JSON-lines)
# ---------------------------------------------------------------------------

def read_tracks(path: str | Path) -> list[GeoFrame]:
    """Read one ordered track; validates every line and rejects
    antimeridian-crossing tracks."""
    frames: list[GeoFrame] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("id", "lat", "lon", "heading"):
                if key not in obj:
                    raise ParseError(f"{path}:{lineno}: missing field {key!r}")
            try:
                frame = GeoFrame(id=str(obj["id"]), lat=float(obj["lat"]),
                                 lon=float(obj["lon"]),
                                 heading=float(obj["heading"]),
                                 image_path=obj.get("image"))
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if frame.id in seen:
                raise ParseError(f"{path}:{lineno}: duplicate frame id {frame.id!r}")
            seen.add(frame.id)
            if frames and abs(frame.lon - frames[-1].lon) > 180.0:
                raise ParseError(f"{path}:{lineno}: track crosses the "
                                 "antimeridian, which is unsupported")
            frames.append(frame)
    return frames


def write_tracks(path: str | Path, frames: Iterable[GeoFrame]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in frames:
            obj = {"id": f.id, "lat": f.lat, "lon": f.lon, "heading": f.heading}
            if f.image_path is not None:
                obj["image"] = f.image_path
            fh.write(json.dumps(obj) + "\n")


def _tile_to_json(tile: AerialTile) -> dict:
    return {"center_lat": tile.center_lat, "center_lon": tile.center_lon,
            "zoom": tile.zoom, "pixels": tile.pixels,
            "shift_east_m": tile.shift_east_m,
            "shift_north_m": tile.shift_north_m}


def _tile_from_json(obj: dict) -> AerialTile:
    return AerialTile(center_lat=float(obj["center_lat"]),
                      center_lon=float(obj["center_lon"]),
                      zoom=int(obj["zoom"]), pixels=int(obj["pixels"]),
                      shift_east_m=float(obj["shift_east_m"]),
                      shift_north_m=float(obj["shift_north_m"]))


def write_sequences(path: str | Path, records: Iterable[SequenceRecord]) -> None:
    """One record per line. Lines carry the frame id list plus the full
    frames (so downstream tile attachment needs no side lookup) and the
    tile descriptor when set."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "seq_id": rec.seq_id,
                "frame_ids": rec.frame_ids(),
                "frames": [{"id": f.id, "lat": f.lat, "lon": f.lon,
                            "heading": f.heading,
                            **({"image": f.image_path} if f.image_path else {})}
                           for f in rec.frames],
                "tile": _tile_to_json(rec.tile) if rec.tile is not None else None,
            }
            fh.write(json.dumps(obj) + "\n")


def read_sequences(path: str | Path) -> list[SequenceRecord]:
    records: list[SequenceRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                frames = [GeoFrame(id=str(f["id"]), lat=float(f["lat"]),
                                   lon=float(f["lon"]),
                                   heading=float(f["heading"]),
                                   image_path=f.get("image"))
                          for f in obj["frames"]]
                if obj["frame_ids"] != [f.id for f in frames]:
                    raise ValueError("frame_ids disagree with frames")
                tile = _tile_from_json(obj["tile"]) if obj.get("tile") else None
                records.append(SequenceRecord(seq_id=str(obj["seq_id"]),
                                              frames=frames, tile=tile))
            except (KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, ParseError):
                    raise
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# embedding files
# ---------------------------------------------------------------------------

def _manifest_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def write_embeddings(path: str | Path, matrix: np.ndarray,
                     ids: list[str]) -> None:
    """Write an f32 embedding file and its row-id manifest."""
    matrix = np.ascontiguousarray(matrix, dtype=np.float32)
    if matrix.ndim != 2:
        raise ValueError(f"embeddings must be 2-D, got shape {matrix.shape}")
    n_rows, dim = matrix.shape
    if len(ids) != n_rows:
        raise ValueError(f"{len(ids)} ids for {n_rows} rows")
    if len(set(ids)) != len(ids):
        raise ValueError("manifest ids must be unique")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION,
                              n_rows, dim, 0))
        fh.write(matrix.astype("<f4", copy=False).tobytes())
    with open(_manifest_path(path), "w", encoding="utf-8") as fh:
        json.dump({"ids": list(ids)}, fh)


def read_embeddings(path: str | Path) -> tuple[np.ndarray, list[str]]:
    """Read an embedding file; validates header, payload length, and the
    companion manifest."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ParseError(f"{path}: truncated header")
        magic, version, n_rows, dim, dtype_code = _HEADER.unpack(head)
        if magic != EMBEDDING_MAGIC:
            raise ParseError(f"{path}: bad magic {magic!r}")
        if version != EMBEDDING_VERSION:
            raise ParseError(f"{path}: unsupported version {version}")
        if dtype_code != 0:
            raise ParseError(f"{path}: unknown dtype code {dtype_code}")
        payload = fh.read()
    expected = n_rows * dim * 4
    if len(payload) != expected:
        raise ParseError(f"{path}: payload length mismatch "
                         f"({len(payload)} bytes, expected {expected})")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(n_rows, dim).copy()
    manifest = _manifest_path(path)
    if not manifest.exists():
        raise ParseError(f"{manifest}: manifest missing")
    with open(manifest, "r", encoding="utf-8") as fh:
        ids = json.load(fh).get("ids")
    if not isinstance(ids, list) or len(ids) != n_rows:
        raise ParseError(f"{manifest}: manifest does not cover all "
                         f"{n_rows} rows")
    if len(set(ids)) != len(ids):
        raise ParseError(f"{manifest}: duplicate ids in manifest")
    return matrix, [str(i) for i in ids]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: TfamParams, train_cfg: TrainConfig,
                    step: int) -> None:
    """Weights as little-endian f32 in declaration order after a JSON header."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "step": step,
        "model": dataclasses.asdict(params.config),
        "train": dataclasses.asdict(train_cfg),
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for w in params.matrices():
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[TfamParams, TrainConfig, int]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: bad magic")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version "
                             f"{header.get('format_version')}")
        model_cfg = TfamConfig(**header["model"])
        train_cfg = TrainConfig(**header["train"])
        params = TfamParams(config=model_cfg)
        d, hd = model_cfg.dim, model_cfg.head_dim
        for _ in range(model_cfg.n_layers):
            params.w_q.append([_read_matrix(fh, d, hd, path)
                               for _ in range(model_cfg.n_heads)])
            params.w_k.append([_read_matrix(fh, d, hd, path)
                               for _ in range(model_cfg.n_heads)])
            params.w_v.append([_read_matrix(fh, d, hd, path)
                               for _ in range(model_cfg.n_heads)])
            params.w_o.append(_read_matrix(fh, d, d, path))
        if fh.read(1):
            raise ParseError(f"{path}: trailing bytes after weights")
    return params, train_cfg, int(header["step"])


def _read_matrix(fh, rows: int, cols: int, path) -> np.ndarray:
    raw = fh.read(rows * cols * 4)
    if len(raw) != rows * cols * 4:
        raise ParseError(f"{path}: weight blob truncated")
    return np.frombuffer(raw, dtype="<f4").reshape(rows, cols).copy()


# ---------------------------------------------------------------------------
# metrics log and run config
# ---------------------------------------------------------------------------

def write_metrics_log(path: str | Path, metrics: list[EpochMetrics]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in metrics:
            fh.write(json.dumps(m.to_json_dict()) + "\n")


_MODEL_KEYS = {f.name for f in dataclasses.fields(TfamConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def load_run_config(path: str | Path) -> tuple[TfamConfig, TrainConfig]:
    """Parse the flat run-config JSON; every unknown key is reported."""
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ParseError(f"{path}: run config must be a JSON object")
    unknown = sorted(set(obj) - _MODEL_KEYS - _TRAIN_KEYS)
    if unknown:
        raise ParseError(f"{path}: unknown config keys: {', '.join(unknown)}")
    model = {k: v for k, v in obj.items() if k in _MODEL_KEYS}
    trainkw = {k: v for k, v in obj.items() if k in _TRAIN_KEYS}
    return TfamConfig(**model), TrainConfig(**trainkw)


# ---------------------------------------------------------------------------
# synthetic paired dataset
# ---------------------------------------------------------------------------

def _rotation_plan(rng, t: int, d: int, per_step: int,
                   max_angle: float) -> list[list[tuple[int, int, float, float]]]:
    """Cumulative per-frame rotations as Givens factor lists.

    Frame k's rotation extends frame k-1's by `per_step` extra plane
    rotations, so the viewpoint drifts gradually along the sequence.
    Givens products keep the generator free of BLAS/LAPACK calls, which
    keeps output bit-identical across platforms.
    """
    plan: list[list[tuple[int, int, float, float]]] = []
    factors: list[tuple[int, int, float, float]] = []
    for _ in range(t):
        for _ in range(per_step):
            i, j = rng.choice(d, size=2, replace=False)
            angle = rng.uniform(-max_angle, max_angle)
            factors.append((int(i), int(j), math.cos(angle), math.sin(angle)))
        plan.append(list(factors))
    return plan


def _apply_givens(rows: np.ndarray,
                  factors: list[tuple[int, int, float, float]]) -> np.ndarray:
    out = rows.copy()
    for i, j, c, s in factors:
        ci = c * out[:, i] - s * out[:, j]
        cj = s * out[:, i] + c * out[:, j]
        out[:, i] = ci
        out[:, j] = cj
    return out


def generate_synthetic(n_pairs: int, t: int, d: int, noise_sigma: float,
                       seed: int,
                       identity_rotations: bool = False) -> PairDataset:
    """Seeded stand-in for a real paired dataset.

    Aerial features are random unit vectors. Frame k of a ground
    sequence is its aerial vector taken through a fixed random rotation
    (one per frame position, shared by the whole dataset — a stand-in
    for viewpoint change along the sequence), plus isotropic noise of
    scale `noise_sigma`, renormalized.
    """
    if n_pairs < 2:
        raise ValueError(f"n_pairs must be >= 2, got {n_pairs}")
    rng = make_rng(seed)
    aerial = rng.normal(size=(n_pairs, d))
    aerial /= np.linalg.norm(aerial, axis=1, keepdims=True)
    if identity_rotations:
        plan = [[] for _ in range(t)]
    else:
        # strength tuned so plain mean-pooling of the frames stays well
        # above chance but clearly below a trained aggregator
        plan = _rotation_plan(rng, t, d, per_step=max(2, (5 * d) // 8),
                              max_angle=0.9)
    ground = np.empty((n_pairs, t, d))
    for k in range(t):
        frames = _apply_givens(aerial, plan[k])
        if noise_sigma > 0:
            frames = frames + noise_sigma * rng.normal(size=(n_pairs, d))
        ground[:, k, :] = frames / np.linalg.norm(frames, axis=1, keepdims=True)
    return PairDataset(ground=ground.astype(np.float32),
                       aerial=aerial.astype(np.float32))


def write_pair_dataset(out_dir: str | Path, dataset: PairDataset) -> tuple[Path, Path]:
    """Store a pair dataset as two embedding files (ground rows are the
    T frames of each pair in order)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n, t, d = dataset.ground.shape
    ground_path = out_dir / "ground.sgeo"
    aerial_path = out_dir / "aerial.sgeo"
    ground_ids = [f"{pid}/{k}" for pid in dataset.ids for k in range(t)]
    write_embeddings(ground_path, dataset.ground.reshape(n * t, d), ground_ids)
    write_embeddings(aerial_path, dataset.aerial, list(dataset.ids))
    return ground_path, aerial_path


def load_pair_dataset(ground_path: str | Path, aerial_path: str | Path,
                      t: int) -> PairDataset:
    """Inverse of write_pair_dataset; validates the id grouping."""
    ground_flat, ground_ids = read_embeddings(ground_path)
    aerial, aerial_ids = read_embeddings(aerial_path)
    if ground_flat.shape[0] != aerial.shape[0] * t:
        raise ParseError(f"{ground_path}: {ground_flat.shape[0]} rows do not "
                         f"form {aerial.shape[0]} sequences of length {t}")
    for i, pid in enumerate(aerial_ids):
        for k in range(t):
            expected = f"{pid}/{k}"
            got = ground_ids[i * t + k]
            if got != expected:
                raise ParseError(f"{ground_path}: row {i * t + k} id {got!r} "
                                 f"!= {expected!r}")
    n, d = aerial.shape
    return PairDataset(ground=ground_flat.reshape(n, t, d), aerial=aerial,
                       ids=list(aerial_ids))
