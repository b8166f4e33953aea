"""Command-line surface.

Subcommands cover the whole pipeline: segment tracks, attach tiles,
generate a synthetic paired dataset, train, evaluate recall, and answer
single queries. Every mutating command emits a run manifest
(<out>.manifest.json) with the config snapshot, seed, input digests,
and timestamps. Outputs are JSON by default; --table prints a
human-readable table where one exists.

Exit codes: 0 success, 1 domain error, 2 usage or I/O error.
Set SEQGEO_LOG=debug|info|warning|error to control log verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from seqgeo import dataio, geo, retrieval
from seqgeo.rng import make_rng
from seqgeo.tfam import TfamConfig
from seqgeo.training import TrainConfig, train

log = logging.getLogger("seqgeo")


@dataclasses.dataclass
class RunManifest:
    """Provenance record written next to every mutating command's output."""

    command: str
    config: dict
    seed: int | None
    git_describe: str
    input_digests: dict[str, str]
    started_at: str
    finished_at: str = ""

    def write(self, out_path: str | Path) -> None:
        path = Path(str(out_path) + ".manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _utcnow() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _manifest(command: str, config: dict, seed: int | None,
              inputs: list[str | Path]) -> RunManifest:
    return RunManifest(command=command, config=config, seed=seed,
                       git_describe=_git_describe(),
                       input_digests={str(p): _digest(p) for p in inputs},
                       started_at=_utcnow())


class DomainError(Exception):
    """Errors in the data itself (exit code 1)."""


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_segment(args) -> int:
    track = dataio.read_tracks(args.tracks)
    manifest = _manifest("segment", {"delta": args.delta, "min_len": args.min_len},
                         None, [args.tracks])
    records = geo.segment_track(track, delta=args.delta, min_len=args.min_len)
    dataio.write_sequences(args.out, records)
    manifest.finished_at = _utcnow()
    manifest.write(args.out)
    audit = _coverage_audit(records)
    if args.table:
        print(f"segments: {audit['count']}")
        print(f"mean length: {audit['mean_length']:.2f} frames")
        print(f"max extent: {audit['max_extent_m']:.1f} m")
    else:
        print(json.dumps(audit))
    return 0


def _coverage_audit(records) -> dict:
    extents = []
    for rec in records:
        head = rec.frames[0]
        extents.append(max(geo.haversine_distance(head.lat, head.lon, f.lat, f.lon)
                           for f in rec.frames))
    return {
        "count": len(records),
        "mean_length": float(np.mean([len(r.frames) for r in records])) if records else 0.0,
        "max_extent_m": float(max(extents)) if extents else 0.0,
        "mean_extent_m": float(np.mean(extents)) if extents else 0.0,
    }


def cmd_tiles(args) -> int:
    records = dataio.read_sequences(args.sequences)
    manifest = _manifest("tiles", {"zoom": args.zoom, "pixels": args.pixels,
                                   "max_shift": args.max_shift},
                         args.seed, [args.sequences])
    rng = make_rng(args.seed)
    outside = 0
    for rec in records:
        rec.tile = geo.make_tile(rec.frames, zoom=args.zoom, pixels=args.pixels,
                                 max_shift=args.max_shift, rng=rng)
        for f in rec.frames:
            inside, px, py = geo.frame_in_tile(f, rec.tile)
            if not inside:
                outside += 1
                log.warning("frame %s of %s falls outside its tile "
                            "(px=%.1f, py=%.1f)", f.id, rec.seq_id, px, py)
    dataio.write_sequences(args.out, records)
    manifest.finished_at = _utcnow()
    manifest.write(args.out)
    print(json.dumps({"sequences": len(records), "frames_outside_tile": outside}))
    return 0


def cmd_synth(args) -> int:
    dataset = dataio.generate_synthetic(n_pairs=args.n_pairs, t=args.t, d=args.d,
                                        noise_sigma=args.noise_sigma,
                                        seed=args.seed)
    manifest = _manifest("synth", {"n_pairs": args.n_pairs, "t": args.t,
                                   "d": args.d, "noise_sigma": args.noise_sigma},
                         args.seed, [])
    ground_path, aerial_path = dataio.write_pair_dataset(args.out_dir, dataset)
    manifest.finished_at = _utcnow()
    manifest.write(Path(args.out_dir) / "dataset")
    print(json.dumps({"ground": str(ground_path), "aerial": str(aerial_path),
                      "n_pairs": len(dataset)}))
    return 0


def _load_configs(args) -> tuple[TfamConfig, TrainConfig]:
    """Config file first, then per-flag overrides (flags win)."""
    if args.config:
        model_cfg, train_cfg = dataio.load_run_config(args.config)
    else:
        model_cfg, train_cfg = TfamConfig(), TrainConfig()
    overrides = {
        "seq_len": args.t, "dim": args.d, "n_heads": args.heads,
        "n_layers": args.layers, "masking_mode": args.masking,
    }
    model_kw = dataclasses.asdict(model_cfg)
    model_kw.update({k: v for k, v in overrides.items() if v is not None})
    train_over = {
        "gamma": args.gamma, "batch_size": args.batch_size,
        "epochs": args.epochs, "lr_start": args.lr_start,
        "lr_end": args.lr_end, "decay_start_epoch": args.decay_start_epoch,
        "weight_decay": args.weight_decay, "j_max_dropped": args.j,
        "seed": args.seed, "max_steps": args.max_steps,
    }
    train_kw = dataclasses.asdict(train_cfg)
    train_kw.update({k: v for k, v in train_over.items() if v is not None})
    try:
        return TfamConfig(**model_kw), TrainConfig(**train_kw)
    except ValueError as exc:
        raise DomainError(str(exc)) from exc


def cmd_train(args) -> int:
    model_cfg, train_cfg = _load_configs(args)
    dataset = dataio.load_pair_dataset(args.ground, args.aerial,
                                       t=model_cfg.seq_len)
    manifest = _manifest("train",
                         {"model": dataclasses.asdict(model_cfg),
                          "train": dataclasses.asdict(train_cfg)},
                         train_cfg.seed,
                         [args.ground, args.aerial] +
                         ([args.config] if args.config else []))
    os.makedirs(args.out_dir, exist_ok=True)
    params, metrics = train(dataset, model_cfg, train_cfg, out_dir=args.out_dir)
    manifest.finished_at = _utcnow()
    manifest.write(Path(args.out_dir) / "train")
    print(json.dumps({"checkpoint": str(Path(args.out_dir) / "checkpoint.sgck"),
                      "final_loss": metrics[-1].mean_loss,
                      "epochs": len(metrics)}))
    return 0


def cmd_eval(args) -> int:
    params, train_cfg, _step = dataio.load_checkpoint(args.checkpoint)
    model_cfg = params.config
    if args.masking is not None:
        model_cfg = dataclasses.replace(model_cfg, masking_mode=args.masking)
    dataset = dataio.load_pair_dataset(args.ground, args.aerial,
                                       t=model_cfg.seq_len)
    ks = [int(k) for k in args.ks.split(",")]
    if args.drop_first >= model_cfg.seq_len:
        raise DomainError(f"cannot drop {args.drop_first} of "
                          f"{model_cfg.seq_len} frames")
    manifest = _manifest("eval", {"ks": ks, "drop_first": args.drop_first,
                                  "masking": model_cfg.masking_mode},
                         train_cfg.seed,
                         [args.checkpoint, args.ground, args.aerial])
    report = retrieval.evaluate(params, model_cfg, dataset, ks,
                                drop_first=args.drop_first)
    report.write_json(args.out)
    if args.csv:
        report.write_csv(args.csv)
    manifest.finished_at = _utcnow()
    manifest.write(args.out)
    if args.table:
        _print_recall_table(report)
    else:
        print(json.dumps(report.to_json_dict()))
    return 0


def _print_recall_table(report) -> None:
    ks = sorted(report.r_at)
    header = " | ".join(f"R@{k}" for k in ks)
    values = " | ".join(f"{report.r_at[k] * 100:5.2f}%" for k in ks)
    print(header)
    print("-" * len(header))
    print(values)


def cmd_retrieve(args) -> int:
    params, _train_cfg, _step = dataio.load_checkpoint(args.checkpoint)
    model_cfg = params.config
    query, _ids = dataio.read_embeddings(args.query)
    if query.shape[0] != model_cfg.seq_len:
        raise DomainError(f"query has {query.shape[0]} frames, model expects "
                          f"{model_cfg.seq_len}")
    aerial, aerial_ids = dataio.read_embeddings(args.gallery)
    index = retrieval.build_index(list(zip(aerial_ids, aerial)))
    from seqgeo.tfam import DropoutMask
    mask = DropoutMask.drop_first(model_cfg.seq_len, args.drop_first)
    desc = retrieval.sequence_descriptor(query.astype(np.float32), mask,
                                         params, model_cfg)
    ranked = retrieval.query_topk(index, desc, args.k)
    print(json.dumps({"ranked_ids": ranked}))
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqgeo",
        description="Localize ground-image sequences against an aerial gallery.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="split a GPS track into tile-bounded sequences")
    p.add_argument("--tracks", required=True, help="input track (JSON-lines)")
    p.add_argument("--delta", type=float, default=50.0,
                   help="max distance to the segment head, meters")
    p.add_argument("--min-len", type=int, default=7, dest="min_len",
                   help="discard segments shorter than this")
    p.add_argument("--out", required=True, help="output sequences (JSON-lines)")
    p.add_argument("--table", action="store_true", help="human-readable audit")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("tiles", help="attach aerial tiles to sequences")
    p.add_argument("--sequences", required=True)
    p.add_argument("--zoom", type=int, default=20)
    p.add_argument("--pixels", type=int, default=640)
    p.add_argument("--max-shift", type=float, default=5.0, dest="max_shift",
                   help="max random center shift, meters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tiles)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--n-pairs", type=int, required=True, dest="n_pairs")
    p.add_argument("--t", type=int, default=7, help="frames per sequence")
    p.add_argument("--d", type=int, default=32, help="feature width")
    p.add_argument("--noise-sigma", type=float, default=0.3, dest="noise_sigma")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the aggregation model")
    p.add_argument("--ground", required=True, help="ground embeddings (.sgeo)")
    p.add_argument("--aerial", required=True, help="aerial embeddings (.sgeo)")
    p.add_argument("--config", help="flat JSON run config")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    for flag, kw in [("--t", dict(type=int)), ("--d", dict(type=int)),
                     ("--heads", dict(type=int)), ("--layers", dict(type=int)),
                     ("--masking", dict(choices=["strict", "paper_literal"])),
                     ("--gamma", dict(type=float)),
                     ("--batch-size", dict(type=int, dest="batch_size")),
                     ("--epochs", dict(type=int)),
                     ("--lr-start", dict(type=float, dest="lr_start")),
                     ("--lr-end", dict(type=float, dest="lr_end")),
                     ("--decay-start-epoch", dict(type=int, dest="decay_start_epoch")),
                     ("--weight-decay", dict(type=float, dest="weight_decay")),
                     ("--j", dict(type=int)), ("--seed", dict(type=int)),
                     ("--max-steps", dict(type=int, dest="max_steps"))]:
        p.add_argument(flag, **kw)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recall@K evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ground", required=True)
    p.add_argument("--aerial", required=True)
    p.add_argument("--ks", default="1,5,10", help="comma-separated K values")
    p.add_argument("--drop-first", type=int, default=0, dest="drop_first",
                   help="evaluate with the first N frames dropped")
    p.add_argument("--masking", choices=["strict", "paper_literal"])
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", help="optional CSV of (K, recall) rows")
    p.add_argument("--table", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="rank the gallery for one query sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True, help="query embeddings (.sgeo, T rows)")
    p.add_argument("--gallery", required=True, help="aerial embeddings (.sgeo)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--drop-first", type=int, default=0, dest="drop_first")
    p.set_defaults(func=cmd_retrieve)

    return parser


def main(argv: list[str] | None = None) -> int:
    level = getattr(logging, os.environ.get("SEQGEO_LOG", "warning").upper(),
                    logging.WARNING)
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (dataio.ParseError, FileNotFoundError, IsADirectoryError,
            PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DomainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
