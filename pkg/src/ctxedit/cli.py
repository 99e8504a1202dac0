"""Operator entry point: train, sample, eval, pair, forge, serve.

Every run writes a manifest (config hash, seed, checkpoint id) into the
output directory so results can be reproduced.  All randomness funnels
through --seed; --threads caps the worker pools.  Exit code 0 means the
operation completed; failures print a one-line diagnostic.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

logger = logging.getLogger("ctxedit")


def _setup_logging() -> None:
    level = os.environ.get("CTXEDIT_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(message)s")


def _load_config(path) -> dict:
    if path is None:
        return {}
    doc = yaml.safe_load(Path(path).read_text())
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a key-value mapping")
    return doc


def _config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int, extra: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": _config_hash(config),
        "seed": seed,
        "argv": sys.argv[1:],
        **extra,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))


def _apply_threads(threads: int) -> None:
    import torch

    torch.set_num_threads(max(1, threads))


# -- subcommands ---------------------------------------------------------------


def cmd_train(args) -> int:
    from .diffusion import TrainConfig, run_stages
    from .model import LongContextTransformer, ModelConfig, load_checkpoint
    from .tasks import make_batch_fn

    config_doc = _load_config(args.config)
    _apply_threads(args.threads)
    train_doc = dict(config_doc.get("train", {}))
    if args.seed is not None:
        train_doc["seed"] = args.seed
    train_cfg = TrainConfig.from_dict(train_doc)

    if args.resume:
        model, manifest = load_checkpoint(args.resume)
        logger.info("resumed %s at step %d", args.resume, manifest["step"])
    else:
        model_cfg = ModelConfig.from_dict(config_doc.get("model", {}))
        model = LongContextTransformer(model_cfg)
    out_dir = Path(args.out)
    canvas = int(config_doc.get("canvas", 16))
    batch_fn = make_batch_fn(canvas=canvas, seed=train_cfg.seed)
    paths = run_stages(model, train_cfg, batch_fn, out_dir, log=logger.info)
    _write_manifest(
        out_dir,
        "train",
        {**config_doc, "train": train_doc},
        train_cfg.seed,
        {"checkpoints": [p.name for p in paths], "model_config_hash": model.config.hash()},
    )
    logger.info("wrote %d checkpoints to %s", len(paths), out_dir)
    return 0


def cmd_sample(args) -> int:
    from .cu import parse_lcu
    from .diffusion import NoiseSchedule, sample
    from .imageio import save_image
    from .model import load_checkpoint

    _apply_threads(args.threads)
    model, manifest = load_checkpoint(args.checkpoint)
    model.eval()
    lcu = parse_lcu(Path(args.lcu).read_bytes())
    image = sample(
        model,
        lcu,
        NoiseSchedule.cosine(args.timesteps),
        steps=args.steps,
        guidance_scale=args.guidance,
        seed=args.seed or 0,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / args.name
    save_image(out_path, image)
    _write_manifest(
        out_dir,
        "sample",
        {"checkpoint": str(args.checkpoint), "lcu": str(args.lcu)},
        args.seed or 0,
        {"checkpoint_id": manifest["config_hash"], "output": out_path.name},
    )
    logger.info("wrote %s", out_path)
    return 0


def cmd_eval(args) -> int:
    from .metrics import compare_directories

    report = compare_directories(args.pred_dir, args.ref_dir)
    out_path = Path(args.report)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_path)
    agg = report.aggregate()
    logger.info(
        "scored %d samples: l1=%.4f l2=%.4f cos=%.4f",
        len(report.rows), agg["l1"], agg["l2"], agg["embedding_similarity"],
    )
    return 0


def cmd_pair(args) -> int:
    from .pairing import (
        Band,
        FeatureRecord,
        harvest_all,
        load_features,
        two_turn_aggregate,
    )

    features = load_features(args.features)
    records = [FeatureRecord(item_id=i, feature=v) for i, v in enumerate(features)]
    band = Band(
        lo=args.band_lo,
        hi=args.band_hi,
        lo_inclusive=args.band_lo_inclusive,
        hi_inclusive=False,
    )
    clusters = two_turn_aggregate(
        records, k=args.k, seed=args.seed or 0, turn1_band=band, threads=args.threads
    )
    pairs = harvest_all(clusters)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cluster_path = out_dir / "clusters.txt"
    with open(cluster_path, "w") as fh:
        for c in clusters.clusters:
            members = " ".join(str(m) for m in c.members)
            fh.write(f"{c.cluster_id}\t{c.coarse_id}\t{c.turn1_id}\t{c.turn2_id}\t{members}\n")
    pair_path = out_dir / "pairs.txt"
    with open(pair_path, "w") as fh:
        for a, b in pairs:
            fh.write(f"{a}\t{b}\n")
    _write_manifest(
        out_dir,
        "pair",
        {"k": args.k, "band_lo": args.band_lo, "band_hi": args.band_hi},
        args.seed or 0,
        {"clusters": len(clusters.clusters), "pairs": len(pairs)},
    )
    logger.info("wrote %d clusters, %d pairs to %s", len(clusters.clusters), len(pairs), out_dir)
    return 0


def cmd_forge(args) -> int:
    from .cu import serialize_lcu
    from .imageio import save_image
    from .tasks import generate

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed or 0)
    for i in range(args.count):
        sample_seed = int(rng.integers(0, 2**31 - 1))
        sample = generate(args.kind, sample_seed, canvas=args.canvas)
        stem = f"{args.kind}_{i:04d}"
        (out_dir / f"{stem}.lcu.json").write_bytes(serialize_lcu(sample.lcu))
        save_image(out_dir / f"{stem}_target.png", sample.target_image)
    _write_manifest(
        out_dir, "forge", {"kind": args.kind, "count": args.count}, args.seed or 0, {}
    )
    logger.info("wrote %d %s samples to %s", args.count, args.kind, out_dir)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_app, service_from_checkpoint

    _apply_threads(args.threads)
    service = service_from_checkpoint(args.checkpoint, sample_steps=args.steps)
    static_dir = Path(args.static) if args.static else None
    app = build_app(service, static_dir=static_dir)
    logger.info("serving on %s:%d", args.host, args.port)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxedit",
        description="multi-turn instruction-guided image generation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML key-value config file")
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--threads", type=int, default=2, help="worker/compute threads")
        p.add_argument("--out", default="out", help="output directory")

    p_train = sub.add_parser("train", help="run the staged training curriculum")
    common(p_train)
    p_train.add_argument("--resume", default=None, help="checkpoint to continue from")
    p_train.set_defaults(fn=cmd_train)

    p_sample = sub.add_parser("sample", help="generate one image from an LCU file")
    common(p_sample)
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--lcu", required=True, help="LCU wire-format file")
    p_sample.add_argument("--steps", type=int, default=25)
    p_sample.add_argument("--timesteps", type=int, default=100)
    p_sample.add_argument("--guidance", type=float, default=1.0)
    p_sample.add_argument("--name", default="sample.png")
    p_sample.set_defaults(fn=cmd_sample)

    p_eval = sub.add_parser("eval", help="score prediction images against references")
    common(p_eval)
    p_eval.add_argument("--pred-dir", required=True)
    p_eval.add_argument("--ref-dir", required=True)
    p_eval.add_argument("--report", default="report.csv")
    p_eval.set_defaults(fn=cmd_eval)

    p_pair = sub.add_parser("pair", help="mine item pairs from a feature file")
    common(p_pair)
    p_pair.add_argument("--features", required=True, help="binary feature file")
    p_pair.add_argument("--k", type=int, required=True, help="coarse cluster count")
    p_pair.add_argument("--band-lo", type=float, default=None)
    p_pair.add_argument("--band-hi", type=float, default=None)
    p_pair.add_argument("--band-lo-inclusive", action="store_true")
    p_pair.set_defaults(fn=cmd_pair)

    p_forge = sub.add_parser("forge", help="dump procedural task samples")
    common(p_forge)
    p_forge.add_argument("--kind", required=True)
    p_forge.add_argument("--count", type=int, default=8)
    p_forge.add_argument("--canvas", type=int, default=16)
    p_forge.set_defaults(fn=cmd_forge)

    p_serve = sub.add_parser("serve", help="run the chat session service")
    common(p_serve)
    p_serve.add_argument("--checkpoint", required=True)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8321)
    p_serve.add_argument("--steps", type=int, default=25)
    p_serve.add_argument("--static", default=None, help="directory of UI assets to serve")
    p_serve.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # one-line diagnostic, non-zero exit
        logger.error("error: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
