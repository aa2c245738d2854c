"""Command-line front end.

Subcommands: pretrain, loss-map, probe, visualize, pack-bench. Exit codes:
0 on success, 1 for configuration problems (bad flags, bad config file), 2
for runtime faults (missing checkpoints, shape mismatches, IO errors).
Every artifact gets a ``<name>.meta.json`` sidecar holding the resolved
config hash and seed so outputs can be traced back to their run.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import re
import sys
from pathlib import Path
from typing import Optional

import matplotlib
import numpy as np

from .analysis import (
    LossMap,
    aggregate_loss_maps,
    best_probe_layer,
    build_loss_map,
    checkerboard_score,
    collect_losses,
    extract_layer_features,
    linear_probe,
    pca_visualize,
    rankme,
    tail_stats,
)
from .config import ConfigError, RunConfig, config_hash, load_run_config
from .datasets import load_dataset_index, load_image
from .model import POSTPROC_MODES, attention_mask
from .packing import PackerConfig, PackingStream, occupancy
from .pipeline import PatchedSample, patchify, scale_image, stream_rng
from .training import (
    STREAM_ANALYSIS,
    checkpoint_load,
    latest_checkpoint,
    run_training,
)

OUTPUT_DIR_ENV = "JEPALITE_OUTPUT_DIR"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with the config-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="YAML run configuration file")
    sp.add_argument("--output-dir", help="artifact directory (beats config and env)")
    sp.add_argument("--seed", type=int, help="root RNG seed override")
    sp.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, e.g. --set model.hidden_dim=32",
    )


def _build_parser() -> _Parser:
    p = _Parser(prog="jepalite", description="Masked patch-prediction pretraining toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("pretrain", help="run the training loop")
    _add_common(pre)
    pre.add_argument("--resume", action="store_true", help="continue from the newest checkpoint")
    pre.add_argument("--postproc", choices=POSTPROC_MODES, help="feature post-processing mode")
    pre.add_argument("--max-steps", type=int)
    pre.add_argument("--max-epochs", type=float)
    pre.add_argument("--workers", type=int)
    pre.set_defaults(handler=_cmd_pretrain)

    lm = sub.add_parser("loss-map", help="per-position loss map and tail diagnostics")
    _add_common(lm)
    lm.add_argument("--checkpoint", help="checkpoint path (default: newest in output dir)")
    lm.add_argument("--images", type=int, default=8, help="number of held-out images")
    lm.add_argument("--draws", type=int, default=100, help="mask draws per image")
    lm.set_defaults(handler=_cmd_loss_map)

    pr = sub.add_parser("probe", help="linear-probe frozen features per layer")
    _add_common(pr)
    pr.add_argument("--checkpoint")
    pr.add_argument("--images", type=int, help="cap on probed images (default: all)")
    pr.add_argument("--layers", default="all", help="'all' or comma-separated layer indices")
    pr.add_argument("--epochs", type=int, default=100)
    pr.set_defaults(handler=_cmd_probe)

    vz = sub.add_parser("visualize", help="PCA false-color image of one feature grid")
    _add_common(vz)
    vz.add_argument("--checkpoint")
    vz.add_argument("--image-index", type=int, default=0)
    vz.add_argument("--layer", type=int, help="encoder block index (default: third from last)")
    vz.add_argument("--resolution", type=int, default=256)
    vz.set_defaults(handler=_cmd_visualize)

    pb = sub.add_parser("pack-bench", help="packing occupancy benchmark on synthetic sizes")
    pb.add_argument("--dist", default="ctx:4..8,tgt:8..24", help="size ranges, e.g. ctx:4..8,tgt:8..24")
    pb.add_argument("--samples", type=int, default=1000)
    pb.add_argument("--rows", type=int, default=8)
    pb.add_argument("--ctx-capacity", type=int, default=64)
    pb.add_argument("--tgt-capacity", type=int, default=192)
    pb.add_argument("--seed", type=int, default=0)
    pb.add_argument("--output-dir")
    pb.set_defaults(handler=_cmd_pack_bench)

    return p


def _resolve_config(args, require_dataset: bool = True) -> RunConfig:
    overrides: dict[str, str] = {}
    env_dir = os.environ.get(OUTPUT_DIR_ENV)
    if env_dir:
        overrides["output_dir"] = env_dir
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    if getattr(args, "postproc", None):
        overrides["model.postproc_mode"] = args.postproc
    if getattr(args, "max_steps", None) is not None:
        overrides["max_steps"] = str(args.max_steps)
    if getattr(args, "max_epochs", None) is not None:
        overrides["max_epochs"] = str(args.max_epochs)
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = str(args.workers)
    return load_run_config(args.config, overrides, require_dataset=require_dataset)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_sidecar(artifact: Path, cfg_hash: str, seed: int, **extra) -> None:
    meta = {"config_hash": cfg_hash, "seed": seed, **extra}
    Path(str(artifact) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _load_state(args, cfg: RunConfig):
    path = Path(args.checkpoint) if args.checkpoint else latest_checkpoint(cfg.output_dir)
    if path is None or not Path(path).is_file():
        raise FileNotFoundError(
            f"no checkpoint found (looked for {args.checkpoint or 'ckpt_*.jtns in ' + cfg.output_dir})"
        )
    return checkpoint_load(path, cfg.model, cfg.train), Path(path)


def _eval_images(cfg: RunConfig, cap: Optional[int]):
    index = load_dataset_index(cfg.dataset)
    entries = index.all_entries()
    if cap is not None:
        entries = entries[:cap]
    images = [load_image(e.path, index.root) for e in entries]
    return entries, images


def _save_heatmap(map_: LossMap, path: Path, upscale: int = 16) -> None:
    vals = map_.mean
    lo, hi = float(vals.min()), float(vals.max())
    unit = (vals - lo) / (hi - lo) if hi > lo else np.full_like(vals, 0.5)
    rgb = (matplotlib.colormaps["viridis"](unit)[..., :3] * 255).round().astype(np.uint8)
    from PIL import Image

    h, w = rgb.shape[:2]
    Image.fromarray(rgb).resize((w * upscale, h * upscale), Image.NEAREST).save(path)


def _cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    if cfg.max_steps is None and cfg.max_epochs is None:
        raise ConfigError("max_steps or max_epochs: one stopping budget is required")
    index = load_dataset_index(cfg.dataset)
    out = _out_dir(cfg)
    state = run_training(
        index,
        cfg.pipeline,
        cfg.packer,
        cfg.model,
        cfg.train,
        out,
        max_steps=cfg.max_steps,
        max_epochs=cfg.max_epochs,
        checkpoint_every=cfg.checkpoint_every,
        workers=cfg.workers,
        resume=args.resume,
    )
    _write_sidecar(out / "metrics.csv", config_hash(cfg), cfg.seed, final_step=state.step)
    print(f"finished at step {state.step} ({state.samples_consumed} samples); artifacts in {out}")
    return EXIT_OK


def _cmd_loss_map(args) -> int:
    cfg = _resolve_config(args)
    state, ckpt = _load_state(args, cfg)
    entries, images = _eval_images(cfg, args.images)
    rng = stream_rng(cfg.seed, STREAM_ANALYSIS)
    records = collect_losses(state.bundle, images, cfg.pipeline, args.draws, rng)

    per_image = {}
    for rec in records:
        per_image.setdefault((rec.sample_id, rec.grid_h, rec.grid_w), []).append(rec)
    maps = [build_loss_map(recs, gh, gw) for (_, gh, gw), recs in sorted(per_image.items())]
    canonical = aggregate_loss_maps(maps)
    score = checkerboard_score(canonical)
    losses = np.array([r.loss for r in records])
    tails = tail_stats(losses) if losses.size >= 1000 else None
    feats = extract_layer_features(state.bundle, images, cfg.pipeline)
    rank = rankme(feats[-1])

    out = _out_dir(cfg)
    chash = config_hash(cfg)
    _save_heatmap(canonical, out / "loss_map.png")
    _write_sidecar(out / "loss_map.png", chash, cfg.seed, checkpoint=str(ckpt), draws=args.draws)
    with open(out / "loss_map.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "col", "mean_loss", "count"])
        for (r, c), v in np.ndenumerate(canonical.mean):
            w.writerow([r, c, repr(float(v)), int(canonical.count[r, c])])
    _write_sidecar(out / "loss_map.csv", chash, cfg.seed, checkpoint=str(ckpt))
    with open(out / "scores.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["checkerboard_score", repr(score)])
        w.writerow(["q99_over_q50", repr(tails.quantile_ratio) if tails else ""])
        w.writerow(["excess_kurtosis", repr(tails.excess_kurtosis) if tails else ""])
        w.writerow(["rankme_last_layer", repr(rank)])
    _write_sidecar(
        out / "scores.csv", chash, cfg.seed, checkpoint=str(ckpt),
        tail_stats_computed=tails is not None, n_records=len(records),
    )
    print(f"checkerboard score {score:.4f}, rankme {rank:.2f}; artifacts in {out}")
    return EXIT_OK


def _cmd_probe(args) -> int:
    cfg = _resolve_config(args)
    state, ckpt = _load_state(args, cfg)
    entries, images = _eval_images(cfg, args.images)
    labels = np.array([-1 if e.label is None else e.label for e in entries])
    if (labels < 0).any():
        raise ValueError("probe needs labels for every image in the index")
    feats = extract_layer_features(state.bundle, images, cfg.pipeline)
    if args.layers == "all":
        chosen = list(range(len(feats)))
    else:
        chosen = [int(tok) for tok in args.layers.split(",")]
        bad = [i for i in chosen if not 0 <= i < len(feats)]
        if bad:
            raise ValueError(f"layer indices {bad} out of range 0..{len(feats) - 1}")
    results = linear_probe([feats[i] for i in chosen], labels, epochs=args.epochs, seed=cfg.seed)
    for res, layer in zip(results, chosen):
        res.layer = layer
    best = best_probe_layer(results)

    out = _out_dir(cfg)
    with open(out / "probe.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "accuracy", "is_best"])
        for res in results:
            w.writerow([res.layer, repr(res.accuracy), int(res is best)])
    _write_sidecar(
        out / "probe.csv", config_hash(cfg), cfg.seed,
        checkpoint=str(ckpt), epochs=args.epochs, n_images=len(images),
    )
    print(f"best layer {best.layer}: top-1 {best.accuracy:.3f}; artifacts in {out}")
    return EXIT_OK


def _cmd_visualize(args) -> int:
    import torch

    cfg = _resolve_config(args)
    state, ckpt = _load_state(args, cfg)
    index = load_dataset_index(cfg.dataset)
    entries = index.all_entries()
    if not 0 <= args.image_index < len(entries):
        raise ValueError(f"--image-index {args.image_index} out of range 0..{len(entries) - 1}")
    img = load_image(entries[args.image_index].path, index.root)

    grid = patchify(scale_image(img, 1.0, cfg.pipeline), cfg.pipeline.patch_size)
    tokens = torch.from_numpy(grid.tokens[None])
    positions = torch.from_numpy(grid.positions[None])
    ids = torch.ones((1, tokens.shape[1]), dtype=torch.int64)
    with torch.no_grad():
        _, hidden = state.bundle.teacher(tokens, positions, attention_mask(ids), collect_hidden=True)
    layer = args.layer if args.layer is not None else max(0, len(hidden) - 3)
    if not 0 <= layer < len(hidden):
        raise ValueError(f"--layer {layer} out of range 0..{len(hidden) - 1}")
    feat_grid = hidden[layer][0].numpy().reshape(grid.grid_h, grid.grid_w, -1)
    rgb, degenerate = pca_visualize(feat_grid, (args.resolution, args.resolution))

    out = _out_dir(cfg)
    from PIL import Image

    path = out / "feature_map.png"
    Image.fromarray(rgb).save(path)
    _write_sidecar(
        path, config_hash(cfg), cfg.seed, checkpoint=str(ckpt),
        layer=layer, image_index=args.image_index, degenerate=degenerate,
    )
    print(f"feature visualization (layer {layer}) written to {path}")
    return EXIT_OK


_DIST_RE = re.compile(r"^ctx:(\d+)\.\.(\d+),tgt:(\d+)\.\.(\d+)$")


def _cmd_pack_bench(args) -> int:
    m = _DIST_RE.match(args.dist)
    if m is None:
        raise ConfigError(f"--dist must look like 'ctx:4..8,tgt:8..24', got {args.dist!r}")
    ctx_lo, ctx_hi, tgt_lo, tgt_hi = (int(g) for g in m.groups())
    if ctx_lo > ctx_hi or tgt_lo > tgt_hi:
        raise ConfigError("--dist ranges must be nondecreasing")
    pcfg = PackerConfig(
        batch_rows=args.rows, context_capacity=args.ctx_capacity, target_capacity=args.tgt_capacity
    )
    if ctx_hi > pcfg.context_capacity or tgt_hi > pcfg.target_capacity:
        raise ConfigError("--dist upper bounds exceed the configured capacities")

    rng = np.random.default_rng(args.seed)
    stream = PackingStream(pcfg)
    rows = []
    for i in range(args.samples):
        n = int(rng.integers(ctx_lo, ctx_hi + 1))
        m_ = int(rng.integers(tgt_lo, tgt_hi + 1))
        sample = PatchedSample(
            context_tokens=np.zeros((n, 4)),
            context_positions=np.zeros((n, 2), dtype=np.int64),
            target_tokens=np.zeros((m_, 4)),
            target_positions=np.zeros((m_, 2), dtype=np.int64),
            grid_h=1,
            grid_w=1,
            sample_id=i + 1,
        )
        batch = stream.feed(sample)
        if batch is not None:
            rows.append(occupancy(batch))
    final = stream.flush()
    if final is not None:
        rows.append(occupancy(final))

    out = Path(args.output_dir or os.environ.get(OUTPUT_DIR_ENV) or "out")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "pack_bench.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["batch", "occupancy_ctx", "occupancy_tgt"])
        for i, (oc, ot) in enumerate(rows):
            w.writerow([i, repr(oc), repr(ot)])
    params = {
        "dist": args.dist, "samples": args.samples, "rows": args.rows,
        "ctx_capacity": args.ctx_capacity, "tgt_capacity": args.tgt_capacity,
    }
    phash = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:12]
    _write_sidecar(path, phash, args.seed, **params)
    if rows:
        mean_ctx = sum(r[0] for r in rows) / len(rows)
        mean_tgt = sum(r[1] for r in rows) / len(rows)
        print(f"{len(rows)} batches, mean occupancy ctx {mean_ctx:.3f} tgt {mean_tgt:.3f}; CSV at {path}")
    else:
        print(f"no batches emitted; CSV at {path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit:
        raise
    except Exception as e:  # runtime fault: missing files, dim mismatches, ...
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
