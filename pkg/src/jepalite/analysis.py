"""Post-training diagnostics: per-position loss maps and their checkerboard
score, loss-tail statistics, effective feature rank, linear probing of frozen
features, and PCA false-color feature visualization.

Everything here is read-only over model parameters and deterministic given
the passed-in RNG or seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb
from PIL import Image
from scipy import ndimage, stats

from .model import ModelBundle, attention_mask
from .packing import PackerConfig, pack
from .pipeline import PipelineConfig, RawImage, partition_windows, patchify, scale_image
from .training import training_forward

RANKME_EPS = 1e-7
CANONICAL_MAP_SIDE = 16


@dataclass
class LossRecord:
    """Per-token loss at one grid position under one mask draw."""

    sample_id: int
    row: int
    col: int
    loss: float
    mask_draw_id: int
    grid_h: int
    grid_w: int


@dataclass
class LossMap:
    """Mean per-position loss over mask draws; count 0 marks an empty cell."""

    mean: np.ndarray
    count: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.count.shape or self.mean.ndim != 2:
            raise ValueError("mean and count must be equal-shape 2-D grids")

    @property
    def has_empty_cells(self) -> bool:
        return bool((self.count == 0).any())


@dataclass
class TailStats:
    quantile_ratio: float
    excess_kurtosis: float
    degenerate: bool = False


@dataclass
class ProbeResult:
    layer: int
    accuracy: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must be in [0, 1], got {self.accuracy}")


def _snap_to_grid(img: RawImage, pipe_cfg: PipelineConfig) -> "np.ndarray":
    """Resize an image at scale 1 so both sides are patch multiples."""
    return scale_image(img, 1.0, pipe_cfg)


def collect_losses(
    bundle: ModelBundle,
    images: Sequence[RawImage],
    pipe_cfg: PipelineConfig,
    num_mask_draws: int,
    rng: np.random.Generator,
) -> list[LossRecord]:
    """Evaluate per-token losses under fresh random partitions.

    Each image is patchified once at its native (patch-snapped) resolution;
    every draw re-partitions it into context/target windows, runs the
    student/teacher/predictor composition without repetition or dropout, and
    records one loss per target token. Parameters are never touched.
    """
    records: list[LossRecord] = []
    with torch.no_grad():
        for img_i, img in enumerate(images):
            grid = patchify(_snap_to_grid(img, pipe_cfg), pipe_cfg.patch_size)
            for draw in range(num_mask_draws):
                c = rng.uniform(*pipe_cfg.capacity_range)
                sample = partition_windows(grid, c, pipe_cfg.window_size, rng, sample_id=1)
                cfg = PackerConfig(
                    batch_rows=1,
                    context_capacity=sample.n_context,
                    target_capacity=sample.n_target,
                )
                batch, leftover = pack([sample], cfg)
                assert not leftover
                _, per_token, _ = training_forward(
                    bundle, batch, 1, batch.ctx_sample_ids, batch.tgt_sample_ids
                )
                losses = per_token[0].numpy()
                for j, (r, col) in enumerate(sample.target_positions):
                    records.append(
                        LossRecord(
                            sample_id=img_i + 1,
                            row=int(r),
                            col=int(col),
                            loss=float(losses[j]),
                            mask_draw_id=draw,
                            grid_h=grid.grid_h,
                            grid_w=grid.grid_w,
                        )
                    )
    return records


def build_loss_map(records: Sequence[LossRecord], h_p: int, w_p: int) -> LossMap:
    """Per-cell mean of record losses on an h_p x w_p grid.

    All records must already live on that grid; aggregating across images
    with different grids goes through :func:`resample_loss_map` first.
    """
    total = np.zeros((h_p, w_p))
    count = np.zeros((h_p, w_p), dtype=np.int64)
    for rec in records:
        if (rec.grid_h, rec.grid_w) != (h_p, w_p):
            raise ValueError(
                f"record on grid {(rec.grid_h, rec.grid_w)} does not match map {(h_p, w_p)}"
            )
        total[rec.row, rec.col] += rec.loss
        count[rec.row, rec.col] += 1
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return LossMap(mean=mean, count=count)


def merge_loss_maps(a: LossMap, b: LossMap) -> LossMap:
    """Combine two maps over the same grid as if built from pooled records."""
    if a.mean.shape != b.mean.shape:
        raise ValueError("cannot merge maps of different shapes")
    count = a.count + b.count
    total = a.mean * a.count + b.mean * b.count
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return LossMap(mean=mean, count=count)


def resample_loss_map(map_: LossMap, h_out: int = CANONICAL_MAP_SIDE, w_out: int = CANONICAL_MAP_SIDE) -> LossMap:
    """Bilinearly resample a complete map onto a canonical grid."""
    if map_.has_empty_cells:
        raise ValueError("cannot resample a map with empty cells")
    h_in, w_in = map_.mean.shape
    rows = (np.arange(h_out) + 0.5) * h_in / h_out - 0.5
    cols = (np.arange(w_out) + 0.5) * w_in / w_out - 0.5
    coords = np.stack(np.meshgrid(rows, cols, indexing="ij"))
    mean = ndimage.map_coordinates(map_.mean, coords, order=1, mode="nearest")
    count = np.full((h_out, w_out), int(map_.count.sum()) // map_.count.size, dtype=np.int64)
    return LossMap(mean=mean, count=np.maximum(count, 1))


def aggregate_loss_maps(maps: Sequence[LossMap], h_out: int = CANONICAL_MAP_SIDE, w_out: int = CANONICAL_MAP_SIDE) -> LossMap:
    """Mean of per-image maps after resampling each to the canonical grid."""
    if not maps:
        raise ValueError("no maps to aggregate")
    resampled = [resample_loss_map(m, h_out, w_out) for m in maps]
    mean = np.mean([m.mean for m in resampled], axis=0)
    return LossMap(mean=mean, count=np.full((h_out, w_out), len(maps), dtype=np.int64))


def checkerboard_score(map_: LossMap) -> float:
    """Parity contrast of a loss map.

    |mean over cells with even row+col - mean over odd cells| divided by the
    population std of all cells (plus 1e-12). Constant maps score 0; a
    perfect unit-amplitude checkerboard scores 2.
    """
    if map_.has_empty_cells:
        raise ValueError("map has empty cells; collect more draws")
    values = map_.mean
    rows, cols = np.indices(values.shape)
    even = (rows + cols) % 2 == 0
    contrast = abs(values[even].mean() - values[~even].mean())
    return float(contrast / (values.std() + 1e-12))


def tail_stats(losses: np.ndarray, min_values: int = 1000) -> TailStats:
    """Heaviness of the loss distribution's right tail."""
    losses = np.asarray(losses, dtype=np.float64).ravel()
    if losses.size < min_values:
        raise ValueError(f"need at least {min_values} values, got {losses.size}")
    if np.all(losses == losses[0]):
        return TailStats(quantile_ratio=1.0, excess_kurtosis=0.0, degenerate=True)
    q50, q99 = np.quantile(losses, [0.5, 0.99])
    if q50 <= 0:
        raise ValueError("median loss is not positive; quantile ratio undefined")
    return TailStats(
        quantile_ratio=float(q99 / q50),
        excess_kurtosis=float(stats.kurtosis(losses, fisher=True, bias=True)),
    )


def rankme(features: np.ndarray) -> float:
    """Effective rank: exp of the entropy of normalized singular values."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {features.shape}")
    if not features.any():
        raise ValueError("all-zero features have no defined rank")
    sv = np.linalg.svd(features, compute_uv=False)
    p = sv / (sv.sum() + RANKME_EPS)
    nonzero = p[p > 0]
    return float(np.exp(-(nonzero * np.log(nonzero)).sum()))


def center_crop_square(img: RawImage, side: Optional[int] = None) -> RawImage:
    """Center-crop to a square, optionally resizing to ``side`` pixels."""
    h, w = img.height, img.width
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    out = img.pixels[top : top + s, left : left + s]
    if side is not None and side != s:
        out = np.asarray(Image.fromarray(out).resize((side, side), Image.BILINEAR), dtype=np.uint8)
    return RawImage(out)


def extract_layer_features(
    bundle: ModelBundle,
    images: Sequence[RawImage],
    pipe_cfg: PipelineConfig,
    resolution: Optional[int] = None,
) -> list[np.ndarray]:
    """Mean-pooled per-block teacher features for every image.

    Images are center-cropped square, resized if requested, encoded on the
    full patch grid (no partitioning), and each block's output is mean-pooled
    over tokens. The final post-processing stage is deliberately not applied.
    Returns one (n_images, d) array per encoder block.
    """
    per_layer: list[list[np.ndarray]] = []
    with torch.no_grad():
        for img in images:
            cropped = center_crop_square(img, resolution)
            grid = patchify(_snap_to_grid(cropped, pipe_cfg), pipe_cfg.patch_size)
            tokens = torch.from_numpy(grid.tokens[None])
            positions = torch.from_numpy(grid.positions[None])
            ids = torch.ones((1, tokens.shape[1]), dtype=torch.int64)
            _, hidden = bundle.teacher(tokens, positions, attention_mask(ids), collect_hidden=True)
            pooled = [h[0].mean(dim=0).numpy() for h in hidden]
            if not per_layer:
                per_layer = [[] for _ in pooled]
            for layer, vec in enumerate(pooled):
                per_layer[layer].append(vec)
    return [np.stack(vecs) for vecs in per_layer]


def linear_probe(
    features_per_layer: Sequence[np.ndarray],
    labels: np.ndarray,
    lr: float = 1e-3,
    epochs: int = 100,
    batch_size: int = 128,
    holdout_fraction: float = 0.2,
    seed: int = 0,
) -> list[ProbeResult]:
    """Train one linear softmax classifier per layer on frozen features.

    A deterministic split holds out ``holdout_fraction`` of the rows; each
    probe trains with Adam at a constant learning rate and reports top-1
    accuracy on the held-out rows.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    for layer, feats in enumerate(features_per_layer):
        if feats.shape[0] != n:
            raise ValueError(f"layer {layer} has {feats.shape[0]} rows for {n} labels")
    n_classes = int(labels.max()) + 1
    split_rng = np.random.default_rng(seed)
    order = split_rng.permutation(n)
    n_hold = max(1, int(round(holdout_fraction * n)))
    hold, train = order[:n_hold], order[n_hold:]
    y_train = torch.from_numpy(labels[train].astype(np.int64))
    y_hold = torch.from_numpy(labels[hold].astype(np.int64))

    results = []
    for layer, feats in enumerate(features_per_layer):
        x = torch.from_numpy(np.asarray(feats, dtype=np.float64))
        x_train, x_hold = x[train], x[hold]
        gen = torch.Generator().manual_seed(seed + layer)
        probe = torch.nn.Linear(x.shape[1], n_classes, dtype=torch.float64)
        with torch.no_grad():
            probe.weight.normal_(0.0, 0.01, generator=gen)
            probe.bias.zero_()
        opt = torch.optim.Adam(probe.parameters(), lr=lr)
        for _ in range(epochs):
            perm = torch.randperm(x_train.shape[0], generator=gen)
            for start in range(0, perm.shape[0], batch_size):
                idx = perm[start : start + batch_size]
                opt.zero_grad(set_to_none=True)
                loss = torch.nn.functional.cross_entropy(probe(x_train[idx]), y_train[idx])
                loss.backward()
                opt.step()
        with torch.no_grad():
            accuracy = float((probe(x_hold).argmax(dim=1) == y_hold).double().mean())
        results.append(ProbeResult(layer=layer, accuracy=accuracy))
    return results


def best_probe_layer(results: Sequence[ProbeResult]) -> ProbeResult:
    return max(results, key=lambda r: r.accuracy)


def pca_visualize(
    features: np.ndarray, target_resolution: tuple[int, int]
) -> tuple[np.ndarray, bool]:
    """False-color a feature grid via its top three PCA components.

    The (h, w, d) grid is blurred spatially (sigma = 1 cell), projected onto
    its top three principal components with a fixed sign convention (largest
    absolute loading entry positive), min-max rescaled per component, read as
    HSV, converted to RGB, and bilinearly upscaled. Returns (uint8 image of
    shape target_resolution + (3,), degenerate flag); constant feature grids
    come back uniform gray with the flag set.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[0] < 2 or features.shape[1] < 2:
        raise ValueError(f"need an (h, w, d) grid with h, w >= 2, got shape {features.shape}")
    h_out, w_out = target_resolution
    blurred = ndimage.gaussian_filter(features, sigma=(1.0, 1.0, 0.0))
    h, w, d = blurred.shape
    flat = blurred.reshape(h * w, d)
    centered = flat - flat.mean(axis=0)
    if np.allclose(centered, 0.0, atol=1e-12):
        gray = np.full((h_out, w_out, 3), 128, dtype=np.uint8)
        return gray, True
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    comps = np.zeros((h * w, 3))
    n_comp = min(3, vt.shape[0])
    for k in range(n_comp):
        load = vt[k]
        if load[np.argmax(np.abs(load))] < 0:
            load = -load
        comps[:, k] = centered @ load
    lo, hi = comps.min(axis=0), comps.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    unit = np.where(hi > lo, (comps - lo) / span, 0.5)
    rgb = hsv_to_rgb(unit.reshape(h, w, 3))
    img8 = np.round(rgb * 255.0).astype(np.uint8)
    out = Image.fromarray(img8).resize((w_out, h_out), Image.BILINEAR)
    return np.asarray(out, dtype=np.uint8), False
