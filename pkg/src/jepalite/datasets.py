"""Dataset ingestion: a directory of images plus an ``index.csv`` listing
``path,label,shard`` rows. Images may be any raster format Pillow decodes
(PNG/JPEG) or a ``.jtns`` tensor container holding an H x W x 3 array of
byte values, which is handy for fixture-driven tests.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .pipeline import RawImage
from .tensorfile import read_tensors, write_tensors

INDEX_NAME = "index.csv"


@dataclass
class DatasetEntry:
    path: str
    label: Optional[int]
    shard: int


@dataclass
class Shard:
    shard_id: int
    entries: list[DatasetEntry]

    @property
    def sample_count(self) -> int:
        return len(self.entries)


@dataclass
class ShardIndex:
    """Shards in ascending shard-id order; entries keep index-file order."""

    root: str
    shards: list[Shard]

    def __post_init__(self):
        if not self.shards:
            raise ValueError("dataset has no shards")

    @property
    def size(self) -> int:
        return sum(s.sample_count for s in self.shards)

    def all_entries(self) -> list[DatasetEntry]:
        return [e for s in self.shards for e in s.entries]


def load_dataset_index(root: str | os.PathLike) -> ShardIndex:
    """Read ``index.csv`` under ``root`` and group entries by shard id."""
    root = Path(root)
    index_path = root / INDEX_NAME
    if not index_path.is_file():
        raise FileNotFoundError(f"no {INDEX_NAME} in {root}")
    by_shard: dict[int, list[DatasetEntry]] = {}
    with open(index_path, newline="") as f:
        for i, row in enumerate(csv.DictReader(f)):
            try:
                label = int(row["label"]) if row.get("label") else None
                shard = int(row["shard"])
                path = row["path"]
            except (KeyError, ValueError) as e:
                raise ValueError(f"{index_path}: bad row {i + 1}: {e}") from e
            by_shard.setdefault(shard, []).append(DatasetEntry(path=path, label=label, shard=shard))
    shards = [Shard(shard_id=sid, entries=by_shard[sid]) for sid in sorted(by_shard)]
    return ShardIndex(root=str(root), shards=shards)


def load_image(path: str | os.PathLike, root: str | os.PathLike = "") -> RawImage:
    """Load an 8-bit RGB image from a raster file or a ``.jtns`` container."""
    full = Path(root) / path if root else Path(path)
    if full.suffix == ".jtns":
        tensors = read_tensors(full)
        if "image" not in tensors:
            raise ValueError(f"{full}: tensor container has no 'image' entry")
        arr = tensors["image"]
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.min() < 0 or arr.max() > 255:
            raise ValueError(f"{full}: 'image' must be HxWx3 with values in [0, 255]")
        return RawImage(np.round(arr).astype(np.uint8))
    with Image.open(full) as im:
        return RawImage(np.asarray(im.convert("RGB"), dtype=np.uint8))


def save_image_tensor(path: str | os.PathLike, img: RawImage) -> None:
    """Write an image as a ``.jtns`` fixture."""
    write_tensors(path, {"image": img.pixels.astype(np.float64)})


# 10 well-separated base colors for the synthetic class fixtures
_PALETTE = np.array(
    [
        [220, 40, 40],
        [40, 200, 60],
        [50, 80, 230],
        [230, 210, 40],
        [200, 50, 210],
        [40, 210, 210],
        [240, 140, 30],
        [120, 70, 20],
        [160, 160, 160],
        [30, 30, 90],
    ],
    dtype=np.float64,
)


def synthetic_class_image(
    cls: int, rng: np.random.Generator, size: int = 32, upscale_to: int = 64
) -> RawImage:
    """One procedurally drawn image whose class shows in color and stripes."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = cls * np.pi / 10.0 + rng.uniform(-0.15, 0.15)
    period = 4.0 + (cls % 5) * 2.0
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period + phase)
    base = _PALETTE[cls % len(_PALETTE)]
    alt = _PALETTE[(cls + 3) % len(_PALETTE)]
    img = stripes[..., None] * base + (1 - stripes[..., None]) * 0.35 * alt
    img += rng.normal(0.0, 12.0, size=img.shape)
    img = np.clip(img, 0, 255).astype(np.uint8)
    if upscale_to != size:
        img = np.asarray(
            Image.fromarray(img).resize((upscale_to, upscale_to), Image.BILINEAR), dtype=np.uint8
        )
    return RawImage(img)


def make_synthetic_dataset(
    root: str | os.PathLike,
    n_images: int,
    n_classes: int = 10,
    n_shards: int = 4,
    size: int = 32,
    upscale_to: int = 64,
    seed: int = 0,
) -> ShardIndex:
    """Write a labeled synthetic dataset (PNGs plus index.csv) under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_images):
        cls = i % n_classes
        img = synthetic_class_image(cls, rng, size=size, upscale_to=upscale_to)
        name = f"img_{i:05d}.png"
        Image.fromarray(img.pixels).save(root / name)
        rows.append({"path": name, "label": cls, "shard": i % n_shards})
    with open(root / INDEX_NAME, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["path", "label", "shard"])
        writer.writeheader()
        writer.writerows(rows)
    return load_dataset_index(root)
