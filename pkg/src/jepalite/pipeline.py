"""Image-to-token pipeline: dynamic resolution scaling, patch extraction,
and context/target window partitioning.

All functions are pure given an explicit numpy Generator, so many pipeline
workers can run in parallel as long as each owns its own RNG stream (use
``stream_rng`` keyed by sample index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image


class RejectedSampleError(Exception):
    """Raised when an image cannot be scaled into a valid patch grid."""


def stream_rng(seed: int, *stream_ids: int) -> np.random.Generator:
    """Derive an independent, reproducible RNG stream from a root seed.

    Stream ids are folded into the seed material, so e.g. pipeline worker k
    processing global sample i uses ``stream_rng(seed, STREAM_PIPELINE, i)``
    and gets the same draws no matter which worker runs it.
    """
    return np.random.default_rng([seed, *stream_ids])


@dataclass
class RawImage:
    """8-bit RGB image, row-major HWC."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels)
        if self.pixels.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8, got {self.pixels.dtype}")
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be HxWx3, got shape {self.pixels.shape}")
        if self.height < 1 or self.width < 1:
            raise ValueError("image must be at least 1x1")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class PipelineConfig:
    """Knobs for the scale/patchify/partition pipeline."""

    patch_size: int = 16
    min_side: int = 64
    scale_range: tuple[float, float] = (0.1, 1.0)
    capacity_range: tuple[float, float] = (0.25, 0.5)
    window_size: int = 2

    def __post_init__(self):
        s_lo, s_hi = self.scale_range
        c_lo, c_hi = self.capacity_range
        if not (0 < s_lo <= s_hi <= 1):
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi <= 1, got {self.scale_range}")
        if not (0 < c_lo <= c_hi < 1):
            raise ValueError(f"capacity_range must satisfy 0 < lo <= hi < 1, got {self.capacity_range}")
        if self.min_side < self.patch_size:
            raise ValueError("min_side must be >= patch_size")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")


@dataclass
class PatchGrid:
    """Flattened non-overlapping patches of one image, values in [-1, 1].

    ``tokens`` has shape (grid_h * grid_w, patch_size**2 * 3) in row-major
    patch order; ``positions`` holds the matching (row, col) patch coordinates.
    """

    grid_h: int
    grid_w: int
    tokens: np.ndarray
    positions: np.ndarray


@dataclass
class PatchedSample:
    """One image split into disjoint context and target token sets."""

    context_tokens: np.ndarray
    context_positions: np.ndarray
    target_tokens: np.ndarray
    target_positions: np.ndarray
    grid_h: int
    grid_w: int
    sample_id: int = 0

    @property
    def n_context(self) -> int:
        return self.context_tokens.shape[0]

    @property
    def n_target(self) -> int:
        return self.target_tokens.shape[0]


def _round_down_side(value: float, patch_size: int, min_side: int) -> int:
    floor_side = max(patch_size * math.ceil(min_side / patch_size), patch_size)
    side = patch_size * int(max(value, min_side) // patch_size)
    return max(side, floor_side)


def scale_image(img: RawImage, s: float, cfg: PipelineConfig) -> RawImage:
    """Bilinearly resize ``img`` by factor ``s``.

    Each output side is ``s`` times the input side, clamped up to
    ``cfg.min_side`` and rounded down to a multiple of the patch size (but
    never below one patch).
    """
    lo, hi = cfg.scale_range
    if not (lo <= s <= hi):
        raise ValueError(f"scale {s} outside configured range [{lo}, {hi}]")
    new_h = _round_down_side(s * img.height, cfg.patch_size, cfg.min_side)
    new_w = _round_down_side(s * img.width, cfg.patch_size, cfg.min_side)
    if new_h < cfg.patch_size or new_w < cfg.patch_size:
        raise RejectedSampleError(
            f"image of size {img.height}x{img.width} scales below one "
            f"{cfg.patch_size}x{cfg.patch_size} patch"
        )
    if (new_h, new_w) == (img.height, img.width):
        return RawImage(img.pixels.copy())
    resized = Image.fromarray(img.pixels).resize((new_w, new_h), Image.BILINEAR)
    return RawImage(np.asarray(resized, dtype=np.uint8))


def patchify(img: RawImage, patch_size: int) -> PatchGrid:
    """Split an image into flattened non-overlapping patches.

    Pixel bytes are mapped affinely to [-1, 1] (0 -> -1, 255 -> +1). Both
    image sides must be divisible by ``patch_size``.
    """
    h, w, c = img.pixels.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image dims {h}x{w} not divisible by patch size {patch_size}")
    grid_h, grid_w = h // patch_size, w // patch_size
    blocks = img.pixels.reshape(grid_h, patch_size, grid_w, patch_size, c)
    tokens = blocks.transpose(0, 2, 1, 3, 4).reshape(grid_h * grid_w, patch_size * patch_size * c)
    tokens = tokens.astype(np.float64) * (2.0 / 255.0) - 1.0
    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)
    positions = np.stack([rows, cols], axis=1).astype(np.int64)
    return PatchGrid(grid_h=grid_h, grid_w=grid_w, tokens=tokens, positions=positions)


def unpatchify(grid: PatchGrid, patch_size: int) -> RawImage:
    """Inverse of :func:`patchify`; exact on byte-valued inputs."""
    c = 3
    blocks = grid.tokens.reshape(grid.grid_h, grid.grid_w, patch_size, patch_size, c)
    pixels = blocks.transpose(0, 2, 1, 3, 4).reshape(
        grid.grid_h * patch_size, grid.grid_w * patch_size, c
    )
    bytes_ = np.round((pixels + 1.0) * (255.0 / 2.0)).astype(np.uint8)
    return RawImage(bytes_)


def _window_index(positions: np.ndarray, window: int, n_win_cols: int) -> np.ndarray:
    return (positions[:, 0] // window) * n_win_cols + positions[:, 1] // window


def partition_windows(
    grid: PatchGrid, c: float, window: int, rng: np.random.Generator, sample_id: int = 0
) -> PatchedSample:
    """Assign a ~``c`` fraction of the grid to the context set, by windows.

    The grid is tiled with ``window`` x ``window`` cells (edge cells clipped
    to the grid boundary); ``round(total_windows * c)`` cells, clamped so both
    sets stay nonempty, are drawn uniformly without replacement and all their
    patches become context. Grids with fewer than two windows fall back to
    per-patch partitioning.
    """
    if not (0 < c < 1):
        raise ValueError(f"capacity must be in (0, 1), got {c}")
    total_patches = grid.grid_h * grid.grid_w
    n_win_rows = math.ceil(grid.grid_h / window)
    n_win_cols = math.ceil(grid.grid_w / window)
    total_windows = n_win_rows * n_win_cols

    if total_windows < 2:
        n_ctx = int(np.clip(round(total_patches * c), 1, total_patches - 1))
        chosen = rng.choice(total_patches, size=n_ctx, replace=False)
        is_context = np.zeros(total_patches, dtype=bool)
        is_context[chosen] = True
    else:
        n_ctx_windows = int(np.clip(round(total_windows * c), 1, total_windows - 1))
        chosen = rng.choice(total_windows, size=n_ctx_windows, replace=False)
        win_of_patch = _window_index(grid.positions, window, n_win_cols)
        is_context = np.isin(win_of_patch, chosen)

    return PatchedSample(
        context_tokens=grid.tokens[is_context],
        context_positions=grid.positions[is_context],
        target_tokens=grid.tokens[~is_context],
        target_positions=grid.positions[~is_context],
        grid_h=grid.grid_h,
        grid_w=grid.grid_w,
        sample_id=sample_id,
    )


def sample_pipeline(
    img: RawImage, cfg: PipelineConfig, rng: np.random.Generator, sample_id: int = 0
) -> PatchedSample:
    """Run the full scale -> patchify -> partition pipeline for one image.

    Draws the scale factor and context capacity uniformly from the configured
    ranges; fully deterministic given the generator state.
    """
    s = rng.uniform(*cfg.scale_range)
    c = rng.uniform(*cfg.capacity_range)
    scaled = scale_image(img, s, cfg)
    grid = patchify(scaled, cfg.patch_size)
    return partition_windows(grid, c, cfg.window_size, rng, sample_id=sample_id)
