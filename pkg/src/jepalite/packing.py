"""Online dual-stream greedy bin packing of (context, target) token pairs.

Samples are placed first-fit into twin fixed-shape buffers (one row per batch
index) so that a sample's context and target tokens always share a batch row.
Padding slots carry sample id 0; real sample ids start at 1, which makes the
attention-mask rule unambiguous.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .pipeline import PatchedSample


class OversizeSampleError(Exception):
    """A sample's context or target set exceeds the packer capacities."""


@dataclass
class PackerConfig:
    batch_rows: int
    context_capacity: int
    target_capacity: int

    def __post_init__(self):
        if self.batch_rows < 1 or self.context_capacity < 1 or self.target_capacity < 1:
            raise ValueError("batch_rows and both capacities must be >= 1")


@dataclass
class PackedBatch:
    """Twin token buffers plus provenance ids and patch positions.

    Shapes: tokens (B, cap, token_dim), sample ids (B, cap), positions
    (B, cap, 2). Slots with sample id 0 are padding and hold zero tokens.
    """

    ctx_tokens: np.ndarray
    tgt_tokens: np.ndarray
    ctx_sample_ids: np.ndarray
    tgt_sample_ids: np.ndarray
    ctx_positions: np.ndarray
    tgt_positions: np.ndarray

    @property
    def batch_rows(self) -> int:
        return self.ctx_tokens.shape[0]

    def row_of_sample(self, sample_id: int) -> Optional[int]:
        rows = np.nonzero((self.ctx_sample_ids == sample_id).any(axis=1))[0]
        return int(rows[0]) if rows.size else None


def _check_sizes(sample: PatchedSample, cfg: PackerConfig) -> None:
    if sample.sample_id < 1:
        raise ValueError(f"sample ids must start at 1, got {sample.sample_id}")
    if sample.n_context > cfg.context_capacity or sample.n_target > cfg.target_capacity:
        raise OversizeSampleError(
            f"sample {sample.sample_id} needs ({sample.n_context}, {sample.n_target}) "
            f"slots but capacities are ({cfg.context_capacity}, {cfg.target_capacity})"
        )


def _first_fit_row(ctx_free: list[int], tgt_free: list[int], n: int, m: int) -> Optional[int]:
    for i, (cf, tf) in enumerate(zip(ctx_free, tgt_free)):
        if cf >= n and tf >= m:
            return i
    return None


def _build_batch(
    rows: list[list[PatchedSample]], cfg: PackerConfig, token_dim: int
) -> PackedBatch:
    b, n_cap, m_cap = cfg.batch_rows, cfg.context_capacity, cfg.target_capacity
    ctx_tokens = np.zeros((b, n_cap, token_dim))
    tgt_tokens = np.zeros((b, m_cap, token_dim))
    ctx_ids = np.zeros((b, n_cap), dtype=np.int64)
    tgt_ids = np.zeros((b, m_cap), dtype=np.int64)
    ctx_pos = np.zeros((b, n_cap, 2), dtype=np.int64)
    tgt_pos = np.zeros((b, m_cap, 2), dtype=np.int64)
    for r, samples in enumerate(rows):
        ci = ti = 0
        for s in samples:
            n, m = s.n_context, s.n_target
            ctx_tokens[r, ci : ci + n] = s.context_tokens
            ctx_ids[r, ci : ci + n] = s.sample_id
            ctx_pos[r, ci : ci + n] = s.context_positions
            tgt_tokens[r, ti : ti + m] = s.target_tokens
            tgt_ids[r, ti : ti + m] = s.sample_id
            tgt_pos[r, ti : ti + m] = s.target_positions
            ci += n
            ti += m
    return PackedBatch(ctx_tokens, tgt_tokens, ctx_ids, tgt_ids, ctx_pos, tgt_pos)


def pack(
    samples: Iterable[PatchedSample], cfg: PackerConfig
) -> tuple[PackedBatch, list[PatchedSample]]:
    """First-fit pack a finite queue into one batch.

    Samples are taken in queue order; each goes to the lowest-index row with
    room for both its context and target sets. Samples that fit no row are
    returned as the carryover queue, order preserved.
    """
    samples = list(samples)
    seen_ids = set()
    for s in samples:
        _check_sizes(s, cfg)
        if s.sample_id in seen_ids:
            raise ValueError(f"duplicate sample id {s.sample_id} in queue")
        seen_ids.add(s.sample_id)

    ctx_free = [cfg.context_capacity] * cfg.batch_rows
    tgt_free = [cfg.target_capacity] * cfg.batch_rows
    rows: list[list[PatchedSample]] = [[] for _ in range(cfg.batch_rows)]
    carryover: list[PatchedSample] = []
    for s in samples:
        r = _first_fit_row(ctx_free, tgt_free, s.n_context, s.n_target)
        if r is None:
            carryover.append(s)
        else:
            rows[r].append(s)
            ctx_free[r] -= s.n_context
            tgt_free[r] -= s.n_target

    token_dim = samples[0].context_tokens.shape[1] if samples else 0
    return _build_batch(rows, cfg, token_dim), carryover


class PackingStream:
    """Online packer fed one sample at a time.

    A sample that fits the open batch is placed immediately. One that fits no
    row closes the open batch (capacities only ever shrink, so nothing pending
    could fit either) and becomes the first sample of the next batch. This
    keeps emission latency bounded and makes the emitted batch sequence a pure
    function of the sample sequence, which is what checkpoint resume relies on.
    """

    def __init__(self, cfg: PackerConfig):
        self.cfg = cfg
        self._reset_open()
        self.samples_emitted = 0

    def _reset_open(self):
        self._ctx_free = [self.cfg.context_capacity] * self.cfg.batch_rows
        self._tgt_free = [self.cfg.target_capacity] * self.cfg.batch_rows
        self._rows: list[list[PatchedSample]] = [[] for _ in range(self.cfg.batch_rows)]
        self._open_count = 0
        self._token_dim = 0

    def _place(self, sample: PatchedSample) -> bool:
        r = _first_fit_row(self._ctx_free, self._tgt_free, sample.n_context, sample.n_target)
        if r is None:
            return False
        self._rows[r].append(sample)
        self._ctx_free[r] -= sample.n_context
        self._tgt_free[r] -= sample.n_target
        self._open_count += 1
        self._token_dim = sample.context_tokens.shape[1]
        return True

    def feed(self, sample: PatchedSample) -> Optional[PackedBatch]:
        """Add one sample; returns a completed batch when one is emitted."""
        _check_sizes(sample, self.cfg)
        if self._place(sample):
            return None
        batch = _build_batch(self._rows, self.cfg, self._token_dim)
        self.samples_emitted += self._open_count
        self._reset_open()
        assert self._place(sample)  # always fits an empty batch after _check_sizes
        return batch

    def flush(self) -> Optional[PackedBatch]:
        """Emit the partially filled open batch, if any."""
        if self._open_count == 0:
            return None
        batch = _build_batch(self._rows, self.cfg, self._token_dim)
        self.samples_emitted += self._open_count
        self._reset_open()
        return batch


def build_mask(sample_ids: np.ndarray) -> np.ndarray:
    """Boolean attention mask over slots: allowed(i, j) iff both slots belong
    to the same non-padding sample. Padding neither attends nor is attended."""
    ids = np.asarray(sample_ids)
    return (ids[..., :, None] == ids[..., None, :]) & (ids[..., :, None] != 0)


def occupancy(batch: PackedBatch) -> tuple[float, float]:
    """Fraction of non-padding slots in the context and target streams."""
    ctx = float((batch.ctx_sample_ids != 0).mean()) if batch.ctx_sample_ids.size else 0.0
    tgt = float((batch.tgt_sample_ids != 0).mean()) if batch.tgt_sample_ids.size else 0.0
    return ctx, tgt
