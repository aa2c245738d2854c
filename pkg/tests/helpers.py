"""Shared test utilities: synthetic samples, an independent first-fit
reference, and a central-difference gradient oracle."""

from __future__ import annotations

import math

import numpy as np
import torch

from jepalite.packing import PackedBatch, PackerConfig, pack
from jepalite.pipeline import PatchedSample


def make_patched_sample(
    sample_id: int, n_ctx: int, n_tgt: int, token_dim: int = 12, rng=None
) -> PatchedSample:
    """Random sample with distinct positions on a just-big-enough grid."""
    rng = rng if rng is not None else np.random.default_rng(1000 + sample_id)
    total = n_ctx + n_tgt
    side = max(2, math.isqrt(max(total - 1, 1)) + 1)
    cells = rng.choice(side * side, size=total, replace=False)
    pos = np.stack(np.divmod(cells, side), axis=1).astype(np.int64)
    tokens = rng.uniform(-1.0, 1.0, size=(total, token_dim))
    return PatchedSample(
        context_tokens=tokens[:n_ctx],
        context_positions=pos[:n_ctx],
        target_tokens=tokens[n_ctx:],
        target_positions=pos[n_ctx:],
        grid_h=side,
        grid_w=side,
        sample_id=sample_id,
    )


def make_batch(samples, rows: int, ctx_cap: int, tgt_cap: int) -> PackedBatch:
    cfg = PackerConfig(batch_rows=rows, context_capacity=ctx_cap, target_capacity=tgt_cap)
    batch, carry = pack(samples, cfg)
    assert not carry, "test batch must fit entirely"
    return batch


def reference_first_fit(sizes, cfg: PackerConfig):
    """Plain offline first-fit over (sample_id, n, m) triples.

    Deliberately written from the rule itself, independent of the packer
    implementation, to serve as its oracle.
    """
    rows = [[] for _ in range(cfg.batch_rows)]
    ctx_left = [cfg.context_capacity] * cfg.batch_rows
    tgt_left = [cfg.target_capacity] * cfg.batch_rows
    carry = []
    for sid, n, m in sizes:
        for r in range(cfg.batch_rows):
            if ctx_left[r] >= n and tgt_left[r] >= m:
                rows[r].append(sid)
                ctx_left[r] -= n
                tgt_left[r] -= m
                break
        else:
            carry.append(sid)
    return rows, carry


def batch_row_assignment(batch: PackedBatch) -> list[list[int]]:
    """Distinct sample ids per context row, in slot order."""
    out = []
    for row in batch.ctx_sample_ids:
        ordered: list[int] = []
        for v in row:
            v = int(v)
            if v != 0 and (not ordered or ordered[-1] != v) and v not in ordered:
                ordered.append(v)
        out.append(ordered)
    return out


def finite_difference_grads(loss_fn, params, h: float = 1e-5):
    """Central differences of loss_fn() w.r.t. each tensor in params."""

    def evaluate():
        with torch.no_grad():
            return float(loss_fn())

    grads = []
    for p in params:
        flat = p.detach().view(-1)
        g = np.zeros(flat.numel())
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            f_plus = evaluate()
            flat[i] = orig - h
            f_minus = evaluate()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g.reshape(tuple(p.shape)))
    return grads


def max_relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def param_fingerprint(module: torch.nn.Module) -> bytes:
    """Byte-exact snapshot of all parameters, for no-mutation checks."""
    return b"".join(p.detach().numpy().tobytes() for p in module.parameters())
