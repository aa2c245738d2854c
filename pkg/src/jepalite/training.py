"""Self-distillation training loop over packed patch batches.

One step runs: student encodes the context stream, the EMA teacher encodes
context and target jointly (no gradients), both outputs are post-processed,
rows are repeated, tokens are dropped at a fixed rate, the predictor fills
target slots from surviving context, and a smooth-L1 loss over surviving
target tokens drives AdamW updates of student + predictor. The teacher then
takes an EMA step toward the student.

Determinism: every random draw comes from a counter-based stream keyed on
(seed, stream id, counter), so state is reproducible from (seed, step,
samples_consumed) alone and checkpoint resume replays the exact sample
stream without storing generator state.
"""

from __future__ import annotations

import collections
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

import numpy as np
import torch

from .datasets import DatasetEntry, Shard, ShardIndex, load_image
from .model import ModelBundle, ModelConfig, attention_mask, build_models, smooth_l1
from .packing import PackedBatch, PackerConfig, PackingStream, occupancy
from .pipeline import PipelineConfig, PatchedSample, RejectedSampleError, sample_pipeline, stream_rng

log = logging.getLogger(__name__)

# RNG stream ids under the root seed
STREAM_SHARDS = 0
STREAM_PIPELINE = 1
STREAM_DROPOUT = 2
STREAM_ANALYSIS = 3

METRICS_FIELDS = ("step", "loss", "lr", "beta", "occupancy_ctx", "occupancy_tgt", "grad_norm")

CHECKPOINT_VERSION = 1.0


class NonFiniteLossError(Exception):
    """Training loss became NaN or Inf; the step was aborted before updates."""


@dataclass
class TrainConfig:
    repetition: int = 4
    drop_rate: float = 0.75
    lr_start: float = 1e-4
    lr_peak: float = 5e-4
    warmup_steps: int = 10_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    weight_decay: float = 0.05
    ema_beta_start: float = 0.95
    ema_beta_mid: float = 0.999
    ema_beta_final: float = 0.9995
    ema_rampup_steps: int = 1_000
    ema_anneal_steps: int = 300_000
    batch_rows: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.repetition < 1:
            raise ValueError("repetition must be >= 1")
        if not 0 <= self.drop_rate < 1:
            raise ValueError(f"drop_rate must be in [0, 1), got {self.drop_rate}")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.ema_rampup_steps < 1 or self.ema_anneal_steps < 1:
            raise ValueError("ema schedule lengths must be >= 1")
        if self.batch_rows < 1:
            raise ValueError("batch_rows must be >= 1")
        if self.lr_start <= 0 or self.lr_peak <= 0:
            raise ValueError("learning rates must be positive")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from lr_start to lr_peak, then constant."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return float(np.interp(step, [0, cfg.warmup_steps], [cfg.lr_start, cfg.lr_peak]))


def ema_beta_at(step: int, cfg: TrainConfig) -> float:
    """Piecewise-linear teacher momentum: start -> mid -> final, then flat."""
    if step < 0:
        raise ValueError("step must be >= 0")
    knots = [0, cfg.ema_rampup_steps, cfg.ema_rampup_steps + cfg.ema_anneal_steps]
    values = [cfg.ema_beta_start, cfg.ema_beta_mid, cfg.ema_beta_final]
    return float(np.interp(step, knots, values))


def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, beta: float) -> None:
    """teacher <- beta * teacher + (1 - beta) * student, every parameter."""
    student_params = dict(student.named_parameters())
    with torch.no_grad():
        for name, p_t in teacher.named_parameters():
            p_t.mul_(beta).add_(student_params[name], alpha=1.0 - beta)


def token_dropout(sample_ids: np.ndarray, drop_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Drop tokens by zeroing their sample ids; returns the masked id array.

    Per row and per sample, ceil((1 - drop_rate) * k) of the k slots are kept,
    drawn uniformly without replacement, so every sample keeps at least one
    token. Padding slots (id 0) stay 0. Rows are processed in order and ids
    in ascending order, making the keep-set a pure function of the generator.
    """
    if not 0 <= drop_rate < 1:
        raise ValueError(f"drop_rate must be in [0, 1), got {drop_rate}")
    if drop_rate == 0:
        return sample_ids.copy()
    keep = np.zeros(sample_ids.shape, dtype=bool)
    for r in range(sample_ids.shape[0]):
        row = sample_ids[r]
        for sid in np.unique(row):
            if sid == 0:
                continue
            slots = np.nonzero(row == sid)[0]
            n_keep = math.ceil((1.0 - drop_rate) * slots.size)
            keep[r, rng.choice(slots, size=n_keep, replace=False)] = True
    return np.where(keep, sample_ids, 0)


def build_optimizer(bundle: ModelBundle, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW over student + predictor; weight decay only on matrix-shaped
    parameters (biases, norm gains, scale vectors, and the mask token are
    decay-free)."""
    decay, no_decay = [], []
    for module in bundle.trainable_modules():
        for p in module.parameters():
            (decay if p.ndim >= 2 else no_decay).append(p)
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.lr_start,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
    )


@dataclass
class TrainState:
    bundle: ModelBundle
    optimizer: torch.optim.AdamW
    config: TrainConfig
    step: int = 0
    samples_consumed: int = 0


def init_train_state(model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainState:
    bundle = build_models(model_cfg, train_cfg.seed)
    return TrainState(bundle=bundle, optimizer=build_optimizer(bundle, train_cfg), config=train_cfg)


def _repeat_rows(x: torch.Tensor, r: int) -> torch.Tensor:
    return x if r == 1 else x.repeat_interleave(r, dim=0)


def training_forward(
    bundle: ModelBundle,
    batch: PackedBatch,
    repetition: int,
    ctx_ids_kept: np.ndarray,
    tgt_ids_kept: np.ndarray,
):
    """Compose the full loss for one packed batch.

    ``ctx_ids_kept`` / ``tgt_ids_kept`` are the row-repeated sample id arrays
    after token dropout (dropped slots zeroed). Returns (scalar loss,
    per-token losses (rows*r, M), valid-token mask).
    """
    ctx_tokens = torch.from_numpy(batch.ctx_tokens)
    tgt_tokens = torch.from_numpy(batch.tgt_tokens)
    ctx_ids = torch.from_numpy(batch.ctx_sample_ids)
    tgt_ids = torch.from_numpy(batch.tgt_sample_ids)
    ctx_pos = torch.from_numpy(batch.ctx_positions)
    tgt_pos = torch.from_numpy(batch.tgt_positions)
    n = ctx_tokens.shape[1]

    raw_ctx = bundle.student(ctx_tokens, ctx_pos, attention_mask(ctx_ids))
    student_ctx = bundle.student.postprocess(raw_ctx)
    with torch.no_grad():
        joint_tokens = torch.cat([ctx_tokens, tgt_tokens], dim=1)
        joint_pos = torch.cat([ctx_pos, tgt_pos], dim=1)
        joint_ids = torch.cat([ctx_ids, tgt_ids], dim=1)
        raw_joint = bundle.teacher(joint_tokens, joint_pos, attention_mask(joint_ids))
        teacher_tgt = bundle.teacher.postprocess(raw_joint[:, n:])

    r = repetition
    kept_ctx = torch.from_numpy(np.ascontiguousarray(ctx_ids_kept))
    kept_tgt = torch.from_numpy(np.ascontiguousarray(tgt_ids_kept))
    pred = bundle.predictor(
        _repeat_rows(student_ctx, r), kept_ctx, _repeat_rows(ctx_pos, r), kept_tgt, _repeat_rows(tgt_pos, r)
    )
    valid = kept_tgt != 0
    loss, per_token = smooth_l1(pred, _repeat_rows(teacher_tgt, r), valid=valid)
    return loss, per_token, valid


def _grad_norm(bundle: ModelBundle) -> float:
    total = 0.0
    for module in bundle.trainable_modules():
        for p in module.parameters():
            if p.grad is not None:
                total += float(p.grad.pow(2).sum())
    return math.sqrt(total)


def train_step(state: TrainState, batch: PackedBatch) -> dict:
    """One optimization step; mutates ``state`` in place and returns metrics."""
    cfg = state.config
    rng = stream_rng(cfg.seed, STREAM_DROPOUT, state.step)
    rep_ctx_ids = np.repeat(batch.ctx_sample_ids, cfg.repetition, axis=0)
    rep_tgt_ids = np.repeat(batch.tgt_sample_ids, cfg.repetition, axis=0)
    ctx_kept = token_dropout(rep_ctx_ids, cfg.drop_rate, rng)
    tgt_kept = token_dropout(rep_tgt_ids, cfg.drop_rate, rng)

    loss, per_token, valid = training_forward(state.bundle, batch, cfg.repetition, ctx_kept, tgt_kept)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss at step {state.step}")

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grad_norm = _grad_norm(state.bundle)
    lr = lr_at(state.step, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    beta = ema_beta_at(state.step, cfg)
    ema_update(state.bundle.teacher, state.bundle.student, beta)

    occ_ctx, occ_tgt = occupancy(batch)
    metrics = {
        "step": state.step,
        "loss": float(loss.detach()),
        "lr": lr,
        "beta": beta,
        "occupancy_ctx": occ_ctx,
        "occupancy_tgt": occ_tgt,
        "grad_norm": grad_norm,
        "per_token_losses": per_token.detach().numpy(),
        "valid_tokens": valid.numpy(),
    }
    state.step += 1
    return metrics


def shuffle_shards(index: ShardIndex, rng: np.random.Generator, n_draws: int) -> list[Shard]:
    """i.i.d. uniform shard draws with replacement."""
    if n_draws < 0:
        raise ValueError("n_draws must be >= 0")
    picks = rng.integers(0, len(index.shards), size=n_draws)
    return [index.shards[int(i)] for i in picks]


def entry_stream(index: ShardIndex, seed: int) -> Iterator[tuple[int, DatasetEntry]]:
    """Endless (global position, entry) stream: draw a shard with replacement,
    yield its entries in order, repeat. Pure index math, so skipping ahead to
    resume a run costs nothing."""
    rng = stream_rng(seed, STREAM_SHARDS)
    position = 0
    while True:
        for shard in shuffle_shards(index, rng, 1):
            for entry in shard.entries:
                yield position, entry
                position += 1


def _ordered_parallel(fn: Callable, items: Iterable, workers: int) -> Iterator:
    """Map ``fn`` over ``items`` preserving order, optionally with threads."""
    if workers <= 1:
        for item in items:
            yield fn(item)
        return
    items = iter(items)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending: collections.deque = collections.deque(
            pool.submit(fn, item) for item in itertools.islice(items, 2 * workers)
        )
        while pending:
            result = pending.popleft().result()
            for item in itertools.islice(items, 1):
                pending.append(pool.submit(fn, item))
            yield result


def batch_stream(
    index: ShardIndex,
    pipe_cfg: PipelineConfig,
    packer_cfg: PackerConfig,
    seed: int,
    skip: int = 0,
    workers: int = 1,
) -> Iterator[tuple[PackedBatch, int]]:
    """Endless stream of packed batches from the dataset.

    Yields (batch, samples_consumed) where samples_consumed counts stream
    positions up to and including the last sample placed in the batch.
    Restarting with ``skip=samples_consumed`` reproduces the continuation of
    the uninterrupted stream exactly: the batch boundary falls at the first
    misfit sample, which re-seeds the next batch either way.
    """

    def prepare(item: tuple[int, DatasetEntry]) -> Optional[PatchedSample]:
        position, entry = item
        img = load_image(entry.path, index.root)
        rng = stream_rng(seed, STREAM_PIPELINE, position)
        try:
            sample = sample_pipeline(img, pipe_cfg, rng, sample_id=position + 1)
        except RejectedSampleError as e:
            log.warning("skipping sample %d (%s): %s", position, entry.path, e)
            return None
        if sample.n_context > packer_cfg.context_capacity or sample.n_target > packer_cfg.target_capacity:
            log.warning(
                "skipping oversize sample %d (%s): (%d, %d) tokens vs capacities (%d, %d)",
                position, entry.path, sample.n_context, sample.n_target,
                packer_cfg.context_capacity, packer_cfg.target_capacity,
            )
            return None
        return sample

    entries = itertools.islice(entry_stream(index, seed), skip, None)
    packer = PackingStream(packer_cfg)
    for sample in _ordered_parallel(prepare, entries, workers):
        if sample is None:
            continue
        emitted = packer.feed(sample)
        if emitted is not None:
            consumed = int(max(emitted.ctx_sample_ids.max(), emitted.tgt_sample_ids.max()))
            yield emitted, consumed


def _trainable_named_params(bundle: ModelBundle) -> list[tuple[str, torch.nn.Parameter]]:
    named = []
    for prefix, module in (("student", bundle.student), ("predictor", bundle.predictor)):
        named.extend((f"{prefix}.{n}", p) for n, p in module.named_parameters())
    return named


def _model_meta(cfg: ModelConfig, train_cfg: TrainConfig) -> dict[str, float]:
    from .model import POSTPROC_MODES

    return {
        "meta/version": CHECKPOINT_VERSION,
        "meta/hidden_dim": float(cfg.hidden_dim),
        "meta/layers": float(cfg.layers),
        "meta/heads": float(cfg.heads),
        "meta/patch_size": float(cfg.patch_size),
        "meta/mlp_ratio": float(cfg.mlp_ratio),
        "meta/predictor_dim": float(cfg.predictor_dim),
        "meta/predictor_layers": float(cfg.predictor_layers),
        "meta/rope_base": float(cfg.rope_base),
        "meta/postproc_mode": float(POSTPROC_MODES.index(cfg.postproc_mode)),
        "meta/seed_lo": float(train_cfg.seed & 0xFFFFFFFF),
        "meta/seed_hi": float(train_cfg.seed >> 32),
    }


def checkpoint_save(state: TrainState, path: str | Path) -> None:
    """Write params, optimizer moments, and stream counters to one file."""
    from .tensorfile import write_tensors

    tensors: dict[str, np.ndarray] = {
        name: np.asarray(value)
        for name, value in _model_meta(state.bundle.config, state.config).items()
    }
    tensors["meta/step"] = np.asarray(float(state.step))
    tensors["meta/samples_consumed"] = np.asarray(float(state.samples_consumed))
    for prefix, module in (
        ("student", state.bundle.student),
        ("teacher", state.bundle.teacher),
        ("predictor", state.bundle.predictor),
    ):
        for name, p in module.named_parameters():
            tensors[f"{prefix}.{name}"] = p.detach().numpy().copy()
    for name, p in _trainable_named_params(state.bundle):
        opt_state = state.optimizer.state.get(p)
        if opt_state:
            tensors[f"opt.{name}.step"] = np.asarray(float(opt_state["step"]))
            tensors[f"opt.{name}.exp_avg"] = opt_state["exp_avg"].numpy().copy()
            tensors[f"opt.{name}.exp_avg_sq"] = opt_state["exp_avg_sq"].numpy().copy()
    write_tensors(path, tensors)


def checkpoint_load(path: str | Path, model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainState:
    """Rebuild a TrainState from a checkpoint; every mismatch is an error."""
    from .tensorfile import read_tensors

    tensors = read_tensors(path)
    if float(tensors.get("meta/version", -1.0)) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {tensors.get('meta/version')}")
    expected = _model_meta(model_cfg, train_cfg)
    for key, value in expected.items():
        got = float(tensors[key]) if key in tensors else None
        if got != value:
            raise ValueError(f"{path}: checkpoint {key}={got} does not match configured {value}")

    state = init_train_state(model_cfg, train_cfg)
    for prefix, module in (
        ("student", state.bundle.student),
        ("teacher", state.bundle.teacher),
        ("predictor", state.bundle.predictor),
    ):
        for name, p in module.named_parameters():
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise ValueError(f"{path}: checkpoint is missing tensor {key}")
            stored = tensors[key]
            if tuple(stored.shape) != tuple(p.shape):
                raise ValueError(f"{path}: {key} has shape {stored.shape}, expected {tuple(p.shape)}")
            with torch.no_grad():
                p.copy_(torch.from_numpy(stored))

    # Optimizer moments are injected through load_state_dict so internal
    # bookkeeping (dtype policy for 'step') matches a live optimizer.
    sd = state.optimizer.state_dict()
    flat_params = [p for g in state.optimizer.param_groups for p in g["params"]]
    name_of = {id(p): n for n, p in _trainable_named_params(state.bundle)}
    opt_state = {}
    for i, p in enumerate(flat_params):
        key = f"opt.{name_of[id(p)]}"
        if f"{key}.exp_avg" in tensors:
            opt_state[i] = {
                "step": torch.tensor(float(tensors[f"{key}.step"])),
                "exp_avg": torch.from_numpy(tensors[f"{key}.exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(tensors[f"{key}.exp_avg_sq"].copy()),
            }
    sd["state"] = opt_state
    state.optimizer.load_state_dict(sd)

    state.step = int(tensors["meta/step"])
    state.samples_consumed = int(tensors["meta/samples_consumed"])
    return state


class MetricsWriter:
    """Append-only CSV of per-step scalars, written in full float precision.

    On resume, rows at or past the resume step are trimmed first so the file
    reads as one uninterrupted run.
    """

    def __init__(self, path: str | Path, resume_step: Optional[int] = None):
        self.path = Path(path)
        rows: list[str] = []
        if resume_step is not None and self.path.exists():
            with open(self.path) as f:
                lines = f.read().splitlines()
            rows = [ln for ln in lines[1:] if ln and int(ln.split(",", 1)[0]) < resume_step]
        with open(self.path, "w") as f:
            f.write(",".join(METRICS_FIELDS) + "\n")
            for row in rows:
                f.write(row + "\n")
        self._f = open(self.path, "a")

    def write(self, metrics: dict) -> None:
        values = [str(metrics["step"])] + [repr(float(metrics[k])) for k in METRICS_FIELDS[1:]]
        self._f.write(",".join(values) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def latest_checkpoint(out_dir: str | Path) -> Optional[Path]:
    candidates = sorted(Path(out_dir).glob("ckpt_*.jtns"))
    return candidates[-1] if candidates else None


def run_training(
    index: ShardIndex,
    pipe_cfg: PipelineConfig,
    packer_cfg: PackerConfig,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
    max_steps: Optional[int] = None,
    max_epochs: Optional[float] = None,
    checkpoint_every: int = 500,
    workers: int = 1,
    resume: bool = False,
) -> TrainState:
    """Drive the training loop to a step or epoch budget, with checkpoints.

    An epoch is ``index.size`` positions of the sample stream. With
    ``resume=True`` the newest checkpoint in ``out_dir`` (if any) is loaded
    and the sample stream is fast-forwarded to the recorded position.
    """
    if max_steps is None and max_epochs is None:
        raise ValueError("need max_steps or max_epochs")
    if packer_cfg.batch_rows != train_cfg.batch_rows:
        raise ValueError(
            f"packer batch_rows {packer_cfg.batch_rows} != train batch_rows {train_cfg.batch_rows}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    resumed_from = latest_checkpoint(out) if resume else None
    if resumed_from is not None:
        state = checkpoint_load(resumed_from, model_cfg, train_cfg)
        log.info("resumed step %d (%d samples) from %s", state.step, state.samples_consumed, resumed_from)
    else:
        state = init_train_state(model_cfg, train_cfg)

    max_samples = None if max_epochs is None else int(max_epochs * index.size)

    def budget_left() -> bool:
        if max_steps is not None and state.step >= max_steps:
            return False
        if max_samples is not None and state.samples_consumed >= max_samples:
            return False
        return True

    stream = batch_stream(index, pipe_cfg, packer_cfg, train_cfg.seed, skip=state.samples_consumed, workers=workers)
    with MetricsWriter(out / "metrics.csv", resume_step=state.step if resumed_from else None) as metrics:
        while budget_left():
            batch, consumed = next(stream)
            step_metrics = train_step(state, batch)
            state.samples_consumed = consumed
            metrics.write(step_metrics)
            if checkpoint_every and state.step % checkpoint_every == 0:
                checkpoint_save(state, out / f"ckpt_{state.step:08d}.jtns")
    checkpoint_save(state, out / f"ckpt_{state.step:08d}.jtns")
    return state
