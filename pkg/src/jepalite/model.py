"""Student/teacher encoder and predictor networks.

Transformer encoders over packed patch tokens with block-masked attention
(tokens never attend across samples), 2-D rotary position encoding on the
patch (row, col) coordinates, and RMS query/key normalization with a learned
per-head gain. The encoder output is post-processed either by a LayerNorm
with learnable affine parameters or by a DynTanh activation ``tanh(a * x)``
with a learnable per-dimension scale and no affine.

Everything runs in float64 so training and analysis are reproducible
bit-for-bit given a seed.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

POSTPROC_MODES = ("layernorm", "dyntanh")
LN_EPS = 1e-6
QK_NORM_EPS = 1e-6


class NonFiniteActivationError(Exception):
    """A forward pass produced NaN or Inf activations."""


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    layers: int = 4
    heads: int = 4
    patch_size: int = 16
    mlp_ratio: float = 4.0
    predictor_dim: int = 32
    predictor_layers: int = 2
    rope_base: float = 100.0
    postproc_mode: str = "layernorm"

    def __post_init__(self):
        if self.postproc_mode not in POSTPROC_MODES:
            raise ValueError(f"postproc_mode must be one of {POSTPROC_MODES}, got {self.postproc_mode!r}")
        for name, dim in (("hidden_dim", self.hidden_dim), ("predictor_dim", self.predictor_dim)):
            if dim % self.heads:
                raise ValueError(f"{name}={dim} not divisible by heads={self.heads}")
            if (dim // self.heads) % 4:
                raise ValueError(
                    f"{name}={dim} gives head_dim {dim // self.heads}, "
                    "which must be divisible by 4 (one rotary pair per axis)"
                )

    @property
    def token_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


def attention_mask(sample_ids: torch.Tensor) -> torch.Tensor:
    """Boolean (B, S, S) mask: slots may attend iff they share a nonzero id."""
    same = sample_ids[:, :, None] == sample_ids[:, None, :]
    return same & (sample_ids[:, :, None] != 0)


def _rotate_pairs(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    # x (..., 2k) with interleaved pairs, angles (..., k)
    pairs = x.unflatten(-1, (-1, 2))
    cos, sin = angles.cos(), angles.sin()
    even = pairs[..., 0] * cos - pairs[..., 1] * sin
    odd = pairs[..., 0] * sin + pairs[..., 1] * cos
    return torch.stack([even, odd], dim=-1).flatten(-2)


def apply_rope2d(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    """Rotary position encoding over patch coordinates.

    The head dimension is split in two halves: the first is rotated by the
    patch row index, the second by the column index, each with standard
    rotary frequencies ``base ** (-2i / half)``.

    Args:
        x: (B, H, S, head_dim) queries or keys, head_dim divisible by 4.
        positions: (B, S, 2) integer (row, col) patch coordinates.
        base: rotary frequency base.
    """
    half = x.shape[-1] // 2
    inv_freq = base ** (-torch.arange(0, half, 2, dtype=x.dtype, device=x.device) / half)
    row_angles = positions[:, None, :, 0:1].to(x.dtype) * inv_freq
    col_angles = positions[:, None, :, 1:2].to(x.dtype) * inv_freq
    return torch.cat(
        [_rotate_pairs(x[..., :half], row_angles), _rotate_pairs(x[..., half:], col_angles)],
        dim=-1,
    )


def _rms_normalize(x: torch.Tensor, eps: float = QK_NORM_EPS) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


class MaskedAttention(nn.Module):
    """Multi-head self-attention with QK RMS-norm, RoPE2D, and a block mask."""

    def __init__(self, dim: int, heads: int, rope_base: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.rope_base = rope_base
        self.qkv = nn.Linear(dim, 3 * dim, dtype=torch.float64)
        self.proj = nn.Linear(dim, dim, dtype=torch.float64)
        self.q_gain = nn.Parameter(torch.ones(heads, dtype=torch.float64))
        self.k_gain = nn.Parameter(torch.ones(heads, dtype=torch.float64))

    def forward(self, x, positions, allowed):
        b, s, _ = x.shape
        qkv = self.qkv(x).view(b, s, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q = _rms_normalize(qkv[0]) * self.q_gain.view(1, -1, 1, 1)
        k = _rms_normalize(qkv[1]) * self.k_gain.view(1, -1, 1, 1)
        q = apply_rope2d(q, positions, self.rope_base)
        k = apply_rope2d(k, positions, self.rope_base)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        # Padding slots attend only to themselves so their softmax stays
        # finite; nothing real ever attends to them or reads their output.
        keep = allowed | torch.eye(s, dtype=torch.bool, device=x.device)
        scores = scores.masked_fill(~keep[:, None], float("-inf"))
        out = (scores.softmax(dim=-1) @ qkv[2]).transpose(1, 2).reshape(b, s, -1)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, dtype=torch.float64)
        self.fc2 = nn.Linear(hidden, dim, dtype=torch.float64)

    def forward(self, x):
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, rope_base: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS, dtype=torch.float64)
        self.attn = MaskedAttention(dim, heads, rope_base)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS, dtype=torch.float64)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, positions, allowed):
        x = x + self.attn(self.norm1(x), positions, allowed)
        return x + self.mlp(self.norm2(x))


class DynTanh(nn.Module):
    """Elementwise ``tanh(a * x)`` with a learnable positive scale vector.

    Bounded like LayerNorm but monotone in token magnitude, so the relative
    energies (L2 norms) of tokens survive post-processing.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(dim, dtype=torch.float64))

    def forward(self, x):
        return torch.tanh(self.scale * x)


def _check_finite(x: torch.Tensor, where: str) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteActivationError(f"non-finite activations at {where}")


class Encoder(nn.Module):
    """Patch-token transformer producing raw (pre-postprocessing) features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.token_dim, cfg.hidden_dim, dtype=torch.float64)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.hidden_dim, cfg.heads, cfg.mlp_ratio, cfg.rope_base)
            for _ in range(cfg.layers)
        )
        if cfg.postproc_mode == "layernorm":
            self.postprocess = nn.LayerNorm(cfg.hidden_dim, eps=LN_EPS, dtype=torch.float64)
        else:
            self.postprocess = DynTanh(cfg.hidden_dim)

    def forward(self, tokens, positions, allowed, collect_hidden: bool = False):
        """Encode packed tokens to raw per-token features.

        Args:
            tokens: (B, S, token_dim) patch tokens.
            positions: (B, S, 2) patch coordinates.
            allowed: (B, S, S) boolean attention mask.
            collect_hidden: also return the output of every block (used by
                the linear-probe harness; postprocessing is never applied).

        Returns:
            (B, S, hidden_dim) raw features, or (features, [per-block
            features]) when ``collect_hidden`` is set.
        """
        x = self.proj(tokens)
        hidden = []
        for i, block in enumerate(self.blocks):
            x = block(x, positions, allowed)
            _check_finite(x, f"encoder block {i}")
            if collect_hidden:
                hidden.append(x)
        return (x, hidden) if collect_hidden else x


class Predictor(nn.Module):
    """Narrow transformer predicting target-slot features from context.

    The input sequence is the projected context features concatenated with
    one mask-token copy per requested target position; positions enter via
    RoPE2D and attention is restricted to same-sample slots. Outputs are
    read back from the mask-token slots and projected to the encoder width.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        p = cfg.predictor_dim
        self.in_proj = nn.Linear(cfg.hidden_dim, p, dtype=torch.float64)
        self.mask_token = nn.Parameter(torch.zeros(p, dtype=torch.float64))
        self.blocks = nn.ModuleList(
            TransformerBlock(p, cfg.heads, cfg.mlp_ratio, cfg.rope_base)
            for _ in range(cfg.predictor_layers)
        )
        self.out_proj = nn.Linear(p, cfg.hidden_dim, dtype=torch.float64)

    def forward(self, context_features, context_ids, context_positions, target_ids, target_positions):
        b, n, _ = context_features.shape
        m = target_ids.shape[1]
        has_context = (target_ids[:, :, None] == context_ids[:, None, :]).any(dim=-1)
        orphans = ~(has_context | (target_ids == 0))
        if orphans.any():
            row, slot = [int(v) for v in orphans.nonzero()[0]]
            raise ValueError(
                f"target sample {int(target_ids[row, slot])} in row {row} has no context tokens"
            )
        x = torch.cat(
            [self.in_proj(context_features), self.mask_token.expand(b, m, -1)], dim=1
        )
        positions = torch.cat([context_positions, target_positions], dim=1)
        allowed = attention_mask(torch.cat([context_ids, target_ids], dim=1))
        for i, block in enumerate(self.blocks):
            x = block(x, positions, allowed)
            _check_finite(x, f"predictor block {i}")
        return self.out_proj(x[:, n:])


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, valid: torch.Tensor | None = None):
    """Smooth-L1 distance with the quadratic/linear switch at |e| = 1.

    Args:
        pred: (..., S, d) predicted features.
        target: same shape as pred.
        valid: optional (..., S) boolean; slots excluded from the scalar mean.

    Returns:
        (scalar loss, per-token losses of shape (..., S)); per-token values
        are means over the feature dimension.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    err = pred - target
    abs_err = err.abs()
    elementwise = torch.where(abs_err < 1.0, 0.5 * err * err, abs_err - 0.5)
    per_token = elementwise.mean(dim=-1)
    if valid is None:
        return per_token.mean(), per_token
    if not valid.any():
        raise ValueError("no valid tokens to average the loss over")
    return per_token[valid].mean(), per_token


@dataclass
class ModelBundle:
    """Student, EMA teacher, and predictor sharing one configuration."""

    config: ModelConfig
    student: Encoder
    teacher: Encoder
    predictor: Predictor

    def trainable_modules(self) -> list[nn.Module]:
        return [self.student, self.predictor]


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Gaussian(0, 0.02) weights and mask token, zero biases, unit gains.

    Every RNG-dependent parameter is overwritten from the explicit generator
    (constructor defaults use the global RNG), visiting parameters in
    ``named_parameters`` order, so a fixed seed gives a bit-identical
    initialization on every run.
    """
    for name, p in module.named_parameters():
        with torch.no_grad():
            if p.ndim >= 2 or name.endswith("mask_token"):
                p.normal_(0.0, 0.02, generator=generator)
            elif name.endswith(".bias"):
                p.zero_()
            # norm gains and tanh scales keep deterministic constructor values


def build_models(cfg: ModelConfig, seed: int) -> ModelBundle:
    """Construct student, predictor, and a detached teacher copy of the student."""
    gen = torch.Generator().manual_seed(seed)
    student = Encoder(cfg)
    init_parameters(student, gen)
    predictor = Predictor(cfg)
    init_parameters(predictor, gen)
    teacher = copy.deepcopy(student)
    teacher.requires_grad_(False)
    return ModelBundle(config=cfg, student=student, teacher=teacher, predictor=predictor)
