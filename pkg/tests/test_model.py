import math

import numpy as np
import pytest
import torch

from jepalite.model import (
    DynTanh,
    ModelConfig,
    NonFiniteActivationError,
    apply_rope2d,
    attention_mask,
    build_models,
    smooth_l1,
)

from helpers import make_batch, make_patched_sample

TINY = dict(hidden_dim=16, layers=2, heads=2, patch_size=2, predictor_dim=8, predictor_layers=1)


def tiny_models(seed=0, **overrides):
    cfg = ModelConfig(**{**TINY, **overrides})
    return build_models(cfg, seed)


def batch_inputs(batch):
    return (
        torch.from_numpy(batch.ctx_tokens),
        torch.from_numpy(batch.ctx_positions),
        torch.from_numpy(batch.ctx_sample_ids),
    )


class TestModelConfig:
    def test_rejects_indivisible_dims(self):
        with pytest.raises(ValueError, match="divisible by heads"):
            ModelConfig(hidden_dim=30, heads=4)
        with pytest.raises(ValueError, match="divisible by 4"):
            ModelConfig(hidden_dim=8, heads=4)  # head_dim 2

    def test_rejects_unknown_postproc(self):
        with pytest.raises(ValueError, match="postproc_mode"):
            ModelConfig(postproc_mode="batchnorm")

    def test_token_dim(self):
        assert ModelConfig(patch_size=16).token_dim == 768


class TestRope2d:
    def test_norm_preserved(self):
        x = torch.randn(2, 2, 5, 8, dtype=torch.float64)
        pos = torch.randint(0, 7, (2, 5, 2))
        y = apply_rope2d(x, pos, base=100.0)
        assert torch.allclose(x.norm(dim=-1), y.norm(dim=-1))

    def test_origin_position_is_identity(self):
        x = torch.randn(1, 1, 3, 8, dtype=torch.float64)
        y = apply_rope2d(x, torch.zeros(1, 3, 2, dtype=torch.int64), base=100.0)
        assert torch.equal(x, y)

    def test_row_and_col_rotate_disjoint_halves(self):
        x = torch.randn(1, 1, 1, 8, dtype=torch.float64)
        row_only = apply_rope2d(x, torch.tensor([[[3, 0]]]), base=100.0)
        col_only = apply_rope2d(x, torch.tensor([[[0, 3]]]), base=100.0)
        assert torch.equal(row_only[..., 4:], x[..., 4:])
        assert torch.equal(col_only[..., :4], x[..., :4])
        assert not torch.equal(row_only[..., :4], x[..., :4])

    def test_relative_phase(self):
        # rotating the same vector at shifted positions differs by the shift's rotation
        x = torch.ones(1, 1, 1, 4, dtype=torch.float64)
        y0 = apply_rope2d(x, torch.tensor([[[1, 0]]]), base=10.0)
        y1 = apply_rope2d(y0, torch.tensor([[[2, 0]]]), base=10.0)
        y2 = apply_rope2d(x, torch.tensor([[[3, 0]]]), base=10.0)
        assert torch.allclose(y1, y2)


class TestEncoder:
    def test_shapes_and_finite(self):
        bundle = tiny_models()
        batch = make_batch(
            [make_patched_sample(1, 3, 4), make_patched_sample(2, 2, 2)],
            rows=2, ctx_cap=4, tgt_cap=5,
        )
        tokens, pos, ids = batch_inputs(batch)
        out = bundle.student(tokens, pos, attention_mask(ids))
        assert out.shape == (2, 4, 16)
        assert torch.isfinite(out).all()

    def test_permutation_equivariance(self):
        bundle = tiny_models()
        batch = make_batch(
            [make_patched_sample(1, 3, 3), make_patched_sample(2, 2, 2)],
            rows=1, ctx_cap=6, tgt_cap=6,
        )
        tokens, pos, ids = batch_inputs(batch)
        out = bundle.student(tokens, pos, attention_mask(ids))
        perm = torch.randperm(6, generator=torch.Generator().manual_seed(0))
        out_p = bundle.student(
            tokens[:, perm], pos[:, perm], attention_mask(ids[:, perm])
        )
        # permuting slots reorders the attention reductions, so allow
        # reassociation noise but nothing beyond it
        assert torch.allclose(out[:, perm], out_p, atol=1e-12, rtol=0)

    def test_zero_layer_encoder_is_projection(self):
        bundle = tiny_models(layers=0)
        batch = make_batch([make_patched_sample(1, 3, 3)], rows=1, ctx_cap=3, tgt_cap=3)
        tokens, pos, ids = batch_inputs(batch)
        out = bundle.student(tokens, pos, attention_mask(ids))
        assert torch.equal(out, bundle.student.proj(tokens))

    def test_collect_hidden_matches_forward(self):
        bundle = tiny_models()
        batch = make_batch([make_patched_sample(1, 3, 3)], rows=1, ctx_cap=3, tgt_cap=3)
        tokens, pos, ids = batch_inputs(batch)
        out, hidden = bundle.student(tokens, pos, attention_mask(ids), collect_hidden=True)
        assert len(hidden) == 2
        assert torch.equal(hidden[-1], out)

    def test_nonfinite_activation_names_block(self):
        bundle = tiny_models()
        with torch.no_grad():
            bundle.student.blocks[1].mlp.fc2.weight.fill_(float("inf"))
        batch = make_batch([make_patched_sample(1, 3, 3)], rows=1, ctx_cap=3, tgt_cap=3)
        tokens, pos, ids = batch_inputs(batch)
        with pytest.raises(NonFiniteActivationError, match="block 1"):
            bundle.student(tokens, pos, attention_mask(ids))

    def test_padding_rows_stay_finite(self):
        # an all-padding row exercises the self-attention fallback
        bundle = tiny_models()
        batch = make_batch([make_patched_sample(1, 3, 3)], rows=2, ctx_cap=4, tgt_cap=4)
        tokens, pos, ids = batch_inputs(batch)
        assert (ids[1] == 0).all()
        out = bundle.student(tokens, pos, attention_mask(ids))
        assert torch.isfinite(out).all()


class TestPostprocess:
    def test_layernorm_tokens_normalized(self):
        bundle = tiny_models(postproc_mode="layernorm")
        x = torch.randn(4, 7, 16, dtype=torch.float64)
        y = bundle.student.postprocess(x)
        norms = y.norm(dim=-1)
        assert torch.allclose(norms, torch.full_like(norms, math.sqrt(16)), atol=1e-4)

    def test_layernorm_constant_token_maps_to_bias(self):
        bundle = tiny_models(postproc_mode="layernorm")
        y = bundle.student.postprocess(torch.full((1, 1, 16), 3.7, dtype=torch.float64))
        assert torch.allclose(y, bundle.student.postprocess.bias)

    def test_dyntanh_basics(self):
        dt = DynTanh(8)
        x = torch.randn(5, 8, dtype=torch.float64) * 4
        y = dt(x)
        assert (y.abs() < 1).all()
        assert torch.equal(dt(torch.zeros(2, 8, dtype=torch.float64)), torch.zeros(2, 8, dtype=torch.float64))
        with torch.no_grad():
            dt.scale.zero_()
        assert torch.equal(dt(x), torch.zeros_like(x))

    def test_dyntanh_initial_scale_is_one(self):
        bundle = tiny_models(postproc_mode="dyntanh")
        assert torch.equal(bundle.student.postprocess.scale, torch.ones(16, dtype=torch.float64))


class TestPredictor:
    def test_output_shape(self):
        bundle = tiny_models()
        batch = make_batch(
            [make_patched_sample(1, 3, 4), make_patched_sample(2, 2, 3)],
            rows=2, ctx_cap=4, tgt_cap=4,
        )
        ctx = torch.randn(2, 4, 16, dtype=torch.float64)
        out = bundle.predictor(
            ctx,
            torch.from_numpy(batch.ctx_sample_ids),
            torch.from_numpy(batch.ctx_positions),
            torch.from_numpy(batch.tgt_sample_ids),
            torch.from_numpy(batch.tgt_positions),
        )
        assert out.shape == (2, 4, 16)

    def test_orphan_target_rejected(self):
        bundle = tiny_models()
        ctx_ids = torch.tensor([[1, 1, 0]])
        tgt_ids = torch.tensor([[1, 9]])
        with pytest.raises(ValueError, match="sample 9"):
            bundle.predictor(
                torch.randn(1, 3, 16, dtype=torch.float64),
                ctx_ids,
                torch.zeros(1, 3, 2, dtype=torch.int64),
                tgt_ids,
                torch.zeros(1, 2, 2, dtype=torch.int64),
            )

    def test_deterministic(self):
        bundle = tiny_models()
        batch = make_batch([make_patched_sample(1, 3, 4)], rows=1, ctx_cap=3, tgt_cap=4)
        args = (
            torch.randn(1, 3, 16, dtype=torch.float64),
            torch.from_numpy(batch.ctx_sample_ids),
            torch.from_numpy(batch.ctx_positions),
            torch.from_numpy(batch.tgt_sample_ids),
            torch.from_numpy(batch.tgt_positions),
        )
        assert torch.equal(bundle.predictor(*args), bundle.predictor(*args))


class TestSmoothL1:
    def test_analytic_branches(self):
        pred = torch.tensor([[[0.0, 0.5, 2.0]]], dtype=torch.float64)
        target = torch.zeros(1, 1, 3, dtype=torch.float64)
        _, per_token = smooth_l1(pred, target)
        assert per_token.shape == (1, 1)
        assert math.isclose(float(per_token), (0.0 + 0.125 + 1.5) / 3)

    def test_zero_error(self):
        x = torch.randn(2, 3, 4)
        scalar, per_token = smooth_l1(x, x.clone())
        assert float(scalar) == 0.0 and (per_token == 0).all()

    def test_valid_mask_excludes_slots(self):
        pred = torch.tensor([[[1.0], [100.0]]])
        target = torch.zeros(1, 2, 1)
        valid = torch.tensor([[True, False]])
        scalar, _ = smooth_l1(pred, target, valid)
        assert float(scalar) == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            smooth_l1(torch.zeros(1, 2, 3), torch.zeros(1, 2, 4))

    def test_no_valid_tokens(self):
        with pytest.raises(ValueError, match="valid"):
            smooth_l1(torch.zeros(1, 2, 3), torch.zeros(1, 2, 3), torch.zeros(1, 2, dtype=torch.bool))


class TestBuildAndInit:
    def test_same_seed_bit_identical(self):
        a, b = tiny_models(seed=3), tiny_models(seed=3)
        for p, q in zip(a.student.parameters(), b.student.parameters()):
            assert torch.equal(p, q)
        for p, q in zip(a.predictor.parameters(), b.predictor.parameters()):
            assert torch.equal(p, q)

    def test_different_seed_differs(self):
        a, b = tiny_models(seed=3), tiny_models(seed=4)
        assert not torch.equal(a.student.proj.weight, b.student.proj.weight)

    def test_teacher_starts_as_student_copy(self):
        bundle = tiny_models()
        for p, q in zip(bundle.student.parameters(), bundle.teacher.parameters()):
            assert torch.equal(p, q)
            assert p is not q

    def test_teacher_requires_no_grad(self):
        bundle = tiny_models()
        assert all(not p.requires_grad for p in bundle.teacher.parameters())
        assert bundle.trainable_modules() == [bundle.student, bundle.predictor]

    def test_everything_float64(self):
        bundle = tiny_models()
        for module in (bundle.student, bundle.teacher, bundle.predictor):
            assert all(p.dtype == torch.float64 for p in module.parameters())
