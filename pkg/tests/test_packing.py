import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jepalite.packing import (
    OversizeSampleError,
    PackerConfig,
    PackingStream,
    build_mask,
    occupancy,
    pack,
)

from helpers import batch_row_assignment, make_batch, make_patched_sample, reference_first_fit


def samples_from_sizes(sizes):
    return [make_patched_sample(sid, n, m) for sid, n, m in sizes]


class TestPack:
    def test_worked_first_fit_example(self):
        cfg = PackerConfig(batch_rows=2, context_capacity=4, target_capacity=4)
        sizes = [(1, 3, 2), (2, 2, 3), (3, 1, 1), (4, 4, 4)]
        batch, carry = pack(samples_from_sizes(sizes), cfg)
        assert batch_row_assignment(batch) == [[1, 3], [2]]
        assert [s.sample_id for s in carry] == [4]

    def test_single_sample_full_occupancy(self):
        batch = make_batch([make_patched_sample(1, 4, 6)], rows=1, ctx_cap=4, tgt_cap=6)
        assert occupancy(batch) == (1.0, 1.0)

    def test_empty_queue(self):
        cfg = PackerConfig(batch_rows=2, context_capacity=4, target_capacity=4)
        batch, carry = pack([], cfg)
        assert occupancy(batch) == (0.0, 0.0)
        assert carry == []

    def test_partial_occupancy_counts(self):
        sizes = [(1, 3, 2), (2, 2, 2)]
        batch = make_batch(samples_from_sizes(sizes), rows=2, ctx_cap=4, tgt_cap=4)
        assert occupancy(batch) == (5 / 8, 4 / 8)

    def test_co_residency_and_conservation(self):
        sizes = [(i, 2 + i % 3, 3 + i % 4) for i in range(1, 9)]
        samples = samples_from_sizes(sizes)
        cfg = PackerConfig(batch_rows=3, context_capacity=8, target_capacity=10)
        batch, carry = pack(samples, cfg)
        placed = {s.sample_id: s for s in samples}
        for sid, s in placed.items():
            in_ctx = np.nonzero((batch.ctx_sample_ids == sid).any(axis=1))[0]
            in_tgt = np.nonzero((batch.tgt_sample_ids == sid).any(axis=1))[0]
            if sid in {c.sample_id for c in carry}:
                assert in_ctx.size == 0 and in_tgt.size == 0
                continue
            assert in_ctx.tolist() == in_tgt.tolist() and in_ctx.size == 1
            row = in_ctx[0]
            ctx_slots = batch.ctx_sample_ids[row] == sid
            assert int(ctx_slots.sum()) == s.n_context
            assert np.array_equal(batch.ctx_tokens[row][ctx_slots], s.context_tokens)
            tgt_slots = batch.tgt_sample_ids[row] == sid
            assert int(tgt_slots.sum()) == s.n_target
            assert np.array_equal(batch.tgt_tokens[row][tgt_slots], s.target_tokens)
            assert np.array_equal(batch.tgt_positions[row][tgt_slots], s.target_positions)

    def test_padding_slots_are_zero(self):
        batch = make_batch([make_patched_sample(1, 2, 2)], rows=2, ctx_cap=4, tgt_cap=4)
        pad = batch.ctx_sample_ids == 0
        assert np.all(batch.ctx_tokens[pad] == 0)
        assert np.all(batch.ctx_positions[pad] == 0)

    def test_oversize_sample_named_in_error(self):
        cfg = PackerConfig(batch_rows=1, context_capacity=2, target_capacity=2)
        with pytest.raises(OversizeSampleError, match="sample 7"):
            pack([make_patched_sample(7, 3, 1)], cfg)

    def test_duplicate_ids_rejected(self):
        cfg = PackerConfig(batch_rows=2, context_capacity=8, target_capacity=8)
        with pytest.raises(ValueError, match="duplicate"):
            pack([make_patched_sample(1, 2, 2), make_patched_sample(1, 2, 2)], cfg)

    def test_carryover_preserves_order(self):
        cfg = PackerConfig(batch_rows=1, context_capacity=4, target_capacity=4)
        sizes = [(1, 4, 4), (2, 3, 3), (3, 2, 2), (4, 1, 1)]
        _, carry = pack(samples_from_sizes(sizes), cfg)
        assert [s.sample_id for s in carry] == [2, 3, 4]

    @settings(max_examples=40, deadline=None)
    @given(data=st.data(), rows=st.integers(1, 4))
    def test_matches_reference_first_fit(self, data, rows):
        n_samples = data.draw(st.integers(0, 12))
        sizes = [
            (i + 1, data.draw(st.integers(1, 6)), data.draw(st.integers(1, 8)))
            for i in range(n_samples)
        ]
        cfg = PackerConfig(batch_rows=rows, context_capacity=6, target_capacity=8)
        batch, carry = pack(samples_from_sizes(sizes), cfg)
        ref_rows, ref_carry = reference_first_fit(sizes, cfg)
        assert batch_row_assignment(batch) == [ids for ids in ref_rows]
        assert [s.sample_id for s in carry] == ref_carry


class TestPackingStream:
    def test_emits_on_first_misfit(self):
        cfg = PackerConfig(batch_rows=1, context_capacity=4, target_capacity=8)
        stream = PackingStream(cfg)
        assert stream.feed(make_patched_sample(1, 3, 4)) is None
        batch = stream.feed(make_patched_sample(2, 2, 2))
        assert batch is not None
        assert batch_row_assignment(batch) == [[1]]
        assert stream.samples_emitted == 1
        # the misfit seeds the next batch
        follow = stream.flush()
        assert batch_row_assignment(follow) == [[2]]
        assert stream.samples_emitted == 2

    def test_flush_empty_returns_none(self):
        stream = PackingStream(PackerConfig(batch_rows=1, context_capacity=4, target_capacity=4))
        assert stream.flush() is None

    def test_oversize_feed_rejected(self):
        stream = PackingStream(PackerConfig(batch_rows=1, context_capacity=2, target_capacity=2))
        with pytest.raises(OversizeSampleError):
            stream.feed(make_patched_sample(1, 5, 1))

    def test_stream_deterministic_function_of_sequence(self):
        cfg = PackerConfig(batch_rows=2, context_capacity=6, target_capacity=6)
        rng = np.random.default_rng(0)
        sizes = [(i + 1, int(rng.integers(1, 5)), int(rng.integers(1, 5))) for i in range(30)]

        def run():
            stream = PackingStream(cfg)
            out = []
            for s in samples_from_sizes(sizes):
                b = stream.feed(s)
                if b is not None:
                    out.append(batch_row_assignment(b))
            return out

        assert run() == run()

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_conservation_across_emitted_batches(self, seed):
        rng = np.random.default_rng(seed)
        cfg = PackerConfig(batch_rows=2, context_capacity=6, target_capacity=8)
        sizes = [(i + 1, int(rng.integers(1, 7)), int(rng.integers(1, 9))) for i in range(25)]
        stream = PackingStream(cfg)
        seen = []
        for s in samples_from_sizes(sizes):
            b = stream.feed(s)
            if b is not None:
                seen.extend(sid for row in batch_row_assignment(b) for sid in row)
        final = stream.flush()
        if final is not None:
            seen.extend(sid for row in batch_row_assignment(final) for sid in row)
        assert sorted(seen) == [sid for sid, _, _ in sizes]
        assert stream.samples_emitted == len(sizes)


class TestBuildMask:
    def test_worked_example(self):
        allowed = build_mask(np.array([1, 1, 2, 0]))
        expect = np.zeros((4, 4), dtype=bool)
        for i, j in [(0, 0), (0, 1), (1, 0), (1, 1), (2, 2)]:
            expect[i, j] = True
        assert np.array_equal(allowed, expect)

    def test_all_same_sample(self):
        assert build_mask(np.array([3, 3, 3])).all()

    def test_all_padding(self):
        assert not build_mask(np.zeros(4, dtype=np.int64)).any()

    def test_symmetric_and_batched(self):
        ids = np.array([[1, 2, 0], [4, 4, 4]])
        allowed = build_mask(ids)
        assert allowed.shape == (2, 3, 3)
        assert np.array_equal(allowed, np.swapaxes(allowed, 1, 2))

    def test_block_structure_per_packed_row(self):
        batch = make_batch(
            [make_patched_sample(1, 2, 3), make_patched_sample(2, 3, 2)],
            rows=1, ctx_cap=6, tgt_cap=6,
        )
        row_ids = np.concatenate([batch.ctx_sample_ids[0], batch.tgt_sample_ids[0]])
        allowed = build_mask(row_ids)
        for i, a in enumerate(row_ids):
            for j, b in enumerate(row_ids):
                assert allowed[i, j] == (a == b and a != 0)


class TestOccupancyBench:
    def test_synthetic_workload_mean_occupancy(self):
        rng = np.random.default_rng(0)
        cfg = PackerConfig(batch_rows=32, context_capacity=64, target_capacity=192)
        stream = PackingStream(cfg)
        occs = []
        for i in range(10_000):
            n = int(rng.integers(4, 9))
            m = int(rng.integers(8, 25))
            b = stream.feed(make_patched_sample(i + 1, n, m, token_dim=2))
            if b is not None:
                occs.append(occupancy(b))
        mean_all = np.mean([(c + t) / 2 for c, t in occs])
        assert len(occs) > 10
        assert mean_all > 0.85
