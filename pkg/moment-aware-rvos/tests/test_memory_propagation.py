"""Unit tests for the memory bank, decoder and moment-aware routing."""

import math
import pytest
import sys
import os
import numpy as np

# Add parent directories to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../..')))
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from moment_algebra import MomentSet
from tensor_autodiff import Tensor
from cross_modal_adapter import TextPrompt
from memory_propagation import (
    MaskGeometry, PropagationSettings, PropagationModel, PropagationState, MemoryBank, MemoryEntry,
    MemoryParams, DecoderParams, init_memory_params, init_decoder_params, memory_encode,
    memory_readout, memory_attend, decode_mask, binarize, mdp_step, propagation_order,
    run_inference, RoutingError, BankPurityError, MemoryResolutionError, RELEVANT, IRRELEVANT,
)

GEOMETRY = MaskGeometry(grid=(2, 2), image=(4, 4))
CHANNELS = 3
PROMPT_DIM = 3


def small_model(seed=0, **settings):
    rng = np.random.default_rng(seed)
    return PropagationModel(
        memory=init_memory_params(CHANNELS, 2, rng, value_scale=1.0),
        decoder=init_decoder_params(CHANNELS, PROMPT_DIM, 2, rng),
        geometry=GEOMETRY,
        settings=PropagationSettings(**settings),
    )


def random_features(rng):
    return Tensor.constant(rng.normal(size=(GEOMETRY.cells, CHANNELS)))


def entry(frame, value=0.0):
    return MemoryEntry(frame, Tensor.constant(np.full((GEOMETRY.cells, CHANNELS), value)))


def brute_nearest(frames, t, k=6):
    return tuple(sorted(sorted(frames, key=lambda i: (abs(i - t), i))[:k]))


class TestMemoryBank:
    """Ordering, eviction, purity and the attention neighbourhood."""

    def test_entries_stay_ordered_and_unique(self):
        bank = MemoryBank(capacity=8)
        for frame in (5, 2, 7, 2):
            bank.add(entry(frame))
        assert bank.frame_indices == (2, 5, 7)

    def test_evicts_farthest_from_current(self):
        bank = MemoryBank(capacity=2)
        bank.add(entry(1))
        bank.add(entry(2))
        evicted = bank.add(entry(5), current=5)
        assert evicted.frame_index == 1
        assert bank.frame_indices == (2, 5)

    def test_eviction_tie_drops_earlier_frame(self):
        bank = MemoryBank(capacity=2)
        bank.add(entry(2))
        bank.add(entry(6))
        bank.add(entry(4), current=4)
        assert bank.frame_indices == (4, 6)

    def test_rejects_frames_outside_allowed_set(self):
        bank = MemoryBank(capacity=4, allowed=frozenset({1, 2}))
        bank.add(entry(1))
        with pytest.raises(BankPurityError):
            bank.add(entry(3))
        assert bank.frame_indices == (1,)

    def test_nearest_six_of_eight_at_frame_five(self):
        bank = MemoryBank(capacity=8)
        for frame in (1, 2, 3, 4, 6, 7, 8, 9):
            bank.add(entry(frame))
        selected = tuple(e.frame_index for e in bank.nearest(5, 6))
        assert selected == (2, 3, 4, 6, 7, 8)
        assert selected == brute_nearest(bank.frame_indices, 5)

    def test_nearest_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            frames = rng.choice(np.arange(1, 30), size=rng.integers(1, 10), replace=False)
            bank = MemoryBank(capacity=10)
            for frame in frames:
                bank.add(entry(int(frame)))
            t = int(rng.integers(1, 30))
            got = tuple(e.frame_index for e in bank.nearest(t, 6))
            assert got == brute_nearest([int(f) for f in frames], t)


class TestMemoryEncode:
    """Fusion of features with the squashed soft mask."""

    def test_zero_mask_leaves_feature_projection(self):
        rng = np.random.default_rng(2)
        params = init_memory_params(CHANNELS, 2, rng)
        features = random_features(rng)
        fused = memory_encode(features, Tensor.zeros((4, 4)), 1, params, GEOMETRY).fused
        np.testing.assert_allclose(fused.data, features.data @ params.w_fuse.data[:CHANNELS], atol=1e-12)

    def test_identical_inputs_identical_entries(self):
        rng = np.random.default_rng(3)
        params = init_memory_params(CHANNELS, 2, rng)
        features = random_features(rng)
        mask = Tensor.constant(rng.normal(size=(4, 4)))
        a = memory_encode(features, mask, 2, params, GEOMETRY)
        b = memory_encode(features, mask, 2, params, GEOMETRY)
        assert a.fused.data.tobytes() == b.fused.data.tobytes()

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            params = init_memory_params(CHANNELS, 2, rng)
            params.b_fuse = Tensor.constant(rng.normal(size=(1, CHANNELS)))
            features = rng.normal(size=(4, CHANNELS))
            mask = rng.normal(size=(4, 4)) * 3
            fused = memory_encode(Tensor.constant(features), Tensor.constant(mask), 1, params, GEOMETRY).fused
            for cell in range(4):
                cy, cx = divmod(cell, 2)
                squashed = [2.0 / (1.0 + math.exp(-mask[y, x])) - 1.0
                            for y in range(cy * 2, cy * 2 + 2) for x in range(cx * 2, cx * 2 + 2)]
                row = list(features[cell]) + [sum(squashed) / 4]
                want = [sum(row[i] * params.w_fuse.data[i, j] for i in range(CHANNELS + 1)) + params.b_fuse.data[0, j]
                        for j in range(CHANNELS)]
                np.testing.assert_allclose(fused.data[cell], want, atol=1e-12)

    def test_resolution_mismatch(self):
        rng = np.random.default_rng(5)
        params = init_memory_params(CHANNELS, 2, rng)
        with pytest.raises(MemoryResolutionError):
            memory_encode(Tensor.constant(np.ones((9, CHANNELS))), Tensor.zeros((4, 4)), 1, params, GEOMETRY)
        with pytest.raises(MemoryResolutionError):
            memory_encode(random_features(rng), Tensor.zeros((6, 6)), 1, params, GEOMETRY)


class TestMemoryAttend:
    """Readout over the nearest entries."""

    def test_empty_bank_is_identity(self):
        rng = np.random.default_rng(6)
        params = init_memory_params(CHANNELS, 2, rng)
        query = random_features(rng)
        assert memory_attend(query, MemoryBank(), 3, params) is query

    def test_constant_cells_read_back(self):
        rng = np.random.default_rng(7)
        params = MemoryParams(
            w_fuse=Tensor.constant(np.zeros((CHANNELS + 1, CHANNELS))),
            b_fuse=Tensor.constant(np.zeros((1, CHANNELS))),
            w_q=Tensor.constant(rng.normal(size=(CHANNELS, 2))),
            w_k=Tensor.constant(rng.normal(size=(CHANNELS, 2))),
            w_v=Tensor.constant(np.eye(CHANNELS)),
        )
        cell = np.array([0.5, -1.0, 2.0])
        stored = MemoryEntry(1, Tensor.constant(np.tile(cell, (GEOMETRY.cells, 1))))
        readout = memory_readout(Tensor.constant(np.tile(cell, (GEOMETRY.cells, 1))), [stored], params)
        np.testing.assert_allclose(readout.data, np.tile(cell, (GEOMETRY.cells, 1)), atol=1e-12)

    def test_residual_add(self):
        rng = np.random.default_rng(8)
        params = init_memory_params(CHANNELS, 2, rng)
        bank = MemoryBank()
        bank.add(MemoryEntry(2, random_features(rng)))
        query = random_features(rng)
        out = memory_attend(query, bank, 1, params)
        expected = query.data + memory_readout(query, bank.entries, params).data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


class TestDecodeMask:
    """Prompted and unprompted decoding."""

    def test_zero_everything_gives_zero(self):
        zeros = lambda *shape: Tensor.constant(np.zeros(shape))
        params = DecoderParams(zeros(PROMPT_DIM, 2), zeros(CHANNELS, 2), zeros(CHANNELS, PROMPT_DIM),
                               zeros(CHANNELS, PROMPT_DIM), zeros(1, 1), zeros(1, PROMPT_DIM))
        soft = decode_mask(zeros(GEOMETRY.cells, CHANNELS), None, params, GEOMETRY)
        assert soft.shape == (4, 4)
        assert not soft.data.any()

    def test_output_shape(self):
        rng = np.random.default_rng(9)
        geometry = MaskGeometry(grid=(2, 3), image=(8, 12))
        params = init_decoder_params(CHANNELS, PROMPT_DIM, 2, rng)
        soft = decode_mask(Tensor.constant(rng.normal(size=(6, CHANNELS))), None, params, geometry)
        assert soft.shape == (8, 12)

    def test_prompt_changes_output(self):
        rng = np.random.default_rng(10)
        params = init_decoder_params(CHANNELS, PROMPT_DIM, 2, rng)
        features = random_features(rng)
        prompt = TextPrompt(Tensor.constant(rng.normal(size=(1, PROMPT_DIM))))
        with_prompt = decode_mask(features, prompt, params, GEOMETRY)
        without = decode_mask(features, None, params, GEOMETRY)
        assert not np.allclose(with_prompt.data, without.data)

    def test_constant_cells_upsample_to_constant(self):
        rng = np.random.default_rng(11)
        params = init_decoder_params(CHANNELS, PROMPT_DIM, 2, rng)
        features = Tensor.constant(np.tile(rng.normal(size=CHANNELS), (GEOMETRY.cells, 1)))
        soft = decode_mask(features, None, params, GEOMETRY)
        np.testing.assert_allclose(soft.data, soft.data[0, 0], atol=1e-12)


class TestBinarize:
    """Strict threshold at zero."""

    def test_zero_is_background(self):
        assert not binarize(np.zeros((3, 3))).any()

    def test_small_example(self):
        np.testing.assert_array_equal(binarize(Tensor.constant([[-1.0, 2.0]])), [[0, 1]])

    def test_matches_elementwise_scan(self):
        values = np.random.default_rng(12).normal(size=(5, 7))
        got = binarize(values)
        for index in np.ndindex(values.shape):
            assert got[index] == (1 if values[index] > 0 else 0)


class TestMdpStep:
    """Per-frame routing."""

    def test_irrelevant_frame_on_empty_bank(self):
        model = small_model(13)
        rng = np.random.default_rng(14)
        f_sam = random_features(rng)
        prompt = TextPrompt(Tensor.constant(rng.normal(size=(1, PROMPT_DIM))))
        state = PropagationState.fresh(model.settings)
        soft, state = mdp_step(2, IRRELEVANT, random_features(rng), f_sam, prompt, state, model)
        expected = decode_mask(f_sam, None, model.decoder, GEOMETRY)
        np.testing.assert_array_equal(soft.data, expected.data)
        assert len(state.bank) == 0
        assert state.trace[-1].query_source == "encoder"

    def test_relevant_frame_grows_bank_by_one(self):
        model = small_model(15)
        rng = np.random.default_rng(16)
        prompt = TextPrompt(Tensor.constant(rng.normal(size=(1, PROMPT_DIM))))
        state = PropagationState.fresh(model.settings)
        for t in (1, 2, 3):
            before = len(state.bank)
            mdp_step(t, RELEVANT, random_features(rng), None, prompt, state, model)
            assert len(state.bank) == before + 1
        assert state.trace[-1].prompt_used

    def test_missing_features(self):
        model = small_model(17)
        rng = np.random.default_rng(18)
        prompt = TextPrompt(Tensor.constant(rng.normal(size=(1, PROMPT_DIM))))
        state = PropagationState.fresh(model.settings)
        with pytest.raises(RoutingError):
            mdp_step(1, RELEVANT, None, random_features(rng), prompt, state, model)
        with pytest.raises(RoutingError):
            mdp_step(1, IRRELEVANT, random_features(rng), None, prompt, state, model)
        with pytest.raises(RoutingError):
            mdp_step(1, "maybe", random_features(rng), random_features(rng), prompt, state, model)

    def test_routing_off_uses_adapter_and_prompt(self):
        model = small_model(19, feature_routing=False)
        rng = np.random.default_rng(20)
        prompt = TextPrompt(Tensor.constant(rng.normal(size=(1, PROMPT_DIM))))
        state = PropagationState.fresh(model.settings)
        f_adp = random_features(rng)
        mdp_step(1, IRRELEVANT, f_adp, random_features(rng), prompt, state, model)
        record = state.trace[-1]
        assert record.query_source == "adapter" and record.prompt_used and record.query_ref == id(f_adp)
        assert len(state.bank) == 0

    def test_full_memory_stores_irrelevant_frames(self):
        model = small_model(21, plus_only_memory=False)
        rng = np.random.default_rng(22)
        prompt = TextPrompt(Tensor.constant(rng.normal(size=(1, PROMPT_DIM))))
        state = PropagationState.fresh(model.settings, MomentSet.of([1], 3))
        mdp_step(2, IRRELEVANT, None, random_features(rng), prompt, state, model)
        assert state.bank.frame_indices == (2,)
        assert not state.bank.entries[0].is_relevant


def make_inputs(rng, length):
    f_adp = {t: random_features(rng) for t in range(1, length + 1)}
    f_sam = {t: random_features(rng) for t in range(1, length + 1)}
    prompt = TextPrompt(Tensor.constant(rng.normal(size=(1, PROMPT_DIM))))
    return f_adp, f_sam, prompt


class TestRunInference:
    """Two-pass propagation."""

    def test_pass_two_order(self):
        assert propagation_order(MomentSet.of([3], 5), [3, 1, 2, 4, 5]) == [3, 2, 4, 1, 5]

    def test_all_relevant_has_no_second_pass(self):
        mplus = MomentSet.full(4)
        assert propagation_order(mplus, [2, 4, 1, 3]) == [2, 4, 1, 3]

    def test_rejects_bad_orders(self):
        mplus = MomentSet.of([1, 2], 4)
        with pytest.raises(RoutingError):
            propagation_order(mplus, [1, 2, 3])
        with pytest.raises(RoutingError):
            propagation_order(mplus, [1, 3, 2, 4])
        with pytest.raises(RoutingError):
            propagation_order(MomentSet.empty(4), [1, 2, 3, 4])

    def test_worked_example(self):
        model = small_model(23)
        f_adp, f_sam, prompt = make_inputs(np.random.default_rng(24), 5)
        mplus = MomentSet.of([1, 2, 3, 5], 5)
        result = run_inference(f_adp, f_sam, prompt, mplus, [1, 2, 3, 5, 4], model)
        assert result.masks.shape == (5, 4, 4)
        frame4 = [r for r in result.state.trace if r.frame == 4][0]
        assert not frame4.prompt_used
        assert frame4.query_ref == id(f_sam[4])
        assert set(frame4.attended) <= {1, 2, 3, 5}
        for record in result.state.trace:
            assert set(record.bank_after) <= {1, 2, 3, 5}
        assert result.state.bank.frame_indices == (1, 2, 3, 5)

    def test_masks_in_temporal_order(self):
        model = small_model(25)
        f_adp, f_sam, prompt = make_inputs(np.random.default_rng(26), 4)
        result = run_inference(f_adp, f_sam, prompt, MomentSet.of([3], 4), [3, 1, 2, 4], model)
        for t in range(1, 5):
            np.testing.assert_array_equal(result.masks[t - 1], binarize(result.soft_masks[t]))

    def test_deterministic(self):
        model = small_model(27)
        f_adp, f_sam, prompt = make_inputs(np.random.default_rng(28), 5)
        mplus = MomentSet.of([2, 4], 5)
        a = run_inference(f_adp, f_sam, prompt, mplus, [2, 4, 1, 3, 5], model)
        b = run_inference(f_adp, f_sam, prompt, mplus, [2, 4, 1, 3, 5], model)
        for t in range(1, 6):
            assert a.soft_masks[t].data.tobytes() == b.soft_masks[t].data.tobytes()

    def test_routing_fuzz(self):
        rng = np.random.default_rng(29)
        model = small_model(30, capacity=3, window=2)
        for _ in range(1000):
            length = int(rng.integers(1, 7))
            f_adp, f_sam, prompt = make_inputs(rng, length)
            frames = np.arange(1, length + 1)
            members = set(int(f) for f in rng.choice(frames, size=rng.integers(1, length + 1), replace=False))
            plus = [int(f) for f in rng.permutation(sorted(members))]
            minus = [int(f) for f in rng.permutation([f for f in frames if f not in members])]
            result = run_inference(f_adp, f_sam, prompt, MomentSet.of(members, length), plus + minus, model)

            bank_before = ()
            for record in result.state.trace:
                relevant = record.frame in members
                assert record.prompt_used == relevant
                expected_ref = f_adp[record.frame] if relevant else f_sam[record.frame]
                assert record.query_ref == id(expected_ref)
                assert record.attended == brute_nearest(bank_before, record.frame, 2)
                assert set(record.bank_after) <= members
                assert len(record.bank_after) <= 3
                bank_before = record.bank_after
            assert sorted(r.frame for r in result.state.trace) == list(range(1, length + 1))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
