"""Unit tests for the parameter bundle and the segmentation pipeline."""

import pytest
import sys
import os
import numpy as np

# Add parent directories to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../..')))
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from config import build_run_config
from dataset_io import VideoSample, ExpressionRecord
from moment_algebra import MomentSet
from memory_propagation import PropagationSettings
from model import ParameterStateError, SegmentationModel, init_model_params


def tiny_config(**flags):
    return build_run_config({
        "encoder": {"levels": 2, "visual_channels": [8, 12], "text_dim": 8},
        "adapter": {"bottleneck": 4, "prompt_hidden": 8, "attention_dim": 4},
        "flags": flags,
        "seed": 2,
    })


def noise_sample(frames=4, size=16):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 255, size=(frames, size, size, 3), dtype=np.uint8)
    mask = np.zeros((frames, size, size), dtype=np.uint8)
    mask[:, 2:6, 2:6] = 1
    expression = ExpressionRecord(tokens=(1, 2, 3), verb_indices=(3,), referred_object_ids=("1",))
    return VideoSample("noise", pixels, {"1": mask}, {"1": (1, 2)}, [expression])


class TestModelParams:
    """State dicts and initialisation."""

    def test_init_is_seeded(self):
        a = init_model_params(tiny_config()).state_dict()
        b = init_model_params(tiny_config()).state_dict()
        c = init_model_params(tiny_config(), seed=99).state_dict()
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert any(not np.array_equal(a[k], c[k]) for k in a)

    def test_names_are_unique_and_grouped(self):
        names = [n for n, _ in init_model_params(tiny_config()).named_parameters()]
        assert len(names) == len(set(names))
        assert any(n.startswith("memory.") for n in names)
        assert any(n.startswith("decoder.") for n in names)

    def test_state_dict_round_trip(self):
        source = init_model_params(tiny_config(), seed=5)
        target = init_model_params(tiny_config(), seed=6)
        target.load_state_dict(source.state_dict())
        state = target.state_dict()
        assert all(np.array_equal(state[k], v) for k, v in source.state_dict().items())

    def test_missing_name(self):
        params = init_model_params(tiny_config())
        state = params.state_dict()
        state.pop(next(iter(state)))
        with pytest.raises(ParameterStateError):
            params.load_state_dict(state)

    def test_shape_mismatch(self):
        params = init_model_params(tiny_config())
        state = params.state_dict()
        name = next(iter(state))
        state[name] = np.zeros(state[name].shape + (1,))
        with pytest.raises(ParameterStateError):
            params.load_state_dict(state)

    def test_num_parameters(self):
        params = init_model_params(tiny_config())
        assert params.num_parameters() == sum(v.size for v in params.state_dict().values())


class TestSegmentExpression:
    """End-to-end masks for one expression."""

    def test_output_shape_and_dtype(self):
        model = SegmentationModel(tiny_config())
        sample = noise_sample()
        result = model.segment_expression(sample, 0, MomentSet.of([1, 2], 4))
        assert result.masks.shape == (4, 16, 16)
        assert result.masks.dtype == np.uint8
        assert set(np.unique(result.masks)) <= {0, 1}

    def test_routing_follows_moments(self):
        model = SegmentationModel(tiny_config())
        result = model.segment_expression(noise_sample(), 0, MomentSet.of([2, 3], 4))
        sources = {step.frame: (step.query_source, step.prompt_used) for step in result.state.trace}
        assert sources[2] == ("adapter", True) and sources[3] == ("adapter", True)
        assert sources[1] == ("encoder", False) and sources[4] == ("encoder", False)

    def test_baseline_routes_every_frame_through_adapter(self):
        model = SegmentationModel(tiny_config())
        settings = PropagationSettings(feature_routing=False, plus_only_memory=False)
        result = model.segment_expression(noise_sample(), 0, MomentSet.full(4), settings=settings)
        assert all(step.query_source == "adapter" and step.prompt_used for step in result.state.trace)

    def test_deterministic(self):
        sample = noise_sample()
        a = SegmentationModel(tiny_config()).segment_expression(sample, 0, MomentSet.of([1], 4))
        b = SegmentationModel(tiny_config()).segment_expression(sample, 0, MomentSet.of([1], 4))
        assert np.array_equal(a.masks, b.masks)

    def test_feature_cache(self):
        model = SegmentationModel(tiny_config())
        sample = noise_sample()
        assert model.pyramid(sample) is model.pyramid(sample)
        model.clear_cache()
        assert not model._pyramids

    def test_moment_length_mismatch(self):
        model = SegmentationModel(tiny_config())
        with pytest.raises(ParameterStateError):
            model.segment_expression(noise_sample(), 0, MomentSet.of([1], 5))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
