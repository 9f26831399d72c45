"""Unit tests for the synthetic benchmark generator."""

import json
import pytest
import sys
import os
import numpy as np

# Add parent directories to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../..')))
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from config import SynthConfig
from dataset_io import validate_dataset, parse_dataset, write_dataset
from synth_bench import (
    SceneError, SceneSpec, ObjectSpec, ActionSegment, VOCABULARY, COLORS, render_scene, shape_mask,
    make_expression, build_video, generate_dataset, generate_video, write_manifest, action_labels, trajectory, random_scene,
)


def still_square(origin=(4, 4), size=6, frames=8, color="red"):
    return ObjectSpec("square", color, size, origin, (ActionSegment("still", 1, frames),))


def two_squares(frames=16):
    mover = ObjectSpec("square", "red", 5, (10, 20),
                       (ActionSegment("moving_left", 1, 8), ActionSegment("still", 9, frames)))
    idle = still_square(origin=(2, 2), size=5, frames=frames)
    return SceneSpec(32, 32, frames, (mover, idle))


class TestRenderScene:
    """Rasterisation, masks and trails."""

    def test_still_square_masks_identical(self):
        spec = SceneSpec(16, 16, 8, (still_square(),))
        _, masks = render_scene(spec, seed=0)
        assert all(np.array_equal(masks["1"][0], m) for m in masks["1"])

    def test_square_area_exact(self):
        spec = SceneSpec(16, 16, 3, (still_square(size=6, frames=3),))
        _, masks = render_scene(spec, seed=0)
        assert masks["1"].sum(axis=(1, 2)).tolist() == [36, 36, 36]

    def test_disc_and_triangle_areas(self):
        disc = shape_mask("disc", 8).sum()
        assert abs(disc - np.pi * 16) / (np.pi * 16) < 0.15
        triangle = shape_mask("triangle", 8).sum()
        assert abs(triangle - 32) <= 8

    def test_deterministic(self):
        spec = two_squares()
        a, ma = render_scene(spec, seed=3)
        b, mb = render_scene(spec, seed=3)
        assert np.array_equal(a, b)
        assert all(np.array_equal(ma[k], mb[k]) for k in ma)

    def test_moving_object_leaves_trail_outside_mask(self):
        spec = two_squares()
        frames, masks = render_scene(spec, seed=0)
        # frame 2: square moved one pixel left; its trail sits one pixel to the right
        top, left = trajectory(spec.objects[0], spec.frames)[1]
        trail_col = left + 5
        assert not masks["1"][1, top, trail_col]
        assert tuple(frames[1, top, trail_col]) == tuple(np.array(COLORS["red"]) // 2)

    def test_still_object_has_no_trail(self):
        spec = SceneSpec(16, 16, 2, (still_square(size=4, frames=2),))
        frames, masks = render_scene(spec, seed=1)
        outside = frames[:, ~masks["1"][0].astype(bool)]
        assert outside.max() < 48

    def test_leaving_canvas_raises(self):
        runaway = ObjectSpec("square", "red", 5, (0, 0), (ActionSegment("moving_left", 1, 4),))
        with pytest.raises(SceneError):
            render_scene(SceneSpec(16, 16, 4, (runaway,)), seed=0)

    def test_segments_must_tile(self):
        gap = ObjectSpec("square", "red", 4, (4, 4), (ActionSegment("still", 1, 2), ActionSegment("still", 4, 5)))
        with pytest.raises(SceneError):
            action_labels(gap, 5)


class TestExpressions:
    """Expressions and their exact moments."""

    def test_two_squares_example(self):
        expression = make_expression(two_squares(), "red", "square", "moving_left")
        assert expression.referred_object_ids == ("1",)
        assert expression.moments == {"1": tuple(range(1, 9))}
        assert expression.text == "the red square moving left"
        assert expression.verb_indices == (4, 5)
        assert [expression.tokens[i - 1] for i in expression.verb_indices] == [VOCABULARY["moving"], VOCABULARY["left"]]

    def test_both_same_category_objects_referred_when_both_act(self):
        expression = make_expression(two_squares(), "red", "square", "still")
        assert expression.moments == {"1": tuple(range(9, 17)), "2": tuple(range(1, 17))}

    def test_full_span_single_object(self):
        sample = build_video("v", SceneSpec(16, 16, 6, (still_square(frames=6),)), [("red", "square", "still")])
        assert sample.moment_annotation(0).relevant_set().is_full_span
        assert sample.moment_annotation(0).irrelevant_set().is_empty

    def test_action_never_performed(self):
        with pytest.raises(SceneError):
            make_expression(two_squares(), "red", "square", "moving_up")


class TestGenerateDataset:
    """Random corpora."""

    @pytest.fixture
    def config(self):
        return SynthConfig(num_videos=12, eval_videos=3, frames=10, height=32, width=32)

    def test_corpus_validates(self, config):
        samples = generate_dataset(config, seed=5)
        assert len(samples) == 12
        assert validate_dataset(samples) == []

    def test_every_video_has_objects_and_expressions(self, config):
        for sample in generate_dataset(config, seed=6):
            assert len(sample.objects) >= 2
            assert sample.expressions

    def test_moments_match_action_labels(self, config):
        for index in range(10):
            rng = np.random.default_rng([7, 0, index])
            spec, expressions = random_scene(config, rng)
            for color, shape, action in expressions:
                record = make_expression(spec, color, shape, action)
                for oid, frames in record.moments.items():
                    labels = action_labels(spec.objects[int(oid) - 1], spec.frames)
                    assert frames == tuple(t for t, a in enumerate(labels, start=1) if a == action)

    def test_partial_moments_and_distractors_occur(self, config):
        samples = generate_dataset(config.model_copy(update={"distractor_prob": 1.0}), seed=8)
        partial = sum(not s.moment_annotation(0).relevant_set().is_full_span for s in samples)
        assert partial > 0
        assert all(len(s.objects) >= 2 for s in samples)

    def test_deterministic_and_worker_independent(self, config):
        a = generate_dataset(config, seed=9, workers=1)
        b = generate_dataset(config, seed=9, workers=4)
        assert a == b
        assert generate_video(config, 9, 3) == a[3]

    def test_splits_differ(self, config):
        assert generate_video(config, 1, 0, "train") != generate_video(config, 1, 0, "eval")
        with pytest.raises(SceneError):
            generate_video(config, 1, 0, "test")

    def test_document_round_trip(self, config):
        samples = generate_dataset(config, seed=10, count=2)
        assert parse_dataset(write_dataset(samples)) == samples

    def test_manifest(self, config, tmp_path):
        path = write_manifest(tmp_path / "manifest.json", config, 11, {"train": 12})
        manifest = json.loads(path.read_text())
        assert manifest["seed"] == 11 and manifest["counts"] == {"train": 12}
        assert len(manifest["config_hash"]) == 16


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
