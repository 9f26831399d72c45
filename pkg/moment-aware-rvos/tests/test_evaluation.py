"""Unit tests for segmentation and retrieval metrics."""

import pytest
import sys
import os
import numpy as np

# Add parent directories to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../..')))
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from dataset_io import ExpressionRecord, PredictedMasks, PredictedSegments, VideoSample
from moment_algebra import MomentSet
from evaluation import (
    MetricInputError, EvalReport, boundary_pixels, region_similarity, contour_accuracy, jf_mean,
    interval_iou, recall_at_iou, average_precision, map_at_iou, top1_keyframe_accuracy,
    evaluate_predictions, retrieval_metrics, default_tolerance,
)


def square(size=16, top=4, left=4, side=8):
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[top:top + side, left:left + side] = 1
    return mask


def square_video(video_id="v", frames=4, moment=(2, 3)):
    masks = np.stack([square() for _ in range(frames)])
    expression = ExpressionRecord(tokens=(1, 2, 3), verb_indices=(3,), referred_object_ids=("1",))
    return VideoSample(video_id, np.zeros((frames, 16, 16, 3), dtype=np.uint8), {"1": masks},
                       {"1": tuple(moment)}, [expression])


class TestRegionSimilarity:
    """Jaccard index per frame."""

    def test_two_by_two(self):
        pred = np.array([[1, 1], [0, 0]])
        gt = np.array([[1, 0], [1, 0]])
        assert region_similarity(pred, gt) == pytest.approx(1 / 3)

    def test_both_empty(self):
        assert region_similarity(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_one_empty(self):
        assert region_similarity(np.zeros((3, 3)), np.ones((3, 3))) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(MetricInputError):
            region_similarity(np.zeros((2, 2)), np.zeros((2, 3)))


class TestContourAccuracy:
    """Boundary F-measure."""

    def test_full_mask_boundary_is_image_border(self):
        boundary = boundary_pixels(np.ones((4, 4)))
        assert boundary.sum() == 12
        assert not boundary[1:3, 1:3].any()

    def test_identical_masks(self):
        assert contour_accuracy(square(), square(), tol=0) == 1.0

    def test_shift_within_tolerance(self):
        assert contour_accuracy(square(top=5), square(), tol=1) == 1.0

    def test_shift_beyond_zero_tolerance(self):
        assert contour_accuracy(square(top=5), square(), tol=0) < 1.0

    def test_empty_cases(self):
        assert contour_accuracy(np.zeros((8, 8)), np.zeros((8, 8))) == 1.0
        assert contour_accuracy(square(size=8, top=2, left=2, side=3), np.zeros((8, 8))) == 0.0

    def test_default_tolerance(self):
        assert default_tolerance((32, 32)) == 1
        assert default_tolerance((480, 854)) == 8

    def test_far_apart_scores_zero(self):
        a = square(size=32, top=0, left=0, side=4)
        b = square(size=32, top=20, left=20, side=4)
        assert contour_accuracy(a, b, tol=2) == 0.0

    def test_jf_mean(self):
        assert jf_mean(0.5, 1.0) == 0.75


class TestRetrievalMetrics:
    """Interval IoU, recall, AP and top-1 keyframe accuracy."""

    def test_interval_iou(self):
        assert interval_iou((2, 8), (4, 10)) == pytest.approx(5 / 9)
        assert interval_iou((1, 2), (3, 4)) == 0.0
        assert interval_iou((3, 3), (3, 3)) == 1.0

    def test_recall_uses_top_prediction_only(self):
        preds = [[(2, 8), (4, 10)], [(1, 1)]]
        gts = [[(4, 10)], [(5, 6)]]
        assert recall_at_iou(preds, gts, 0.5) == 0.5
        assert recall_at_iou(preds, gts, 0.7) == 0.0

    def test_recall_rejects_empty_predictions(self):
        with pytest.raises(MetricInputError):
            recall_at_iou([[]], [[(1, 2)]], 0.5)

    def test_average_precision_fixture(self):
        gts = [(1, 4), (8, 10)]
        ranked = [(1, 4, 0.9), (5, 6, 0.8), (8, 9, 0.7)]
        # hit, miss, hit: envelope precision 1 up to recall 0.5, then 2/3
        assert average_precision(ranked, gts, 0.5) == pytest.approx(0.5 + 0.5 * 2 / 3)

    def test_one_to_one_matching(self):
        ranked = [(1, 4, 0.9), (1, 4, 0.8)]
        assert average_precision(ranked, [(1, 4)], 0.5) == 1.0
        assert average_precision(ranked, [(1, 4), (1, 4)], 0.5) == 1.0

    def test_score_order_wins_over_list_order(self):
        ranked = [(5, 6, 0.1), (1, 4, 0.9)]
        assert average_precision(ranked, [(1, 4)], 0.5) == 1.0

    def test_map_thresholds(self):
        result = map_at_iou([[(2, 8, 1.0)]], [[(4, 10)]])
        assert result[0.5] == 1.0
        assert result[0.75] == 0.0
        assert result["mean"] == pytest.approx(0.2)  # only 0.5 and 0.55 are reached

    def test_top1_excludes_full_span(self):
        moments = [
            MomentSet.of([1, 2], 5), MomentSet.of([3], 5), MomentSet.of([4, 5], 5), MomentSet.full(5),
        ]
        assert top1_keyframe_accuracy([2, 3, 1, 1], moments) == pytest.approx(2 / 3)

    def test_top1_length_mismatch(self):
        with pytest.raises(MetricInputError):
            top1_keyframe_accuracy([1], [])


class TestEvaluatePredictions:
    """Corpus reports over prediction files."""

    def test_perfect_prediction(self):
        sample = square_video()
        report = evaluate_predictions([sample], [PredictedMasks("v", 0, sample.objects["1"].copy())])
        assert report.corpus == {"J": 1.0, "F": 1.0, "JF": 1.0}
        assert report.to_json()["corpus"]["JF"] == 100.0

    def test_empty_prediction(self):
        sample = square_video()
        report = evaluate_predictions([sample], [PredictedMasks("v", 0, np.zeros((4, 16, 16), dtype=np.uint8))])
        assert report.corpus["J"] == 0.0 and report.corpus["F"] == 0.0

    def test_worker_count_does_not_change_results(self):
        rng = np.random.default_rng(0)
        samples = [square_video(f"v{i}") for i in range(6)]
        preds = [PredictedMasks(s.video_id, 0, (rng.random((4, 16, 16)) < 0.3).astype(np.uint8)) for s in samples]
        serial = evaluate_predictions(samples, preds, workers=1)
        parallel = evaluate_predictions(samples, preds, workers=4)
        assert serial.corpus == parallel.corpus
        assert [r.video_id for r in parallel.per_expression] == [s.video_id for s in samples]

    def test_unknown_video(self):
        with pytest.raises(MetricInputError):
            evaluate_predictions([square_video()], [PredictedMasks("other", 0, np.zeros((4, 16, 16)))])

    def test_shape_mismatch(self):
        with pytest.raises(MetricInputError):
            evaluate_predictions([square_video()], [PredictedMasks("v", 0, np.zeros((3, 16, 16)))])

    def test_table_lists_metrics(self):
        report = EvalReport(corpus={"J": 0.5, "F": 0.25})
        table = report.to_table()
        assert "J" in table and "50.0" in table and "25.0" in table

    def test_retrieval_report(self):
        sample = square_video(frames=10, moment=(4, 5, 6, 7, 8, 9, 10))
        preds = [PredictedSegments("v", 0, [(1, 2, 0.1), (4, 10, 0.9)])]
        metrics = retrieval_metrics([sample], preds, {("v", 0): 5})
        assert metrics["R1_50"] == 1.0 and metrics["R1_70"] == 1.0
        assert metrics["mAP_50"] == 1.0 and metrics["mAP"] == 1.0
        assert metrics["top1"] == 1.0


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
