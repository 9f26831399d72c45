"""Segmentation metrics (J, F, J&F) and moment-retrieval metrics.

Retrieval intervals are closed frame ranges ``(start, end)``; their IoU counts
frames.
"""

import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import MAP_THRESHOLDS
from errors import DataError
from moment_algebra import MomentSet, set_to_segments
from dataset_io import PredictedMasks, PredictedSegments, VideoSample

logger = logging.getLogger(__name__)

Interval = Tuple[int, int]


class MetricInputError(DataError):
    """Predictions and ground truth cannot be compared."""
    pass


# ---------------------------------------------------------------------------
# Region and contour accuracy
# ---------------------------------------------------------------------------

def _binary_pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricInputError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    return pred > 0, gt > 0


def region_similarity(pred: np.ndarray, gt: np.ndarray) -> float:
    """Jaccard index; 1 when both masks are empty."""
    pred, gt = _binary_pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a background 4-neighbour or on the image border."""
    mask = np.asarray(mask) > 0
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Chebyshev dilation by ``radius`` as two separable 1-d max filters."""
    if radius == 0:
        return mask.copy()
    out = mask
    for axis in (0, 1):
        padded = np.pad(out, [(radius, radius) if a == axis else (0, 0) for a in (0, 1)],
                        constant_values=False)
        n = out.shape[axis]
        grown = np.zeros_like(out)
        for offset in range(2 * radius + 1):
            grown |= np.take(padded, np.arange(offset, offset + n), axis=axis)
        out = grown
    return out


def default_tolerance(shape: Tuple[int, int]) -> int:
    return int(math.ceil(0.008 * math.hypot(shape[0], shape[1])))


def contour_accuracy(pred: np.ndarray, gt: np.ndarray, tol: Optional[int] = None) -> float:
    """Boundary F-measure with a Chebyshev tolerance of ``tol`` pixels.

    Args:
        pred: predicted binary mask
        gt: ground-truth binary mask
        tol: match radius (default ``ceil(0.008 * diagonal)``)
    """
    pred, gt = _binary_pair(pred, gt)
    tol = default_tolerance(pred.shape) if tol is None else tol
    if tol < 0:
        raise MetricInputError(f"tolerance must be non-negative, got {tol}")
    pred_b, gt_b = boundary_pixels(pred), boundary_pixels(gt)
    n_pred, n_gt = int(pred_b.sum()), int(gt_b.sum())
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0
    precision = (pred_b & _dilate(gt_b, tol)).sum() / n_pred
    recall = (gt_b & _dilate(pred_b, tol)).sum() / n_gt
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def jf_mean(j: float, f: float) -> float:
    return (j + f) / 2.0


# ---------------------------------------------------------------------------
# Moment retrieval
# ---------------------------------------------------------------------------

def interval_iou(a: Interval, b: Interval) -> float:
    """IoU of two closed frame intervals, counting frames."""
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def recall_at_iou(predictions: Sequence[Sequence[Interval]], ground_truth: Sequence[Sequence[Interval]],
                  threshold: float) -> float:
    """Share of queries whose top-ranked interval reaches ``threshold`` IoU with some GT interval."""
    if len(predictions) != len(ground_truth):
        raise MetricInputError(f"{len(predictions)} prediction lists for {len(ground_truth)} queries")
    if not predictions:
        return 0.0
    hits = 0
    for preds, gts in zip(predictions, ground_truth):
        if not preds:
            raise MetricInputError("every query needs at least one predicted interval")
        top = tuple(preds[0][:2])
        hits += any(interval_iou(top, g) >= threshold for g in gts)
    return hits / len(predictions)


def average_precision(ranked: Sequence[Tuple[int, int, float]], ground_truth: Sequence[Interval],
                      threshold: float) -> float:
    """AP of one query: greedy one-to-one matching down the ranked list, interpolated PR envelope."""
    if not ground_truth:
        return 0.0
    ranked = sorted(ranked, key=lambda p: -p[2])
    matched = [False] * len(ground_truth)
    tp = []
    for start, end, _ in ranked:
        best, best_iou = None, threshold
        for i, gt in enumerate(ground_truth):
            iou = interval_iou((start, end), gt)
            if not matched[i] and iou >= best_iou:
                best, best_iou = i, iou
        if best is not None:
            matched[best] = True
        tp.append(1.0 if best is not None else 0.0)
    if not tp:
        return 0.0
    tp = np.cumsum(tp)
    precision = tp / np.arange(1, len(tp) + 1)
    recall = tp / len(ground_truth)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    previous = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - previous) * envelope))


def map_at_iou(predictions: Sequence[Sequence[Tuple[int, int, float]]], ground_truth: Sequence[Sequence[Interval]],
               thresholds: Sequence[float] = MAP_THRESHOLDS) -> Dict[float, float]:
    """Mean AP over queries for each threshold; the ``"mean"`` key averages over thresholds."""
    if len(predictions) != len(ground_truth):
        raise MetricInputError(f"{len(predictions)} prediction lists for {len(ground_truth)} queries")
    result: Dict = {}
    for theta in thresholds:
        aps = [average_precision(p, g, theta) for p, g in zip(predictions, ground_truth)]
        result[theta] = float(np.mean(aps)) if aps else 0.0
    result["mean"] = float(np.mean([result[t] for t in thresholds])) if thresholds else 0.0
    return result


def top1_keyframe_accuracy(top_frames: Sequence[int], moments: Sequence[MomentSet]) -> float:
    """Share of queries whose top frame lies in M+, skipping full-span moments."""
    if len(top_frames) != len(moments):
        raise MetricInputError(f"{len(top_frames)} predicted frames for {len(moments)} queries")
    counted = [(frame, m) for frame, m in zip(top_frames, moments) if not m.is_full_span]
    if not counted:
        return 0.0
    return sum(frame in m for frame, m in counted) / len(counted)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class ExpressionScores:
    video_id: str
    expression_index: int
    J: float
    F: float
    JF: float


@dataclass
class EvalReport:
    per_expression: List[ExpressionScores] = field(default_factory=list)
    corpus: Dict[str, float] = field(default_factory=dict)
    meta: Dict[str, str] = field(default_factory=dict)

    def to_json(self) -> Dict[str, object]:
        """Metrics scaled to percentages."""
        rows = [{**asdict(r), **{k: 100.0 * getattr(r, k) for k in ("J", "F", "JF")}}
                for r in self.per_expression]
        return {
            "per_expression": rows,
            "corpus": {k: 100.0 * v for k, v in self.corpus.items()},
            **self.meta,
        }

    def to_table(self) -> str:
        frame = pd.DataFrame([{"metric": k, "value": round(100.0 * v, 2)} for k, v in self.corpus.items()])
        return frame.to_string(index=False)


def expression_ground_truth(sample: VideoSample, expression_index: int) -> np.ndarray:
    """``[T, H, W]`` union of the referred objects' masks."""
    masks = list(sample.referred_masks(expression_index).values())
    if not masks:
        raise MetricInputError(f"{sample.video_id} expression {expression_index} has no ground-truth masks")
    return np.logical_or.reduce(masks).astype(np.uint8)


def score_expression(pred: np.ndarray, gt: np.ndarray, tol: Optional[int] = None) -> Tuple[float, float]:
    """Mean J and F over frames."""
    if pred.shape != gt.shape:
        raise MetricInputError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    js = [region_similarity(p, g) for p, g in zip(pred, gt)]
    fs = [contour_accuracy(p, g, tol) for p, g in zip(pred, gt)]
    return float(np.mean(js)), float(np.mean(fs))


def evaluate_predictions(samples: Sequence[VideoSample], predictions: Sequence[PredictedMasks],
                         tol: Optional[int] = None, workers: int = 1) -> EvalReport:
    """Per-expression and corpus J, F and J&F.

    Expressions are scored on a thread pool; results keep the prediction order
    so corpus means do not depend on scheduling.
    """
    by_id = {s.video_id: s for s in samples}
    jobs = []
    for p in predictions:
        sample = by_id.get(p.video_id)
        if sample is None:
            raise MetricInputError(f"prediction for unknown video {p.video_id!r}")
        if not 0 <= p.expression_index < len(sample.expressions):
            raise MetricInputError(f"{p.video_id} has no expression {p.expression_index}")
        jobs.append((p, expression_ground_truth(sample, p.expression_index)))

    def run(job):
        p, gt = job
        j, f = score_expression(np.asarray(p.masks), gt, tol)
        return ExpressionScores(p.video_id, p.expression_index, j, f, jf_mean(j, f))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(run, jobs))

    report = EvalReport(rows)
    if rows:
        report.corpus.update({
            "J": float(np.mean([r.J for r in rows])),
            "F": float(np.mean([r.F for r in rows])),
            "JF": float(np.mean([r.JF for r in rows])),
        })
    logger.info("Scored %d expressions", len(rows))
    return report


def retrieval_metrics(samples: Sequence[VideoSample], predictions: Sequence[PredictedSegments],
                      top_frames: Optional[Mapping[Tuple[str, int], int]] = None) -> Dict[str, float]:
    """R1@0.5, R1@0.7, mAP, mAP@0.5, mAP@0.75 and (with ``top_frames``) top-1 keyframe accuracy."""
    by_id = {s.video_id: s for s in samples}
    ranked, gts, moments = [], [], []
    for p in predictions:
        sample = by_id.get(p.video_id)
        if sample is None:
            raise MetricInputError(f"prediction for unknown video {p.video_id!r}")
        mplus = sample.moment_annotation(p.expression_index).relevant_set()
        ranked.append(sorted(p.segments, key=lambda s: (-s[2], s[0])))
        gts.append(set_to_segments(mplus))
        moments.append(mplus)
    tops = [[seg[:2] for seg in r] for r in ranked]
    maps = map_at_iou(ranked, gts)
    metrics = {
        "R1_50": recall_at_iou(tops, gts, 0.5),
        "R1_70": recall_at_iou(tops, gts, 0.7),
        "mAP": maps["mean"],
        "mAP_50": maps[0.5],
        "mAP_75": maps[0.75],
    }
    if top_frames is not None:
        missing = [(p.video_id, p.expression_index) for p in predictions
                   if (p.video_id, p.expression_index) not in top_frames]
        if missing:
            raise MetricInputError(f"no top frame for {missing[0][0]} expression {missing[0][1]}")
        frames = [top_frames[(p.video_id, p.expression_index)] for p in predictions]
        metrics["top1"] = top1_keyframe_accuracy(frames, moments)
    return metrics
