"""Frame relevance scoring and the frame-selection strategies used at inference.

A selection plan names the frames treated as text-relevant (the M+ proxy) and
the order in which they are processed.
"""

import os
import sys
import heapq
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

# Add parent directory to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from shared import stable_hash
from config import InferenceConfig, ScorerConfig
from errors import DataError
from moment_algebra import MomentRangeError, MomentSet, segments_to_set, set_to_segments
from dataset_io import VideoSample

logger = logging.getLogger(__name__)

STRATEGIES = ("gt_moments", "topk", "topk_in_interval", "random")
SCORE_COLUMNS = ["video_id", "expression_index", "frame", "score"]

ScoredSegment = Tuple[int, int, float]


class SelectionError(DataError):
    """Missing or inconsistent inputs for frame selection."""
    pass


def _video_key(video_id: str) -> int:
    return int(stable_hash(video_id, length=8), 16)


class RelevanceScorer:
    """Per-frame text-relevance scores for one (video, expression).

    ``oracle_noisy`` starts from the ground-truth moments, flips each frame
    with probability ``1 - accuracy`` and adds uniform noise in ``[0, noise]``.
    ``uniform_random`` ignores the video. ``external`` reads a CSV with columns
    ``video_id,expression_index,frame,score``.
    """

    def __init__(self, kind: str = "oracle_noisy", accuracy: float = 0.5, noise: float = 0.1,
                 seed: int = 0, table: Optional[pd.DataFrame] = None):
        if kind not in ("oracle_noisy", "uniform_random", "external"):
            raise SelectionError(f"unknown scorer kind {kind!r}")
        if kind == "external" and table is None:
            raise SelectionError("external scorer needs a score table")
        self.kind = kind
        self.accuracy = accuracy
        self.noise = noise
        self.seed = seed
        self.table = table

    @classmethod
    def from_config(cls, config: ScorerConfig) -> "RelevanceScorer":
        table = load_score_table(config.path) if config.kind == "external" else None
        return cls(config.kind, config.accuracy, config.noise, config.seed, table)

    def _rng(self, sample: VideoSample, expression_index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, _video_key(sample.video_id), expression_index])

    def score(self, sample: VideoSample, expression_index: int) -> np.ndarray:
        length = sample.video_length
        if self.kind == "uniform_random":
            return self._rng(sample, expression_index).random(length)
        if self.kind == "external":
            return self._lookup(sample.video_id, expression_index, length)

        rng = self._rng(sample, expression_index)
        mplus = sample.moment_annotation(expression_index).relevant_set()
        truth = np.zeros(length)
        truth[[t - 1 for t in mplus.indices]] = 1.0
        flips = rng.random(length) < 1.0 - self.accuracy
        noise = rng.uniform(0.0, self.noise, size=length) if self.noise > 0 else np.zeros(length)
        return np.where(flips, 1.0 - truth, truth) + noise

    def _lookup(self, video_id: str, expression_index: int, length: int) -> np.ndarray:
        rows = self.table[(self.table["video_id"] == video_id)
                          & (self.table["expression_index"] == expression_index)]
        frames = rows["frame"].astype(int).tolist()
        if sorted(frames) != list(range(1, length + 1)):
            raise SelectionError(
                f"score table does not hold exactly one score per frame 1..{length} "
                f"for {video_id} expression {expression_index}"
            )
        ordered = rows.sort_values("frame")
        return ordered["score"].to_numpy(dtype=np.float64)


def load_score_table(path: Union[str, Path]) -> pd.DataFrame:
    """Read an external score CSV."""
    try:
        table = pd.read_csv(path, dtype={"video_id": str})
    except FileNotFoundError:
        raise SelectionError(f"score file not found: {path}") from None
    missing = [c for c in SCORE_COLUMNS if c not in table.columns]
    if missing:
        raise SelectionError(f"score file {path} lacks columns {missing}")
    return table[SCORE_COLUMNS]


def score_frames(scorer: RelevanceScorer, sample: VideoSample, expression_index: int) -> np.ndarray:
    """Scores ``[T_V]``, index ``t - 1`` for frame ``t``."""
    if sample.video_length < 1:
        raise SelectionError("video has no frames")
    return scorer.score(sample, expression_index)


def select_topk(scores: Sequence[float], k: int,
                interval: Optional[Sequence[Sequence[int]]] = None) -> List[int]:
    """The ``k`` highest-scoring frames, best first, earlier frame on ties.

    Args:
        scores: one score per frame
        k: how many frames to keep
        interval: optional closed segments restricting the candidates; when
            they hold fewer than ``k`` frames, all of them are returned
    """
    if k < 1:
        raise SelectionError(f"k must be at least 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64)
    length = len(scores)
    if interval is None:
        candidates = list(range(1, length + 1))
    else:
        try:
            candidates = list(segments_to_set(interval, length).indices)
        except MomentRangeError as e:
            raise SelectionError(f"invalid interval: {e}") from None
    # nlargest is stable, so equal scores keep ascending frame order
    return heapq.nlargest(min(k, len(candidates)), candidates, key=lambda t: scores[t - 1])


def peak_window(center: int, size: int, video_length: int) -> List[int]:
    """``size`` consecutive frames around ``center``, shifted to stay inside the video."""
    size = min(size, video_length)
    start = min(max(center - size // 2, 1), video_length - size + 1)
    return list(range(start, start + size))


def predict_segments(scores: Sequence[float], threshold: float) -> List[ScoredSegment]:
    """Runs of frames scoring at least ``threshold``, each scored by its peak, best first.

    When no frame reaches the threshold the single best frame is returned.
    """
    scores = np.asarray(scores, dtype=np.float64)
    above = MomentSet.of([i + 1 for i in np.flatnonzero(scores >= threshold)], len(scores))
    segments = [(s, e, float(scores[s - 1:e].max())) for s, e in set_to_segments(above)]
    if not segments:
        best = int(np.argmax(scores)) + 1
        segments = [(best, best, float(scores[best - 1]))]
    return sorted(segments, key=lambda seg: (-seg[2], seg[0]))


@dataclass(frozen=True)
class SelectionPlan:
    strategy: str
    mplus: MomentSet
    priority: Tuple[int, ...]

    @property
    def processing_order(self) -> List[int]:
        """Priority frames first, the rest ascending (re-ordered by distance during propagation)."""
        chosen = set(self.priority)
        return list(self.priority) + [t for t in range(1, self.mplus.video_length + 1) if t not in chosen]


def _fallback(scores: Optional[np.ndarray], video_length: int, strategy: str) -> SelectionPlan:
    if scores is None:
        raise SelectionError(f"{strategy} selected no frames and no scores are available to fall back on")
    best = select_topk(scores, 1)
    return SelectionPlan(strategy, MomentSet.of(best, video_length), tuple(best))


def build_plan(strategy: str, video_length: int, scores: Optional[Sequence[float]] = None, k: int = 4,
               gt_moments: Optional[MomentSet] = None,
               interval: Optional[Sequence[Sequence[int]]] = None,
               rng: Optional[np.random.Generator] = None) -> SelectionPlan:
    """Frames treated as text-relevant and their processing priority.

    Args:
        strategy: one of ``gt_moments``, ``topk``, ``topk_in_interval``, ``random``
        video_length: T_V
        scores: per-frame relevance scores (topk strategies and the fallback)
        k: frames to select
        gt_moments: ground-truth M+ (``gt_moments`` strategy)
        interval: segments restricting ``topk_in_interval``
        rng: source of the ``random`` subset
    """
    if strategy not in STRATEGIES:
        raise SelectionError(f"unknown selection strategy {strategy!r}")
    array = None if scores is None else np.asarray(scores, dtype=np.float64)
    if array is not None and len(array) != video_length:
        raise SelectionError(f"{len(array)} scores for a video of {video_length} frames")

    if strategy == "gt_moments":
        if gt_moments is None:
            raise SelectionError("gt_moments strategy needs ground-truth moments")
        if gt_moments.is_empty:
            return _fallback(array, video_length, strategy)
        return SelectionPlan(strategy, gt_moments, gt_moments.indices)

    if strategy == "random":
        if rng is None:
            raise SelectionError("random strategy needs a random generator")
        chosen = sorted(int(t) for t in rng.choice(np.arange(1, video_length + 1),
                                                   size=min(k, video_length), replace=False))
        return SelectionPlan(strategy, MomentSet.of(chosen, video_length), tuple(chosen))

    if array is None:
        raise SelectionError(f"{strategy} strategy needs relevance scores")
    if strategy == "topk_in_interval":
        if interval is None:
            raise SelectionError("topk_in_interval strategy needs an interval")
        if not interval:
            return _fallback(array, video_length, strategy)
    picked = select_topk(array, k, interval if strategy == "topk_in_interval" else None)
    return SelectionPlan(strategy, MomentSet.of(picked, video_length), tuple(picked))


def plan_for_expression(config: InferenceConfig, sample: VideoSample, expression_index: int,
                        scorer: Optional[RelevanceScorer] = None,
                        predicted: Optional[Dict[Tuple[str, int], List[ScoredSegment]]] = None) -> SelectionPlan:
    """Build the configured plan for one expression.

    Predicted intervals come from ``predicted`` when it has an entry for the
    expression, otherwise from thresholding the scorer output.
    """
    length = sample.video_length
    gt = sample.moment_annotation(expression_index).relevant_set()
    needs_scores = config.strategy in ("topk", "topk_in_interval")
    scores = None
    if scorer is not None and (needs_scores or config.strategy == "gt_moments"):
        scores = score_frames(scorer, sample, expression_index)
    elif needs_scores:
        raise SelectionError(f"{config.strategy} strategy needs a relevance scorer")

    interval = None
    if config.strategy == "topk_in_interval":
        if config.interval_source == "ground_truth":
            interval = set_to_segments(gt)
        else:
            segments = (predicted or {}).get((sample.video_id, expression_index))
            if segments is None:
                segments = predict_segments(scores, config.segment_threshold)
            interval = [(s, e) for s, e, _ in segments[:1]]

    rng = np.random.default_rng([config.scorer.seed, _video_key(sample.video_id), expression_index, 1])
    return build_plan(config.strategy, length, scores, config.k, gt, interval, rng)
