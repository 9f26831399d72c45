"""Train-then-evaluate pipelines and the ablation grids built on them."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import RunConfig
from errors import ConfigError
from moment_algebra import MomentSet
from dataset_io import PredictedMasks, PredictedSegments, VideoSample
from model import SegmentationModel
from supervision_training import train
from keyframe_selection import RelevanceScorer, ScoredSegment, plan_for_expression, predict_segments, score_frames
from evaluation import EvalReport, evaluate_predictions

logger = logging.getLogger(__name__)

GRIDS = ("main", "mdp", "sampling", "inference")

# (use_moment_sampling, use_mdp, use_oss), baseline first then each component added
MAIN_GRID: List[Tuple[str, Dict[str, object]]] = [
    ("baseline", {"flags.use_moment_sampling": False, "flags.use_mdp": False, "flags.use_oss": False}),
    ("+sampling", {"flags.use_moment_sampling": True, "flags.use_mdp": False, "flags.use_oss": False}),
    ("+sampling +mdp", {"flags.use_moment_sampling": True, "flags.use_mdp": True, "flags.use_oss": False}),
    ("+sampling +oss", {"flags.use_moment_sampling": True, "flags.use_mdp": False, "flags.use_oss": True}),
    ("all", {"flags.use_moment_sampling": True, "flags.use_mdp": True, "flags.use_oss": True}),
    ("+mdp", {"flags.use_moment_sampling": False, "flags.use_mdp": True, "flags.use_oss": False}),
    ("+oss", {"flags.use_moment_sampling": False, "flags.use_mdp": False, "flags.use_oss": True}),
    ("+mdp +oss", {"flags.use_moment_sampling": False, "flags.use_mdp": True, "flags.use_oss": True}),
]

MDP_GRID: List[Tuple[str, Dict[str, object]]] = [
    ("no routing, all-frame memory", {"flags.feature_routing_override": False, "flags.plus_only_memory": False}),
    ("routing only", {"flags.feature_routing_override": True, "flags.plus_only_memory": False}),
    ("M+ memory only", {"flags.feature_routing_override": False, "flags.plus_only_memory": True}),
    ("full", {"flags.feature_routing_override": True, "flags.plus_only_memory": True}),
]

SAMPLING_GRID: List[Tuple[str, Dict[str, object]]] = [
    ("random", {"flags.use_moment_sampling": False, "inference.strategy": "random"}),
    ("topk", {"flags.use_moment_sampling": True, "training.sampling_source": "scorer_peak",
              "inference.strategy": "topk"}),
    ("gt_moments", {"flags.use_moment_sampling": True, "training.sampling_source": "ground_truth",
                    "inference.strategy": "gt_moments"}),
]

INFERENCE_GRID: List[Tuple[str, Dict[str, object]]] = [
    ("random", {"inference.strategy": "random"}),
    ("topk", {"inference.strategy": "topk"}),
    ("topk_in_interval", {"inference.strategy": "topk_in_interval"}),
    ("gt_moments", {"inference.strategy": "gt_moments"}),
]


def infer_dataset(model: SegmentationModel, samples: Sequence[VideoSample],
                  predicted: Optional[Dict[Tuple[str, int], List[ScoredSegment]]] = None) -> List[PredictedMasks]:
    """Masks for every expression under the model's run config.

    With both routing switches off every frame is treated as relevant and
    processed in temporal order, which is the text-everywhere baseline.
    """
    config = model.config
    flags = config.flags
    scorer = RelevanceScorer.from_config(config.inference.scorer)
    predictions = []
    for sample in samples:
        for ei in range(len(sample.expressions)):
            if not flags.feature_routing and not flags.memory_plus_only:
                mplus = MomentSet.full(sample.video_length)
                order = None
            else:
                plan = plan_for_expression(config.inference, sample, ei, scorer, predicted)
                mplus, order = plan.mplus, plan.processing_order
            result = model.segment_expression(sample, ei, mplus, order)
            predictions.append(PredictedMasks(sample.video_id, ei, result.masks))
        model.clear_cache()
    logger.info("Predicted masks for %d expressions", len(predictions))
    return predictions


def predict_retrieval(samples: Sequence[VideoSample], scorer: RelevanceScorer,
                      threshold: float) -> Tuple[List[PredictedSegments], Dict[Tuple[str, int], int]]:
    """Ranked interval predictions and the top-scored frame of every expression."""
    segments, top_frames = [], {}
    for sample in samples:
        for ei in range(len(sample.expressions)):
            scores = score_frames(scorer, sample, ei)
            segments.append(PredictedSegments(sample.video_id, ei, predict_segments(scores, threshold)))
            top_frames[(sample.video_id, ei)] = int(np.argmax(scores)) + 1
    return segments, top_frames


def train_and_evaluate(config: RunConfig, train_samples: Sequence[VideoSample],
                       eval_samples: Sequence[VideoSample],
                       model: Optional[SegmentationModel] = None) -> Tuple[SegmentationModel, EvalReport]:
    """Train under ``config`` (unless a trained ``model`` is given) and score the eval set."""
    if model is None:
        result = train(train_samples, config)
        model = SegmentationModel(config, result.params)
    predictions = infer_dataset(model, eval_samples)
    report = evaluate_predictions(eval_samples, predictions, config.metrics.contour_tolerance,
                                  config.metrics.workers)
    return model, report


@dataclass
class AblationResult:
    grid: str
    seeds: Tuple[int, ...]
    rows: List[Dict[str, object]] = field(default_factory=list)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def to_json(self) -> Dict[str, object]:
        return {"grid": self.grid, "seeds": list(self.seeds), "rows": self.rows}

    def to_table(self) -> str:
        frame = self.frame()
        if frame.empty:
            return ""
        columns = ["row"] + [f"JF_seed{s}" for s in self.seeds] + ["JF_mean", "JF_std"]
        return frame[columns].round(2).to_string(index=False)


def _grid_rows(grid: str) -> List[Tuple[str, Dict[str, object]]]:
    return {"main": MAIN_GRID, "mdp": MDP_GRID, "sampling": SAMPLING_GRID, "inference": INFERENCE_GRID}[grid]


def run_ablation(grid: str, config: RunConfig, train_samples: Sequence[VideoSample],
                 eval_samples: Sequence[VideoSample], seeds: Sequence[int] = (1, 2, 3)) -> AblationResult:
    """Mean eval J&F (in percent) per grid row over ``seeds``.

    Args:
        grid: ``main`` (component flags), ``mdp`` (routing x memory),
            ``sampling`` (training sampler with its matching inference) or
            ``inference`` (frame-selection strategies on one trained model)
        config: base run config; each row applies its overrides on top
        train_samples: training videos
        eval_samples: evaluation videos
        seeds: run seeds; each row trains once per seed
    """
    if grid not in GRIDS:
        raise ConfigError(f"unknown ablation grid {grid!r}, expected one of {list(GRIDS)}")
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    result = AblationResult(grid, tuple(int(s) for s in seeds))
    trained: Dict[int, SegmentationModel] = {}
    for label, overrides in _grid_rows(grid):
        scores = []
        for seed in result.seeds:
            row_config = config.with_updates(seed=seed, **overrides)
            model = None
            if grid == "inference" and seed in trained:
                model = SegmentationModel(row_config, trained[seed].params)
            model, report = train_and_evaluate(row_config, train_samples, eval_samples, model)
            trained.setdefault(seed, model)
            scores.append(100.0 * report.corpus.get("JF", 0.0))
            logger.info("[%s] %s seed %d: J&F %.2f", grid, label, seed, scores[-1])
        row: Dict[str, object] = {"row": label, **{k: v for k, v in overrides.items()}}
        row.update({f"JF_seed{s}": v for s, v in zip(result.seeds, scores)})
        row["JF_mean"] = float(np.mean(scores))
        row["JF_std"] = float(np.std(scores))
        result.rows.append(row)
    return result
