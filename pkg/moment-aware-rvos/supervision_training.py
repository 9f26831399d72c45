"""Moment-aware clip sampling, selective supervision, losses and the training loop.

One training step samples a clip, runs the routing step over its frames in
temporal order with a fresh memory bank, keeps only the ground-truth objects
whose moments overlap the clip, and takes one Adam step on the adapter, memory
and decoder parameters.
"""

import os
import sys
import math
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

# Add parent directory to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from shared import atomic_write_text
from config import LossConfig, PROB_CLAMP, RunConfig
from errors import DataError
from tensor_autodiff import Tape, Tensor, backward
from moment_algebra import MomentSet, moment_complement
from dataset_io import VideoSample
from memory_propagation import IRRELEVANT, RELEVANT, PropagationState, mdp_step
from model import ModelParams, SegmentationModel
from keyframe_selection import RelevanceScorer, peak_window, select_topk

logger = logging.getLogger(__name__)


class SamplingError(DataError):
    """A clip cannot be drawn from the given moments."""
    pass


class SupervisionError(DataError):
    """Ground truth and predictions do not line up."""
    pass


# ---------------------------------------------------------------------------
# Clip sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClipSample:
    frame_indices: Tuple[int, ...]
    membership: Tuple[str, ...]

    @classmethod
    def from_frames(cls, frames: Sequence[int], mplus: MomentSet) -> "ClipSample":
        frames = tuple(sorted(int(t) for t in frames))
        members = mplus.as_set()
        return cls(frames, tuple(RELEVANT if t in members else IRRELEVANT for t in frames))

    @property
    def relevant_frames(self) -> List[int]:
        return [t for t, m in zip(self.frame_indices, self.membership) if m == RELEVANT]

    @property
    def irrelevant_frames(self) -> List[int]:
        return [t for t, m in zip(self.frame_indices, self.membership) if m == IRRELEVANT]


def sample_clip(mplus: MomentSet, mminus: MomentSet, clip_length: int, rng: np.random.Generator) -> ClipSample:
    """Draw a clip with at least half of its frames from M+.

    ``ceil(T/2)`` frames come from M+ without replacement; when M+ is smaller
    they are drawn with replacement and deduplicated. The remaining frames are
    drawn from the rest of the video. Videos shorter than ``T`` give shorter clips.
    """
    if clip_length < 2 or clip_length % 2:
        raise SamplingError(f"clip length must be even and at least 2, got {clip_length}")
    if mplus.is_empty:
        raise SamplingError("cannot sample a clip without text-relevant frames")
    plus = np.array(mplus.indices)
    universe = sorted(mplus.as_set() | mminus.as_set())
    half = math.ceil(clip_length / 2)
    size = min(clip_length, len(universe))

    if len(plus) >= half:
        chosen = set(int(t) for t in rng.choice(plus, size=half, replace=False))
    else:
        chosen = set(int(t) for t in rng.choice(plus, size=half, replace=True))
    pool = np.array([t for t in universe if t not in chosen])
    extra = min(size - len(chosen), len(pool))
    if extra > 0:
        chosen.update(int(t) for t in rng.choice(pool, size=extra, replace=False))
    return ClipSample.from_frames(chosen, mplus)


def sample_uniform_clip(mplus: MomentSet, clip_length: int, rng: np.random.Generator) -> ClipSample:
    """Moment-agnostic clip: ``T`` frames uniformly without replacement."""
    length = mplus.video_length
    frames = rng.choice(np.arange(1, length + 1), size=min(clip_length, length), replace=False)
    return ClipSample.from_frames(frames, mplus)


def sample_peak_clip(scores: Sequence[float], clip_length: int, mplus: MomentSet) -> ClipSample:
    """``T`` consecutive frames around the best-scoring frame."""
    peak = select_topk(scores, 1)[0]
    return ClipSample.from_frames(peak_window(peak, clip_length, mplus.video_length), mplus)


# ---------------------------------------------------------------------------
# Object-level selective supervision
# ---------------------------------------------------------------------------

@dataclass
class SupervisionTarget:
    retained_objects: frozenset
    masks: Dict[int, np.ndarray]                      # frame -> [H, W] uint8
    validity: Optional[Dict[int, np.ndarray]] = None  # frame -> [H, W] float, ignore mode only


def oss_filter(gt_masks: Mapping[str, np.ndarray], moments: Mapping[str, MomentSet], clip: Sequence[int],
               enabled: bool = True, ignore_discarded: bool = False,
               referred: Optional[Sequence[str]] = None) -> SupervisionTarget:
    """Keep object ``i`` iff the clip overlaps its moment; merge the kept masks.

    Args:
        gt_masks: referred object id -> ``[T, H, W]`` masks
        moments: object id -> moment set; a ``"*"`` entry applies to every object
        clip: 1-based clip frames
        enabled: when False every referred object is kept
        ignore_discarded: mark pixels of discarded objects as don't-care
            instead of background
        referred: ids the expression refers to; moments of other objects are
            not checked against ``gt_masks`` (default: every id in ``moments``)
    """
    if not clip:
        raise SupervisionError("empty clip")
    if not gt_masks:
        raise SupervisionError("no ground-truth masks for the referred objects")
    clip = [int(t) for t in clip]
    retained = set()
    for oid in gt_masks:
        moment = moments.get(oid, moments.get("*"))
        if moment is None:
            raise SupervisionError(f"object {oid!r} has no moment annotation")
        if not enabled or not moment.as_set().isdisjoint(clip):
            retained.add(oid)
    checked = set(moments) if referred is None else set(moments) & set(referred)
    for oid in checked:
        if oid != "*" and oid not in gt_masks and (not enabled or not moments[oid].as_set().isdisjoint(clip)):
            raise SupervisionError(f"retained object {oid!r} has no ground-truth masks")

    masks, validity = {}, {} if ignore_discarded else None
    for t in clip:
        frame_masks = {}
        for oid, stack in gt_masks.items():
            if not 1 <= t <= len(stack):
                raise SupervisionError(f"object {oid!r} has no mask for frame {t}")
            frame_masks[oid] = stack[t - 1].astype(bool)
        kept = [frame_masks[oid] for oid in sorted(retained)]
        target = np.logical_or.reduce(kept) if kept else None
        if target is None:
            shape = next(iter(frame_masks.values())).shape
            target = np.zeros(shape, dtype=bool)
        masks[t] = target.astype(np.uint8)
        if validity is not None:
            dropped = [frame_masks[oid] for oid in sorted(set(gt_masks) - retained)]
            ignored = np.logical_or.reduce(dropped) & ~target if dropped else np.zeros_like(target)
            validity[t] = (~ignored).astype(np.float64)
    return SupervisionTarget(frozenset(retained), masks, validity)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _scalar(value: float) -> Tensor:
    return Tensor.constant([value])


def _as_constant(array, shape, what: str) -> Tensor:
    array = np.asarray(array, dtype=np.float64)
    if array.shape != tuple(shape):
        raise SupervisionError(f"{what} shape {list(array.shape)} does not match prediction {list(shape)}")
    return Tensor.constant(array)


def dice_loss(probs: Tensor, target: np.ndarray, smooth: float = 1.0,
              validity: Optional[np.ndarray] = None) -> Tensor:
    """``1 - (2*sum(P*Y) + eps) / (sum(P) + sum(Y) + eps)`` over valid pixels."""
    y = _as_constant(target, probs.shape, "target")
    p = probs
    if validity is not None:
        w = _as_constant(validity, probs.shape, "validity")
        p, y = probs * w, y * w
    overlap = (p * y).sum() * 2.0 + _scalar(smooth)
    total = p.sum() + _scalar(float(y.data.sum()) + smooth)
    return _scalar(1.0) - overlap * total ** -1.0


def focal_loss(probs: Tensor, target: np.ndarray, gamma: float = 2.0, alpha: float = 0.25,
               validity: Optional[np.ndarray] = None, clamp: float = PROB_CLAMP) -> Tensor:
    """Mean over valid pixels of ``-alpha_t * (1 - p_t)^gamma * log(p_t)``."""
    y = _as_constant(target, probs.shape, "target")
    ones = Tensor.ones(probs.shape)
    p = probs.clamp(clamp, 1.0 - clamp)
    p_t = p * y + (ones - p) * (ones - y)
    alpha_t = Tensor.constant(alpha * y.data + (1.0 - alpha) * (1.0 - y.data))
    per_pixel = alpha_t * (ones - p_t) ** gamma * p_t.log()
    if validity is None:
        return -per_pixel.mean()
    w = _as_constant(validity, probs.shape, "validity")
    count = max(float(w.data.sum()), 1.0)
    return -(per_pixel * w).sum() * (1.0 / count)


@dataclass
class LossTerms:
    total: Tensor
    dice: float
    focal: float


def total_loss(targets: Sequence[np.ndarray], predictions: Sequence[Tensor], weights: LossConfig,
               validity: Optional[Sequence[np.ndarray]] = None) -> LossTerms:
    """Mean over frames of ``lambda_dice * dice + lambda_focal * focal`` on sigmoid probabilities."""
    if not predictions:
        raise SupervisionError("cannot compute a loss over an empty clip")
    if len(targets) != len(predictions):
        raise SupervisionError(f"{len(targets)} targets for {len(predictions)} predicted frames")
    frame_losses = []
    dice_sum = focal_sum = 0.0
    for i, (target, logits) in enumerate(zip(targets, predictions)):
        probs = logits.sigmoid()
        valid = None if validity is None else validity[i]
        dice = dice_loss(probs, target, weights.dice_smooth, valid)
        focal = focal_loss(probs, target, weights.focal_gamma, weights.focal_alpha, valid)
        frame_losses.append(dice * weights.lambda_dice + focal * weights.lambda_focal)
        dice_sum += dice.item()
        focal_sum += focal.item()
    total = frame_losses[0]
    for loss in frame_losses[1:]:
        total = total + loss
    n = len(frame_losses)
    return LossTerms(total * (1.0 / n), dice_sum / n, focal_sum / n)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class AdamOptimizer:
    """Adam over named parameters; moments are keyed by parameter name."""

    def __init__(self, named_parameters: Sequence[Tuple[str, Tensor]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(named_parameters)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros(t.shape) for name, t in self.params.items()}
        self.v = {name: np.zeros(t.shape) for name, t in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]):
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, tensor in self.params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            tensor.assign(tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))

    def state_dict(self) -> Dict[str, object]:
        return {"step": self.step_count, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: Mapping[str, object]):
        names = set(self.params)
        if set(state["m"]) != names or set(state["v"]) != names:
            raise SupervisionError("optimizer state does not match the parameter names")
        self.step_count = int(state["step"])
        self.m = {k: np.array(state["m"][k], dtype=np.float64) for k in names}
        self.v = {k: np.array(state["v"][k], dtype=np.float64) for k in names}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class LossRecord:
    step: int
    total: float
    dice: float
    focal: float


@dataclass
class TrainResult:
    params: ModelParams
    optimizer: AdamOptimizer
    loss_curve: List[LossRecord] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.loss_curve)


def loss_curve_frame(curve: Sequence[LossRecord]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in curve], columns=["step", "total", "dice", "focal"])


def write_loss_curve(path: Union[str, Path], curve: Sequence[LossRecord]) -> Path:
    """CSV with columns ``step,total,dice,focal``."""
    return atomic_write_text(path, loss_curve_frame(curve).to_csv(index=False))


def plot_loss_curve(path: Union[str, Path], curve: Sequence[LossRecord]) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    frame = loss_curve_frame(curve)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for column in ("total", "dice", "focal"):
        ax.plot(frame["step"], frame[column], label=column)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def draw_clip(sample: VideoSample, expression_index: int, config: RunConfig, rng: np.random.Generator,
              scorer: Optional[RelevanceScorer] = None) -> ClipSample:
    """The training clip for one expression under the configured sampler."""
    mplus = sample.moment_annotation(expression_index).relevant_set()
    length = config.training.clip_length
    if not config.flags.use_moment_sampling:
        return sample_uniform_clip(mplus, length, rng)
    if config.training.sampling_source == "scorer_peak":
        scorer = scorer or RelevanceScorer.from_config(config.inference.scorer)
        return sample_peak_clip(scorer.score(sample, expression_index), length, mplus)
    return sample_clip(mplus, moment_complement(mplus), length, rng)


def clip_loss(model: SegmentationModel, sample: VideoSample, expression_index: int,
              clip: ClipSample) -> LossTerms:
    """Loss of one clip; records on the current tape when there is one."""
    config = model.config
    annotation = sample.moment_annotation(expression_index)
    settings = model.settings
    if settings.feature_routing:
        adapter_frames, feature_frames = clip.relevant_frames, clip.irrelevant_frames
    else:
        adapter_frames, feature_frames = list(clip.frame_indices), []
    propagation = model.propagation_model(sample)

    inputs = model.expression_inputs(sample, expression_index, adapter_frames, feature_frames)
    state = PropagationState.fresh(settings, annotation.relevant_set())
    predictions = []
    for t, membership in zip(clip.frame_indices, clip.membership):
        soft, state = mdp_step(t, membership, inputs.f_adp.get(t), inputs.f_sam.get(t),
                               inputs.prompt, state, propagation)
        predictions.append(soft)
    target = oss_filter(sample.referred_masks(expression_index), annotation.per_object,
                        clip.frame_indices, enabled=config.flags.use_oss,
                        ignore_discarded=config.training.oss_ignore_discarded,
                        referred=sample.expressions[expression_index].referred_object_ids)
    validity = None if target.validity is None else [target.validity[t] for t in clip.frame_indices]
    return total_loss([target.masks[t] for t in clip.frame_indices], predictions, config.loss, validity)


def train_step(model: SegmentationModel, optimizer: AdamOptimizer, sample: VideoSample,
               expression_index: int, clip: ClipSample, step: int) -> LossRecord:
    """Forward the clip, backpropagate the loss and update the parameters."""
    with Tape() as tape:
        terms = clip_loss(model, sample, expression_index, clip)
        grads = backward(terms.total) if terms.total.requires_grad else {}

    optimizer.step({
        name: grads[tensor.node_id].data if tape.owns(tensor) and tensor.node_id in grads else np.zeros(tensor.shape)
        for name, tensor in model.params.named_parameters()
    })
    return LossRecord(step, terms.total.item(), terms.dice, terms.focal)


def training_items(samples: Sequence[VideoSample]) -> List[Tuple[int, int]]:
    return [(si, ei) for si, sample in enumerate(samples) for ei in range(len(sample.expressions))]


def train(samples: Sequence[VideoSample], config: RunConfig, model: Optional[SegmentationModel] = None,
          optimizer: Optional[AdamOptimizer] = None, start_step: int = 0,
          loss_curve: Optional[List[LossRecord]] = None,
          on_step: Optional[Callable[[LossRecord, AdamOptimizer], None]] = None) -> TrainResult:
    """Train adapter, memory and decoder parameters; encoders stay frozen.

    Step ``s`` draws its clip from ``default_rng([seed, 4, s])`` and visits
    expressions in a per-epoch permutation from ``default_rng([seed, 3, epoch])``,
    so resuming at ``start_step`` with the saved parameters and optimizer state
    continues the unbroken run exactly.
    """
    items = training_items(samples)
    if not items:
        raise SupervisionError("training set has no expressions")
    model = model or SegmentationModel(config)
    optimizer = optimizer or AdamOptimizer(model.params.named_parameters(), lr=config.training.lr)
    curve = list(loss_curve or [])
    total_steps = config.training.epochs * len(items)
    if config.training.max_steps is not None:
        total_steps = min(total_steps, config.training.max_steps)
    scorer = None
    if config.training.sampling_source == "scorer_peak":
        scorer = RelevanceScorer.from_config(config.inference.scorer)

    logger.info("Training on %d expressions for %d steps (from step %d)", len(items), total_steps, start_step)
    permutations: Dict[int, np.ndarray] = {}
    for step in range(start_step, total_steps):
        epoch, position = divmod(step, len(items))
        if epoch not in permutations:
            permutations[epoch] = np.random.default_rng([config.seed, 3, epoch]).permutation(len(items))
        si, ei = items[permutations[epoch][position]]
        rng = np.random.default_rng([config.seed, 4, step])
        clip = draw_clip(samples[si], ei, config, rng, scorer)
        record = train_step(model, optimizer, samples[si], ei, clip, step)
        curve.append(record)
        if (step + 1) % config.training.log_every == 0 or step + 1 == total_steps:
            logger.info("step %d/%d loss %.4f (dice %.4f, focal %.4f)",
                        step + 1, total_steps, record.total, record.dice, record.focal)
        if on_step is not None:
            on_step(record, optimizer)
    return TrainResult(model.params, optimizer, curve)
