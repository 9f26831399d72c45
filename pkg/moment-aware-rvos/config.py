"""Configuration for the moment-aware segmentation project.

Module constants carry the defaults (overridable through the environment or a
``.env`` file); ``RunConfig`` is the validated per-run document every command
reads.
"""

import os
import sys
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

# Add parent directory to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from shared import stable_hash
from errors import ConfigError

load_dotenv()

# Logging
LOG_LEVEL = os.getenv("MOMENT_RVOS_LOG_LEVEL", "INFO")

# File formats
DATASET_FORMAT_VERSION = "samdwich-m/1"
CHECKPOINT_FORMAT_VERSION = "moment-rvos-ckpt/1"
VIDEO_LEVEL_OBJECT_ID = "*"

# Frozen encoders
NUM_LEVELS = int(os.getenv("MOMENT_RVOS_NUM_LEVELS", "3"))
TEXT_DIM = int(os.getenv("MOMENT_RVOS_TEXT_DIM", "32"))
VISUAL_CHANNELS = (32, 48, 64)  # finest level first
PATCH_SIZE = 4
VOCAB_SIZE = 32
ENCODER_SEED = 7

# Adapter, memory and decoder
BOTTLENECK_WIDTH = 16
PROMPT_HIDDEN = 64
ATTENTION_DIM = 16
MEMORY_WINDOW = 6
MEMORY_CAPACITY = 8

# Training
CLIP_LENGTH = 8
LEARNING_RATE = float(os.getenv("MOMENT_RVOS_LR", "1e-3"))
LAMBDA_DICE = 1.0
LAMBDA_FOCAL = 1.0
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
DICE_SMOOTH = 1.0
PROB_CLAMP = 1e-7

# Synthetic benchmark
ACTIONS = ("moving_left", "moving_right", "moving_up", "moving_down", "still")

# Evaluation
MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DEFAULT_WORKERS = int(os.getenv("MOMENT_RVOS_WORKERS", "1"))

# Output
OUTPUT_DIR = os.getenv("MOMENT_RVOS_OUTPUT_DIR", "runs")


class RunConfigError(ConfigError):
    """Run configuration failed validation."""

    def __init__(self, message: str, paths: Optional[List[str]] = None):
        super().__init__(message)
        self.paths = paths or []


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetPaths(_Strict):
    train: Optional[str] = None
    eval: Optional[str] = None


class EncoderConfig(_Strict):
    levels: int = Field(NUM_LEVELS, ge=1)
    text_dim: int = Field(TEXT_DIM, ge=1)
    visual_channels: Tuple[int, ...] = VISUAL_CHANNELS
    patch_size: int = Field(PATCH_SIZE, ge=1)
    vocab_size: int = Field(VOCAB_SIZE, ge=2)
    seed: int = ENCODER_SEED

    @model_validator(mode="after")
    def _levels_match_channels(self):
        if len(self.visual_channels) != self.levels:
            raise ValueError(
                f"visual_channels has {len(self.visual_channels)} entries, expected {self.levels}"
            )
        if any(c < 1 for c in self.visual_channels):
            raise ValueError("visual_channels must be positive")
        return self

    @property
    def finest_channels(self) -> int:
        return self.visual_channels[0]

    @property
    def spatial_divisor(self) -> int:
        """Frame sides must be multiples of this for every level to exist."""
        return self.patch_size * 2 ** (self.levels - 1)


class AdapterConfig(_Strict):
    bottleneck: int = Field(BOTTLENECK_WIDTH, ge=1)
    prompt_hidden: int = Field(PROMPT_HIDDEN, ge=1)
    attention_dim: int = Field(ATTENTION_DIM, ge=1)
    memory_window: int = Field(MEMORY_WINDOW, ge=1)
    memory_capacity: int = Field(MEMORY_CAPACITY, ge=1)
    init_scale: float = Field(0.1, gt=0)


class LossConfig(_Strict):
    lambda_dice: float = Field(LAMBDA_DICE, ge=0, allow_inf_nan=False)
    lambda_focal: float = Field(LAMBDA_FOCAL, ge=0, allow_inf_nan=False)
    focal_gamma: float = Field(FOCAL_GAMMA, ge=0, allow_inf_nan=False)
    focal_alpha: float = Field(FOCAL_ALPHA, ge=0, le=1)
    dice_smooth: float = Field(DICE_SMOOTH, gt=0, allow_inf_nan=False)


class AblationFlags(_Strict):
    """Switches of the component ablation.

    ``feature_routing_override`` forces moment-aware feature routing (adapter
    features and the text prompt on M+ frames only) on or off, and
    ``plus_only_memory`` forces writing memory from M+ frames only. Left unset,
    both follow ``use_mdp``.
    """
    use_moment_sampling: bool = True
    use_mdp: bool = True
    use_oss: bool = True
    feature_routing_override: Optional[bool] = None
    plus_only_memory: Optional[bool] = None

    @property
    def feature_routing(self) -> bool:
        return self.use_mdp if self.feature_routing_override is None else self.feature_routing_override

    @property
    def memory_plus_only(self) -> bool:
        return self.use_mdp if self.plus_only_memory is None else self.plus_only_memory


class TrainingConfig(_Strict):
    epochs: int = Field(1, ge=1)
    lr: float = Field(LEARNING_RATE, ge=0, allow_inf_nan=False)
    clip_length: int = Field(CLIP_LENGTH, ge=2)
    max_steps: Optional[int] = Field(None, ge=0)
    log_every: int = Field(25, ge=1)
    sampling_source: Literal["ground_truth", "scorer_peak"] = "ground_truth"
    oss_ignore_discarded: bool = False

    @model_validator(mode="after")
    def _even_clip(self):
        if self.clip_length % 2:
            raise ValueError("clip_length must be even")
        return self


class ScorerConfig(_Strict):
    kind: Literal["oracle_noisy", "uniform_random", "external"] = "oracle_noisy"
    accuracy: float = Field(0.5, ge=0, le=1)
    noise: float = Field(0.1, ge=0, allow_inf_nan=False)
    seed: int = 0
    path: Optional[str] = None

    @model_validator(mode="after")
    def _external_needs_path(self):
        if self.kind == "external" and not self.path:
            raise ValueError("external scorer requires 'path'")
        return self


class InferenceConfig(_Strict):
    strategy: Literal["gt_moments", "topk", "topk_in_interval", "random"] = "gt_moments"
    k: int = Field(4, ge=1)
    interval_source: Literal["ground_truth", "predicted"] = "predicted"
    segment_threshold: float = Field(0.5, allow_inf_nan=False)
    segments_path: Optional[str] = None
    scorer: ScorerConfig = ScorerConfig()


class MetricConfig(_Strict):
    contour_tolerance: Optional[int] = Field(None, ge=0)
    workers: int = Field(DEFAULT_WORKERS, ge=1)


class SynthConfig(_Strict):
    num_videos: int = Field(200, ge=1)
    eval_videos: int = Field(40, ge=1)
    frames: int = Field(16, ge=1)
    height: int = Field(32, ge=8)
    width: int = Field(32, ge=8)
    min_objects: int = Field(2, ge=1)
    max_objects: int = Field(4, ge=1)
    shape_size: Tuple[int, int] = (5, 8)
    max_segments: int = Field(3, ge=1)
    expressions_per_video: Tuple[int, int] = (1, 2)
    distractor_prob: float = Field(0.6, ge=0, le=1)
    action_mix: Dict[str, float] = Field(
        default_factory=lambda: {
            "moving_left": 1.0, "moving_right": 1.0, "moving_up": 1.0,
            "moving_down": 1.0, "still": 1.5,
        }
    )

    @model_validator(mode="after")
    def _ranges(self):
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects exceeds max_objects")
        lo, hi = self.shape_size
        if not 2 <= lo <= hi:
            raise ValueError("shape_size must satisfy 2 <= min <= max")
        if not 1 <= self.expressions_per_video[0] <= self.expressions_per_video[1]:
            raise ValueError("expressions_per_video must satisfy 1 <= min <= max")
        if not self.action_mix or any(w < 0 for w in self.action_mix.values()):
            raise ValueError("action_mix needs non-negative weights")
        unknown = sorted(set(self.action_mix) - set(ACTIONS))
        if unknown:
            raise ValueError(f"unknown actions in action_mix: {unknown}")
        if sum(self.action_mix.values()) <= 0:
            raise ValueError("action_mix weights sum to zero")
        return self


class RunConfig(_Strict):
    dataset: DatasetPaths = DatasetPaths()
    encoder: EncoderConfig = EncoderConfig()
    adapter: AdapterConfig = AdapterConfig()
    loss: LossConfig = LossConfig()
    flags: AblationFlags = AblationFlags()
    training: TrainingConfig = TrainingConfig()
    inference: InferenceConfig = InferenceConfig()
    metrics: MetricConfig = MetricConfig()
    synth: SynthConfig = SynthConfig()
    seed: int = Field(1, ge=0)

    @model_validator(mode="after")
    def _canvas_fits_pyramid(self):
        divisor = self.encoder.spatial_divisor
        if self.synth.height % divisor or self.synth.width % divisor:
            raise ValueError(
                f"synth canvas {self.synth.height}x{self.synth.width} must be divisible by {divisor}"
            )
        return self

    def with_updates(self, **updates: Any) -> "RunConfig":
        """Return a validated copy with nested ``section.field`` style updates applied."""
        data = self.model_dump()
        for dotted, value in updates.items():
            target = data
            *parents, leaf = dotted.split(".")
            for key in parents:
                target = target[key]
            target[leaf] = value
        return build_run_config(data)


def _format_validation_error(error: ValidationError) -> RunConfigError:
    paths = []
    lines = []
    for item in error.errors():
        path = ".".join(str(part) for part in item["loc"]) or "<root>"
        paths.append(path)
        lines.append(f"{path}: {item['msg']}")
    return RunConfigError("Invalid run configuration:\n  " + "\n  ".join(lines), paths)


def build_run_config(data: Dict[str, Any]) -> RunConfig:
    """Validate a config mapping, raising ``RunConfigError`` with field paths."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise _format_validation_error(e) from None


def load_run_config(path: Optional[Union[str, Path]] = None, seed: Optional[int] = None) -> RunConfig:
    """Load a JSON run config (defaults when ``path`` is None); ``seed`` overrides the file."""
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise RunConfigError(f"Config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise RunConfigError(f"Config file {path} is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise RunConfigError(f"Config file {path} must hold a JSON object")
    if seed is not None:
        data = {**data, "seed": seed}
    return build_run_config(data)


def config_hash(config: RunConfig) -> str:
    """Provenance hash embedded in every output."""
    return stable_hash(config.model_dump(mode="json"))
