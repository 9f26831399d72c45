"""Trainable parameter bundle and the per-expression segmentation pipeline.

Encoders are frozen; the adapter (with its prompt MLP), the memory projections
and the mask decoder are the only parameters the optimizer touches.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import RunConfig
from errors import DataError
from tensor_autodiff import Tensor
from toy_encoders import FeaturePyramid, FrozenEncoders, TextLayers, extract_text_slots
from cross_modal_adapter import AdapterParams, TextPrompt, build_text_prompt, init_adapter_params, run_adapter_stack
from memory_propagation import (
    DecoderParams, InferenceResult, MaskGeometry, MemoryParams, PropagationModel,
    PropagationSettings, init_decoder_params, init_memory_params, run_inference,
)
from moment_algebra import MomentSet
from dataset_io import VideoSample

logger = logging.getLogger(__name__)


class ParameterStateError(DataError):
    """Stored parameter values do not fit the model."""
    pass


@dataclass
class ModelParams:
    adapter: AdapterParams
    memory: MemoryParams
    decoder: DecoderParams

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return self.adapter.named_parameters() + self.memory.named_parameters() + self.decoder.named_parameters()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.numpy() for name, tensor in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """Copy values into the existing tensors; names and shapes must match exactly."""
        named = dict(self.named_parameters())
        missing = sorted(set(named) - set(state))
        unexpected = sorted(set(state) - set(named))
        if missing or unexpected:
            raise ParameterStateError(f"parameter names differ: missing {missing}, unexpected {unexpected}")
        for name, tensor in named.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ParameterStateError(
                    f"{name}: stored shape {list(value.shape)} does not match {list(tensor.shape)}"
                )
            tensor.assign(value)

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


def init_model_params(config: RunConfig, seed: Optional[int] = None) -> ModelParams:
    """Fresh parameters drawn from ``(seed, 2)``; the encoders use streams 0 and 1."""
    rng = np.random.default_rng([config.seed if seed is None else seed, 2])
    fine = config.encoder.finest_channels
    attention = config.adapter.attention_dim
    adapter = init_adapter_params(config.encoder, config.adapter, rng)
    memory = init_memory_params(fine, attention, rng, value_scale=config.adapter.init_scale)
    decoder = init_decoder_params(fine, fine, attention, rng)
    return ModelParams(adapter, memory, decoder)


def propagation_settings(config: RunConfig) -> PropagationSettings:
    return PropagationSettings(
        feature_routing=config.flags.feature_routing,
        plus_only_memory=config.flags.memory_plus_only,
        capacity=config.adapter.memory_capacity,
        window=config.adapter.memory_window,
    )


@dataclass
class ExpressionInputs:
    """Features and prompt of one (video, expression) pair, keyed by 1-based frame."""
    f_adp: Dict[int, Tensor]
    f_sam: Dict[int, Tensor]
    prompt: Optional[TextPrompt]


class SegmentationModel:
    """Frozen encoders plus trainable parameters, with per-video feature caching."""

    def __init__(self, config: RunConfig, params: Optional[ModelParams] = None,
                 encoders: Optional[FrozenEncoders] = None):
        self.config = config
        self.encoders = encoders or FrozenEncoders(config.encoder)
        self.params = params or init_model_params(config)
        self.settings = propagation_settings(config)
        self._pyramids: Dict[str, FeaturePyramid] = {}
        self._texts: Dict[Tuple[int, ...], TextLayers] = {}

    def pyramid(self, sample: VideoSample) -> FeaturePyramid:
        if sample.video_id not in self._pyramids:
            self._pyramids[sample.video_id] = self.encoders.encode_video(sample.frames)
        return self._pyramids[sample.video_id]

    def text_layers(self, tokens: Sequence[int]) -> TextLayers:
        key = tuple(int(t) for t in tokens)
        if key not in self._texts:
            self._texts[key] = self.encoders.encode_text(key)
        return self._texts[key]

    def clear_cache(self):
        self._pyramids.clear()
        self._texts.clear()

    def geometry(self, sample: VideoSample) -> MaskGeometry:
        grid = self.pyramid(sample).grid(0)
        return MaskGeometry(grid=grid, image=(sample.height, sample.width))

    def propagation_model(self, sample: VideoSample,
                          settings: Optional[PropagationSettings] = None) -> PropagationModel:
        return PropagationModel(self.params.memory, self.params.decoder, self.geometry(sample),
                                settings or self.settings)

    def expression_inputs(self, sample: VideoSample, expression_index: int,
                          adapter_frames: Sequence[int], feature_frames: Sequence[int]) -> ExpressionInputs:
        """Adapter features for ``adapter_frames``, encoder features for ``feature_frames``.

        The adapted text (and so the prompt) attends over exactly ``adapter_frames``;
        with no adapter frames there is no prompt.
        """
        expression = sample.expressions[expression_index]
        pyramid = self.pyramid(sample)
        f_sam = {t: pyramid.frame(0, t) for t in feature_frames}
        if not adapter_frames:
            return ExpressionInputs({}, f_sam, None)
        text = self.text_layers(expression.tokens)
        f_adp, e_adp = run_adapter_stack(pyramid, text, self.params.adapter, sorted(adapter_frames))
        e_c, e_m = extract_text_slots(e_adp, expression.verb_indices)
        prompt = build_text_prompt(e_c, e_m, self.params.adapter.prompt)
        return ExpressionInputs(f_adp, f_sam, prompt)

    def segment_expression(self, sample: VideoSample, expression_index: int, mplus: MomentSet,
                           order: Optional[Sequence[int]] = None,
                           settings: Optional[PropagationSettings] = None) -> InferenceResult:
        """Binary masks of one expression given the frames treated as text-relevant.

        Args:
            sample: the video
            expression_index: which expression of ``sample``
            mplus: frames processed first, with adapter features and the prompt
            order: full processing order (default: M+ ascending, then the rest)
            settings: routing switches (default: from the run config)
        """
        settings = settings or self.settings
        if mplus.video_length != sample.video_length:
            raise ParameterStateError(
                f"moment set covers {mplus.video_length} frames, video {sample.video_id} has {sample.video_length}"
            )
        all_frames = list(range(1, sample.video_length + 1))
        members = mplus.as_set()
        if order is None:
            order = list(mplus.indices) + [t for t in all_frames if t not in members]
        adapter_frames = list(mplus.indices) if settings.feature_routing else all_frames
        feature_frames = [t for t in all_frames if t not in members] if settings.feature_routing else []
        inputs = self.expression_inputs(sample, expression_index, adapter_frames, feature_frames)
        result = run_inference(inputs.f_adp, inputs.f_sam, inputs.prompt, mplus, order,
                               self.propagation_model(sample, settings))
        logger.debug("Segmented %s expression %d with %d relevant frames",
                     sample.video_id, expression_index, len(members))
        return result
