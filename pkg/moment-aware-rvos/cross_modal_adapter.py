"""Bidirectional cross-attention adapter and the text prompt MLP.

Each adapter layer updates visual and text features toward each other through
a shared single-head attention ``h`` in a bottleneck of width ``r``::

    F' = F + h(F W_down_v, E W_down_t) W_up_v
    E' = E + h(E W_down_t, [F_1; ...; F_T] W_down_v) W_up_t

Visual features are handled as one ``[H_k*W_k, C_k]`` tensor per frame
(row-major cells). Layer ``k`` (1-based) reads visual pyramid level ``K+1-k``,
coarsest first, so the last layer runs at the decoder's resolution. The updates
of earlier layers are upsampled and added to the final outputs through lateral
projections.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import AdapterConfig, EncoderConfig
from tensor_autodiff import (
    Tensor, ShapeMismatchError, add_row_bias, bilinear_upsampler, concat,
)
from toy_encoders import FeaturePyramid, TextLayers

logger = logging.getLogger(__name__)


@dataclass
class AdapterLevelParams:
    """Trainable matrices of one adapter layer."""
    w_down_v: Tensor   # [C_k, r]
    w_down_t: Tensor   # [D, r]
    w_up_v: Tensor     # [r, C_k]
    w_up_t: Tensor     # [r, D]
    w_q: Tensor        # [r, r]
    w_k: Tensor        # [r, r]
    w_v: Tensor        # [r, r]
    w_lat: Optional[Tensor] = None  # [C_k, C_fine], absent on the finest layer

    def named(self, prefix: str) -> List[Tuple[str, Tensor]]:
        names = ["w_down_v", "w_down_t", "w_up_v", "w_up_t", "w_q", "w_k", "w_v", "w_lat"]
        return [(f"{prefix}.{n}", getattr(self, n)) for n in names if getattr(self, n) is not None]


@dataclass
class PromptParams:
    """Two-layer MLP ``[2D] -> hidden -> D_p``."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str) -> List[Tuple[str, Tensor]]:
        return [(f"{prefix}.{n}", getattr(self, n)) for n in ("w1", "b1", "w2", "b2")]


@dataclass
class AdapterParams:
    levels: List[AdapterLevelParams]  # adapter layer order, coarsest level first
    prompt: PromptParams

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        named = []
        for k, level in enumerate(self.levels, start=1):
            named.extend(level.named(f"adapter.layer{k}"))
        named.extend(self.prompt.named("adapter.prompt"))
        return named


@dataclass(frozen=True)
class TextPrompt:
    rho: Tensor  # [1, D_p]


def _gaussian(rng: np.random.Generator, shape: Tuple[int, int], name: str, scale: float = 1.0) -> Tensor:
    return Tensor.parameter(rng.normal(0.0, scale / np.sqrt(shape[0]), size=shape), name=name)


def init_adapter_params(encoder: EncoderConfig, adapter: AdapterConfig, rng: np.random.Generator,
                        prompt_dim: Optional[int] = None, zero_up: bool = True) -> AdapterParams:
    """Initial adapter and prompt weights.

    Args:
        encoder: encoder dimensions (levels, visual channels, text width)
        adapter: bottleneck and prompt widths
        rng: source of the random weights
        prompt_dim: output width of the prompt MLP (default: finest visual channels)
        zero_up: start the up-projections at zero so the stack is the identity
    """
    r = adapter.bottleneck
    d = encoder.text_dim
    fine = encoder.finest_channels
    levels = []
    num = encoder.levels
    for k in range(num):
        visual_level = num - 1 - k
        c = encoder.visual_channels[visual_level]
        up_scale = 0.0 if zero_up else 1.0
        levels.append(AdapterLevelParams(
            w_down_v=_gaussian(rng, (c, r), "w_down_v"),
            w_down_t=_gaussian(rng, (d, r), "w_down_t"),
            w_up_v=_gaussian(rng, (r, c), "w_up_v", up_scale),
            w_up_t=_gaussian(rng, (r, d), "w_up_t", up_scale),
            w_q=_gaussian(rng, (r, r), "w_q"),
            w_k=_gaussian(rng, (r, r), "w_k"),
            w_v=_gaussian(rng, (r, r), "w_v"),
            w_lat=_gaussian(rng, (c, fine), "w_lat") if visual_level > 0 else None,
        ))
    hidden = adapter.prompt_hidden
    out = prompt_dim or fine
    prompt = PromptParams(
        w1=_gaussian(rng, (2 * d, hidden), "w1"),
        b1=Tensor.parameter(np.zeros((1, hidden)), name="b1"),
        w2=_gaussian(rng, (hidden, out), "w2"),
        b2=Tensor.parameter(np.zeros((1, out)), name="b2"),
    )
    return AdapterParams(levels, prompt)


def cross_attention(queries: Tensor, keys: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Tensor:
    """Scaled dot-product attention: rows of ``queries`` attend over rows of ``keys``."""
    q = queries @ w_q
    k = keys @ w_k
    v = keys @ w_v
    weights = ((q @ k.T) * (1.0 / np.sqrt(w_q.shape[1]))).softmax(axis=1)
    return weights @ v


def attention_weights(queries: Tensor, keys: Tensor, w_q: Tensor, w_k: Tensor) -> Tensor:
    q = queries @ w_q
    k = keys @ w_k
    return ((q @ k.T) * (1.0 / np.sqrt(w_q.shape[1]))).softmax(axis=1)


def _check_level(features: Sequence[Tensor], text: Tensor, params: AdapterLevelParams):
    if not features:
        raise ShapeMismatchError("adapter_layer needs at least one frame")
    c, d = params.w_down_v.shape[0], params.w_down_t.shape[0]
    for f in features:
        if f.data.ndim != 2 or f.shape[1] != c:
            raise ShapeMismatchError(f"adapter_layer: frame features {list(f.shape)} do not match C_k={c}")
    if text.data.ndim != 2 or text.shape[1] != d:
        raise ShapeMismatchError(f"adapter_layer: text features {list(text.shape)} do not match D={d}")


def adapter_deltas(features: Sequence[Tensor], text: Tensor,
                   params: AdapterLevelParams) -> Tuple[List[Tensor], Tensor]:
    """Residual updates of one layer: per-frame visual deltas and the text delta."""
    _check_level(features, text, params)
    text_down = text @ params.w_down_t
    visual_down = [f @ params.w_down_v for f in features]
    visual_deltas = [
        cross_attention(fd, text_down, params.w_q, params.w_k, params.w_v) @ params.w_up_v
        for fd in visual_down
    ]
    all_cells = visual_down[0] if len(visual_down) == 1 else concat(visual_down, axis=0)
    text_delta = cross_attention(text_down, all_cells, params.w_q, params.w_k, params.w_v) @ params.w_up_t
    return visual_deltas, text_delta


def adapter_layer(features: Sequence[Tensor], text: Tensor,
                  params: AdapterLevelParams) -> Tuple[List[Tensor], Tensor]:
    """One residual adapter layer over per-frame ``[H_k*W_k, C_k]`` features and ``[L+1, D]`` text."""
    visual_deltas, text_delta = adapter_deltas(features, text, params)
    return [f + dv for f, dv in zip(features, visual_deltas)], text + text_delta


@lru_cache(maxsize=32)
def _upsampler(in_hw: Tuple[int, int], out_hw: Tuple[int, int]) -> Tensor:
    return bilinear_upsampler(in_hw, out_hw)


def run_adapter_stack(pyramid: FeaturePyramid, text_layers: TextLayers, params: AdapterParams,
                      frames: Optional[Sequence[int]] = None) -> Tuple[Dict[int, Tensor], Tensor]:
    """Adapted finest-level features per frame and adapted text.

    Args:
        pyramid: frozen visual features
        text_layers: frozen text features
        params: adapter weights
        frames: 1-based frames to adapt (default: every frame); the text path
            attends over exactly these frames

    Returns:
        ``({frame: F_Adp [H_1*W_1, C_1]}, E_Adp [L+1, D])``
    """
    num = len(params.levels)
    if pyramid.num_levels != num or text_layers.num_layers != num:
        raise ShapeMismatchError(
            f"level counts differ: pyramid {pyramid.num_levels}, text {text_layers.num_layers}, adapter {num}"
        )
    frames = list(range(1, pyramid.video_length + 1)) if frames is None else list(frames)
    fine_hw = pyramid.grid(0)

    fused_visual: Optional[List[Tensor]] = None
    text_out: Optional[Tensor] = None
    lateral: List[Tensor] = [None] * len(frames)
    text_extra: Optional[Tensor] = None
    for k, level_params in enumerate(params.levels):
        visual_level = num - 1 - k
        features = [pyramid.frame(visual_level, t) for t in frames]
        text = text_layers.layer(k)
        visual_deltas, text_delta = adapter_deltas(features, text, level_params)
        if visual_level > 0:
            up = _upsampler(pyramid.grid(visual_level), fine_hw)
            for i, delta in enumerate(visual_deltas):
                contribution = (up @ delta) @ level_params.w_lat
                lateral[i] = contribution if lateral[i] is None else lateral[i] + contribution
            text_extra = text_delta if text_extra is None else text_extra + text_delta
        else:
            fused_visual = [f + dv for f, dv in zip(features, visual_deltas)]
            text_out = text + text_delta

    outputs = {}
    for i, t in enumerate(frames):
        outputs[t] = fused_visual[i] if lateral[i] is None else fused_visual[i] + lateral[i]
    if text_extra is not None:
        text_out = text_out + text_extra
    return outputs, text_out


def build_text_prompt(e_c: Tensor, e_m: Tensor, params: PromptParams) -> TextPrompt:
    """rho = MLP(concat(E_C, E_M)) with a relu between the two layers."""
    if e_c.shape != e_m.shape or e_c.data.ndim != 2 or e_c.shape[0] != 1:
        raise ShapeMismatchError(
            f"build_text_prompt: E_C {list(e_c.shape)} and E_M {list(e_m.shape)} must both be [1, D]"
        )
    joint = concat([e_c, e_m], axis=1)
    hidden = add_row_bias(joint @ params.w1, params.b1).relu()
    return TextPrompt(add_row_bias(hidden @ params.w2, params.b2))
