"""Frozen stand-in encoders for frames and token sequences.

Neither encoder has trainable state: weights are drawn once from the encoder
seed, outputs are plain arrays, and downstream code wraps them as constant
tensors.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from config import EncoderConfig
from errors import DataError
from tensor_autodiff import Tensor, row_selector

logger = logging.getLogger(__name__)


class EncoderInputError(DataError):
    """Frames or tokens the encoders cannot consume."""
    pass


@dataclass(frozen=True)
class FeaturePyramid:
    """Per-level features ``[T, H_k, W_k, C_k]``, finest level first."""
    levels: Tuple[np.ndarray, ...]

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def video_length(self) -> int:
        return int(self.levels[0].shape[0])

    def grid(self, level: int) -> Tuple[int, int]:
        return int(self.levels[level].shape[1]), int(self.levels[level].shape[2])

    def frame(self, level: int, t: int) -> Tensor:
        """Row-major flattened ``[H_k*W_k, C_k]`` features of 1-based frame ``t``."""
        feats = self.levels[level][t - 1]
        return Tensor.constant(feats.reshape(-1, feats.shape[-1]), name=f"F{level}@{t}")

    def finest(self) -> np.ndarray:
        """Raw visual features at the finest level (the decoder's resolution)."""
        return self.levels[0]


@dataclass(frozen=True)
class TextLayers:
    """Per-layer token features ``[L+1, D]``; row 0 is the mean (CLS) slot."""
    layers: Tuple[np.ndarray, ...]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_tokens(self) -> int:
        return int(self.layers[0].shape[0]) - 1

    def layer(self, k: int) -> Tensor:
        return Tensor.constant(self.layers[k], name=f"E{k}")


def _sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    positions = np.arange(1, length + 1)[:, None]
    rates = 1.0 / np.power(10000.0, (2 * (np.arange(dim) // 2)) / dim)
    angles = positions * rates[None, :]
    codes = np.zeros((length, dim))
    codes[:, 0::2] = np.sin(angles[:, 0::2])
    codes[:, 1::2] = np.cos(angles[:, 1::2])
    return codes


class VisualEncoder:
    """Patch embedding followed by 2x average pooling and a channel projection per level."""

    def __init__(self, config: EncoderConfig, seed: Optional[int] = None, in_channels: int = 3):
        self.config = config
        self.in_channels = in_channels
        rng = np.random.default_rng([config.seed if seed is None else seed, 0])
        patch_dim = config.patch_size * config.patch_size * in_channels
        channels = config.visual_channels
        self.patch_projection = rng.normal(0.0, 1.0 / np.sqrt(patch_dim), size=(patch_dim, channels[0]))
        self.level_projections = [
            rng.normal(0.0, 1.0 / np.sqrt(channels[k - 1]), size=(channels[k - 1], channels[k]))
            for k in range(1, config.levels)
        ]

    def encode(self, frames: np.ndarray) -> FeaturePyramid:
        frames = np.asarray(frames)
        if frames.ndim != 4 or frames.shape[-1] != self.in_channels:
            raise EncoderInputError(
                f"frames must be [T, H, W, {self.in_channels}], got {list(frames.shape)}"
            )
        t, h, w, c = frames.shape
        divisor = self.config.spatial_divisor
        if h % divisor or w % divisor:
            raise EncoderInputError(f"frame size {h}x{w} is not divisible by {divisor}")

        p = self.config.patch_size
        x = frames.astype(np.float64) / 255.0
        patches = x.reshape(t, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
        level = patches.reshape(t, h // p, w // p, p * p * c) @ self.patch_projection
        levels = [level]
        for projection in self.level_projections:
            lt, lh, lw, lc = level.shape
            pooled = level.reshape(lt, lh // 2, 2, lw // 2, 2, lc).mean(axis=(2, 4))
            level = pooled @ projection
            levels.append(level)
        return FeaturePyramid(tuple(levels))


class TextEncoder:
    """Embedding lookup with sinusoidal positions, then fixed linear mixes per layer."""

    def __init__(self, config: EncoderConfig, seed: Optional[int] = None):
        self.config = config
        rng = np.random.default_rng([config.seed if seed is None else seed, 1])
        d = config.text_dim
        self.embedding = rng.normal(0.0, 1.0, size=(config.vocab_size, d))
        self.mixes = [rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)) for _ in range(config.levels - 1)]

    def encode(self, tokens: Sequence[int]) -> TextLayers:
        tokens = [int(tok) for tok in tokens]
        if not tokens:
            raise EncoderInputError("expression must hold at least one token")
        bad = [tok for tok in tokens if not 0 <= tok < self.config.vocab_size]
        if bad:
            raise EncoderInputError(f"token ids {bad} outside vocabulary of {self.config.vocab_size}")

        slots = self.embedding[tokens] + _sinusoidal_positions(len(tokens), self.config.text_dim)
        layers = []
        for k in range(self.config.levels):
            if k > 0:
                slots = slots @ self.mixes[k - 1]
            layers.append(np.vstack([slots.mean(axis=0, keepdims=True), slots]))
        return TextLayers(tuple(layers))


class FrozenEncoders:
    """Both encoders built from one config."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        self.visual = VisualEncoder(config)
        self.text = TextEncoder(config)

    def encode_video(self, frames: np.ndarray) -> FeaturePyramid:
        return self.visual.encode(frames)

    def encode_text(self, tokens: Sequence[int]) -> TextLayers:
        return self.text.encode(tokens)


def encode_video(frames: np.ndarray, config: EncoderConfig, seed: Optional[int] = None) -> FeaturePyramid:
    return VisualEncoder(config, seed).encode(frames)


def encode_text(tokens: Sequence[int], config: EncoderConfig, seed: Optional[int] = None) -> TextLayers:
    return TextEncoder(config, seed).encode(tokens)


def extract_text_slots(e_adp: Tensor, verb_indices: Sequence[int]) -> Tuple[Tensor, Tensor]:
    """Contextual row E_C (slot 0) and motion row E_M (mean of verb slots), each ``[1, D]``.

    Verb indices are 1-based token positions, so slot ``v`` of the layer holds token ``v``.
    """
    verb_indices = list(verb_indices)
    if not verb_indices:
        raise EncoderInputError("verb_indices must not be empty")
    num_tokens = e_adp.shape[0] - 1
    bad = [v for v in verb_indices if not 1 <= v <= num_tokens]
    if bad:
        raise EncoderInputError(f"verb indices {bad} outside [1, {num_tokens}]")
    rows = e_adp.shape[0]
    e_c = row_selector([0], rows) @ e_adp
    e_m = row_selector(verb_indices, rows, average=True) @ e_adp
    return e_c, e_m
