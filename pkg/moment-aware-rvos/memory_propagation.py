"""Moment-aware memory bank, memory attention, mask decoder and per-frame routing.

Text-relevant frames (M+) query memory with adapter features and decode with
the text prompt; their fused (feature, mask) entries are the only ones written
to the bank. Irrelevant frames (M-) query with raw encoder features and decode
with the learned mask token.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ComputeError
from moment_algebra import MomentSet, moment_complement, nearest_distance
from tensor_autodiff import Tensor, add_row_bias, concat, interpolation_matrix
from cross_modal_adapter import TextPrompt, cross_attention

logger = logging.getLogger(__name__)

RELEVANT = "relevant"
IRRELEVANT = "irrelevant"


class RoutingError(ComputeError):
    """Frame membership, features and processing order disagree."""
    pass


class BankPurityError(ComputeError):
    """Attempt to store a frame outside M+ in a moment-restricted bank."""
    pass


class MemoryResolutionError(ComputeError):
    """Features or mask do not match the decoder geometry."""
    pass


@dataclass(frozen=True)
class MaskGeometry:
    """Cell grid of the finest features and the output mask size."""
    grid: Tuple[int, int]
    image: Tuple[int, int]

    @property
    def cells(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass(frozen=True)
class PropagationSettings:
    """Routing switches; the defaults are the full moment-aware behaviour.

    ``feature_routing`` off sends every frame through adapter features and the
    prompt. ``plus_only_memory`` off writes every decoded frame to the bank.
    """
    feature_routing: bool = True
    plus_only_memory: bool = True
    capacity: int = 8
    window: int = 6


@dataclass
class MemoryParams:
    w_fuse: Tensor   # [C + 1, C_m]
    b_fuse: Tensor   # [1, C_m]
    w_q: Tensor      # [C, a]
    w_k: Tensor      # [C_m, a]
    w_v: Tensor      # [C_m, C]

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(f"memory.{n}", getattr(self, n)) for n in ("w_fuse", "b_fuse", "w_q", "w_k", "w_v")]


@dataclass
class DecoderParams:
    w_pq: Tensor        # [D_p, a]
    w_pk: Tensor        # [C, a]
    w_pv: Tensor        # [C, D_p]
    w_feat: Tensor      # [C, D_p]
    bias: Tensor        # [1, 1]
    mask_token: Tensor  # [1, D_p]

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        names = ("w_pq", "w_pk", "w_pv", "w_feat", "bias", "mask_token")
        return [(f"decoder.{n}", getattr(self, n)) for n in names]


def _normal(rng: np.random.Generator, shape: Tuple[int, int], name: str, scale: float = 1.0) -> Tensor:
    return Tensor.parameter(rng.normal(0.0, scale / np.sqrt(shape[0]), size=shape), name=name)


def init_memory_params(channels: int, attention_dim: int, rng: np.random.Generator,
                       value_scale: float = 0.1) -> MemoryParams:
    return MemoryParams(
        w_fuse=_normal(rng, (channels + 1, channels), "w_fuse"),
        b_fuse=Tensor.parameter(np.zeros((1, channels)), name="b_fuse"),
        w_q=_normal(rng, (channels, attention_dim), "w_q"),
        w_k=_normal(rng, (channels, attention_dim), "w_k"),
        w_v=_normal(rng, (channels, channels), "w_v", value_scale),
    )


def init_decoder_params(channels: int, prompt_dim: int, attention_dim: int,
                        rng: np.random.Generator) -> DecoderParams:
    return DecoderParams(
        w_pq=_normal(rng, (prompt_dim, attention_dim), "w_pq"),
        w_pk=_normal(rng, (channels, attention_dim), "w_pk"),
        w_pv=_normal(rng, (channels, prompt_dim), "w_pv"),
        w_feat=_normal(rng, (channels, prompt_dim), "w_feat"),
        bias=Tensor.parameter(np.zeros((1, 1)), name="bias"),
        mask_token=Tensor.parameter(rng.normal(0.0, 1.0, size=(1, prompt_dim)), name="mask_token"),
    )


@dataclass
class MemoryEntry:
    frame_index: int
    fused: Tensor  # [H_m*W_m, C_m]
    is_relevant: bool = True


class MemoryBank:
    """Entries ordered by frame index, at most one per frame.

    When ``allowed`` is given, only those frames may be stored.
    """

    def __init__(self, capacity: int = 8, allowed: Optional[frozenset] = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.allowed = allowed
        self.entries: List[MemoryEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def frame_indices(self) -> Tuple[int, ...]:
        return tuple(e.frame_index for e in self.entries)

    def add(self, entry: MemoryEntry, current: Optional[int] = None) -> Optional[MemoryEntry]:
        """Insert ``entry``; at capacity, evict the entry farthest from ``current`` (earlier on ties)."""
        if self.allowed is not None and entry.frame_index not in self.allowed:
            raise BankPurityError(f"frame {entry.frame_index} is outside the text-relevant moment")
        current = entry.frame_index if current is None else current
        self.entries = [e for e in self.entries if e.frame_index != entry.frame_index]
        evicted = None
        if len(self.entries) >= self.capacity:
            evicted = max(self.entries, key=lambda e: (abs(e.frame_index - current), -e.frame_index))
            self.entries.remove(evicted)
        self.entries.append(entry)
        self.entries.sort(key=lambda e: e.frame_index)
        return evicted

    def nearest(self, t: int, window: int) -> List[MemoryEntry]:
        """Up to ``window`` entries closest to ``t``, smaller index first on ties."""
        ranked = sorted(self.entries, key=lambda e: (abs(e.frame_index - t), e.frame_index))
        return sorted(ranked[:window], key=lambda e: e.frame_index)


@lru_cache(maxsize=16)
def _cell_pooling(geometry: MaskGeometry) -> Tensor:
    """``[cells, H*W]`` averaging matrix from pixels to feature cells."""
    (gh, gw), (h, w) = geometry.grid, geometry.image
    sy, sx = h // gh, w // gw
    matrix = np.zeros((gh * gw, h * w))
    for y in range(h):
        for x in range(w):
            matrix[(y // sy) * gw + (x // sx), y * w + x] = 1.0 / (sy * sx)
    return Tensor.constant(matrix)


@lru_cache(maxsize=16)
def _upsampling_pair(geometry: MaskGeometry) -> Tuple[Tensor, Tensor]:
    (gh, gw), (h, w) = geometry.grid, geometry.image
    return (Tensor.constant(interpolation_matrix(gh, h)),
            Tensor.constant(interpolation_matrix(gw, w).T))


def _check_geometry(features: Tensor, geometry: MaskGeometry):
    (gh, gw), (h, w) = geometry.grid, geometry.image
    if h % gh or w % gw:
        raise MemoryResolutionError(f"mask size {h}x{w} is not a multiple of the grid {gh}x{gw}")
    if features.data.ndim != 2 or features.shape[0] != geometry.cells:
        raise MemoryResolutionError(
            f"features {list(features.shape)} do not cover the {gh}x{gw} grid"
        )


def memory_encode(features: Tensor, soft_mask: Tensor, frame_index: int, params: MemoryParams,
                  geometry: MaskGeometry, is_relevant: bool = True) -> MemoryEntry:
    """Fuse per-cell features with the cell-averaged squashed mask ``2*sigmoid(P) - 1``."""
    _check_geometry(features, geometry)
    if soft_mask.shape != tuple(geometry.image):
        raise MemoryResolutionError(
            f"soft mask {list(soft_mask.shape)} does not match image size {list(geometry.image)}"
        )
    h, w = geometry.image
    squashed = soft_mask.sigmoid() * 2.0 - Tensor.ones((h, w))
    mask_column = _cell_pooling(geometry) @ squashed.reshape(h * w, 1)
    joint = concat([features, mask_column], axis=1)
    fused = add_row_bias(joint @ params.w_fuse, params.b_fuse)
    return MemoryEntry(frame_index, fused, is_relevant)


def memory_readout(query: Tensor, entries: Sequence[MemoryEntry], params: MemoryParams) -> Tensor:
    """Attention of query cells over the cells of ``entries`` (no residual)."""
    keys = concat([e.fused for e in entries], axis=0) if len(entries) > 1 else entries[0].fused
    return cross_attention(query, keys, params.w_q, params.w_k, params.w_v)


def memory_attend(query: Tensor, bank: MemoryBank, t: int, params: MemoryParams,
                  window: int = 6) -> Tensor:
    """Memory-conditioned features of frame ``t``; the query itself when the bank is empty."""
    neighbours = bank.nearest(t, window)
    if not neighbours:
        return query
    return query + memory_readout(query, neighbours, params)


def decode_mask(features: Tensor, prompt: Optional[TextPrompt], params: DecoderParams,
                geometry: MaskGeometry) -> Tensor:
    """Soft mask logits ``[H, W]``.

    The prompt (or the learned mask token) attends to the cells, then each cell's
    projected features are scored against it and the cell logits are bilinearly
    upsampled to the image size.
    """
    _check_geometry(features, geometry)
    token = prompt.rho if prompt is not None else params.mask_token
    token = token + cross_attention(token, features, params.w_pq, params.w_pk, params.w_pv)
    cell_logits = (features @ params.w_feat) @ token.T
    cell_logits = add_row_bias(cell_logits, params.bias)
    grid = cell_logits.reshape(*geometry.grid)
    rows, cols = _upsampling_pair(geometry)
    return rows @ grid @ cols


def binarize(soft_mask) -> np.ndarray:
    """Strict threshold at zero."""
    values = soft_mask.data if isinstance(soft_mask, Tensor) else np.asarray(soft_mask)
    return (values > 0).astype(np.uint8)


@dataclass(frozen=True)
class StepRecord:
    """What one routing step consumed and produced."""
    frame: int
    membership: str
    query_source: str          # "adapter" or "encoder"
    query_ref: int             # id() of the consumed feature tensor
    prompt_used: bool
    attended: Tuple[int, ...]
    bank_after: Tuple[int, ...]


@dataclass
class PropagationState:
    bank: MemoryBank
    decoded: Dict[int, Tensor] = field(default_factory=dict)
    trace: List[StepRecord] = field(default_factory=list)

    @classmethod
    def fresh(cls, settings: PropagationSettings, mplus: Optional[MomentSet] = None) -> "PropagationState":
        allowed = mplus.as_set() if (mplus is not None and settings.plus_only_memory) else None
        return cls(MemoryBank(settings.capacity, allowed))


@dataclass
class PropagationModel:
    """Everything a routing step needs besides the per-frame inputs."""
    memory: MemoryParams
    decoder: DecoderParams
    geometry: MaskGeometry
    settings: PropagationSettings = PropagationSettings()


def mdp_step(t: int, membership: str, f_adp_t: Optional[Tensor], f_sam_t: Optional[Tensor],
             prompt: Optional[TextPrompt], state: PropagationState,
             model: PropagationModel) -> Tuple[Tensor, PropagationState]:
    """Process one frame and update ``state`` in place.

    Args:
        t: 1-based frame index
        membership: ``"relevant"`` for M+ frames, ``"irrelevant"`` for M- frames
        f_adp_t: adapter features (consumed by relevant frames, and by every
            frame when feature routing is off)
        f_sam_t: raw encoder features (consumed by irrelevant frames)
        prompt: the text prompt
        state: bank and decoded masks so far
        model: parameters, geometry and routing switches

    Returns:
        The soft mask logits of frame ``t`` and the (same, updated) state.
    """
    if membership not in (RELEVANT, IRRELEVANT):
        raise RoutingError(f"unknown membership {membership!r}")
    settings = model.settings
    relevant = membership == RELEVANT
    use_adapter = relevant or not settings.feature_routing

    if use_adapter:
        if f_adp_t is None:
            raise RoutingError(f"frame {t} routed through adapter features but none were given")
        if prompt is None:
            raise RoutingError(f"frame {t} routed with the text prompt but none was given")
        query, source, frame_prompt = f_adp_t, "adapter", prompt
    else:
        if f_sam_t is None:
            raise RoutingError(f"irrelevant frame {t} needs raw encoder features")
        query, source, frame_prompt = f_sam_t, "encoder", None

    attended = tuple(e.frame_index for e in state.bank.nearest(t, settings.window))
    f_mem = memory_attend(query, state.bank, t, model.memory, settings.window)
    soft_mask = decode_mask(f_mem, frame_prompt, model.decoder, model.geometry)

    if relevant or not settings.plus_only_memory:
        entry = memory_encode(query, soft_mask, t, model.memory, model.geometry, is_relevant=relevant)
        state.bank.add(entry, current=t)

    state.decoded[t] = soft_mask
    state.trace.append(StepRecord(t, membership, source, id(query), frame_prompt is not None,
                                  attended, state.bank.frame_indices))
    return soft_mask, state


def propagation_order(mplus: MomentSet, order: Sequence[int]) -> List[int]:
    """Full processing order: M+ frames as given, then M- by distance to M+ (earlier on ties)."""
    length = mplus.video_length
    order = [int(t) for t in order]
    if sorted(order) != list(range(1, length + 1)):
        raise RoutingError(f"order must be a permutation of 1..{length}")
    if mplus.is_empty:
        raise RoutingError("the text-relevant moment must not be empty")
    members = mplus.as_set()
    seen_irrelevant = False
    for t in order:
        if t in members and seen_irrelevant:
            raise RoutingError(f"relevant frame {t} comes after an irrelevant frame")
        seen_irrelevant = seen_irrelevant or t not in members
    first_pass = [t for t in order if t in members]
    second_pass = sorted(moment_complement(mplus).indices, key=lambda t: (nearest_distance(t, mplus), t))
    return first_pass + second_pass


@dataclass
class InferenceResult:
    masks: np.ndarray                 # [T, H, W] binary, temporal order
    soft_masks: Dict[int, Tensor]
    state: PropagationState


def run_inference(f_adp: Dict[int, Tensor], f_sam: Dict[int, Tensor], prompt: TextPrompt,
                  mplus: MomentSet, order: Sequence[int], model: PropagationModel) -> InferenceResult:
    """Two-pass propagation over a whole video with a fresh bank."""
    sequence = propagation_order(mplus, order)
    state = PropagationState.fresh(model.settings, mplus)
    members = mplus.as_set()
    for t in sequence:
        membership = RELEVANT if t in members else IRRELEVANT
        mdp_step(t, membership, f_adp.get(t), f_sam.get(t), prompt, state, model)
    h, w = model.geometry.image
    masks = np.zeros((mplus.video_length, h, w), dtype=np.uint8)
    for t, soft in state.decoded.items():
        masks[t - 1] = binarize(soft)
    logger.debug("Propagated %d frames (%d relevant)", len(sequence), len(members))
    return InferenceResult(masks, dict(state.decoded), state)
