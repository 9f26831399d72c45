"""Dataset documents: videos, per-object masks and moments, expressions.

One UTF-8 JSON document per dataset::

    {"format_version": "samdwich-m/1",
     "videos": [{"video_id", "T_V", "H", "W", "C", "frames": [b64 uint8 ...],
                 "objects": {id: {"masks": [RLE ...], "moment": [indices]}},
                 "expressions": [{"tokens", "verb_indices", "referred_object_ids",
                                  "moments"?: {id: [indices]}, "text"?}]}]}

RLE records are ``{"h", "w", "runs"}`` where ``runs`` is base64 of little-endian
uint32 run lengths, alternating zero-run first, row-major.
"""

import base64
import binascii
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

# Add parent directory to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from config import DATASET_FORMAT_VERSION, VIDEO_LEVEL_OBJECT_ID
from errors import DataError
from moment_algebra import MomentAnnotation, MomentSet
from shared import atomic_write_bytes

logger = logging.getLogger(__name__)


class DatasetSchemaError(DataError):
    """Document does not follow the schema; ``path`` points at the offending field."""

    def __init__(self, message: str, path: str = "<root>"):
        super().__init__(f"{path}: {message}")
        self.path = path


class MaskCodecError(DataError):
    """Mask or frame payload cannot be decoded."""

    def __init__(self, message: str, video_id: str = "", frame: Optional[int] = None):
        where = f"video {video_id!r}" + (f" frame {frame}" if frame is not None else "")
        super().__init__(f"{where}: {message}" if video_id else message)
        self.detail = message
        self.video_id = video_id
        self.frame = frame


# ---------------------------------------------------------------------------
# Base64 array convention (shared with checkpoints)
# ---------------------------------------------------------------------------

def b64_encode_array(array: np.ndarray, dtype: str) -> str:
    """Base64 of the row-major little-endian bytes of ``array`` cast to ``dtype``."""
    data = np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<"))
    return base64.b64encode(data.tobytes()).decode("ascii")


def b64_decode_array(payload: str, dtype: str, count: Optional[int] = None) -> np.ndarray:
    """Inverse of ``b64_encode_array``; returns a flat array."""
    try:
        raw = base64.b64decode(payload.encode("ascii"), validate=True)
    except (binascii.Error, ValueError) as e:
        raise ValueError(f"invalid base64 payload: {e}") from None
    dt = np.dtype(dtype).newbyteorder("<")
    if len(raw) % dt.itemsize:
        raise ValueError(f"payload of {len(raw)} bytes is not a whole number of {dtype} items")
    values = np.frombuffer(raw, dtype=dt).astype(np.dtype(dtype))
    if count is not None and values.size != count:
        raise ValueError(f"expected {count} items, found {values.size}")
    return values


# ---------------------------------------------------------------------------
# Run-length mask codec
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskRLE:
    """Run lengths of a binary mask, zero-run first, row-major."""
    h: int
    w: int
    runs: Tuple[int, ...]

    def to_json(self) -> Dict[str, Any]:
        return {"h": self.h, "w": self.w, "runs": b64_encode_array(np.array(self.runs), "uint32")}

    @classmethod
    def from_json(cls, record: Dict[str, Any]) -> "MaskRLE":
        runs = b64_decode_array(record["runs"], "uint32")
        return cls(int(record["h"]), int(record["w"]), tuple(int(r) for r in runs))


def encode_mask_rle(mask: np.ndarray) -> MaskRLE:
    """Encode a binary ``H x W`` mask."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise MaskCodecError(f"mask must be 2-d, got shape {list(mask.shape)}")
    if not np.isin(mask, (0, 1)).all():
        raise MaskCodecError("mask entries must be 0 or 1")
    flat = mask.astype(np.uint8).reshape(-1)
    change = np.flatnonzero(np.diff(flat)) + 1
    positions = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(positions).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return MaskRLE(int(mask.shape[0]), int(mask.shape[1]), tuple(int(r) for r in runs))


def decode_mask_rle(rle: MaskRLE) -> np.ndarray:
    """Decode to a ``uint8`` ``H x W`` mask of zeros and ones."""
    total = sum(rle.runs)
    if total != rle.h * rle.w:
        raise MaskCodecError(f"runs sum to {total}, expected {rle.h * rle.w}")
    values = np.arange(len(rle.runs)) % 2
    flat = np.repeat(values.astype(np.uint8), rle.runs)
    return flat.reshape(rle.h, rle.w)


# ---------------------------------------------------------------------------
# In-memory samples
# ---------------------------------------------------------------------------

@dataclass
class ExpressionRecord:
    """Tokenised expression; ``moments`` overrides the object-level moments when set."""
    tokens: Tuple[int, ...]
    verb_indices: Tuple[int, ...]
    referred_object_ids: Tuple[str, ...]
    moments: Optional[Dict[str, Tuple[int, ...]]] = None
    text: str = ""


@dataclass(eq=False)
class VideoSample:
    video_id: str
    frames: np.ndarray                        # [T, H, W, C] uint8
    objects: Dict[str, np.ndarray]            # id -> [T, H, W] uint8
    moments: Dict[str, Tuple[int, ...]]       # id -> raw 1-based indices
    expressions: List[ExpressionRecord] = field(default_factory=list)

    @property
    def video_length(self) -> int:
        return int(self.frames.shape[0])

    @property
    def height(self) -> int:
        return int(self.frames.shape[1])

    @property
    def width(self) -> int:
        return int(self.frames.shape[2])

    def raw_moments(self, expression_index: int) -> Dict[str, Tuple[int, ...]]:
        """Unvalidated moment indices of one expression's referred objects."""
        expression = self.expressions[expression_index]
        if expression.moments is not None:
            return dict(expression.moments)
        return {oid: tuple(self.moments.get(oid, ())) for oid in expression.referred_object_ids}

    def moment_annotation(self, expression_index: int) -> MomentAnnotation:
        """Validated per-object moments of an expression (raises ``MomentRangeError``)."""
        return MomentAnnotation(
            {oid: MomentSet.of(indices, self.video_length)
             for oid, indices in self.raw_moments(expression_index).items()},
            self.video_length,
        )

    def referred_masks(self, expression_index: int) -> Dict[str, np.ndarray]:
        expression = self.expressions[expression_index]
        return {oid: self.objects[oid] for oid in expression.referred_object_ids if oid in self.objects}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VideoSample):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and np.array_equal(self.frames, other.frames)
            and self.objects.keys() == other.objects.keys()
            and all(np.array_equal(self.objects[k], other.objects[k]) for k in self.objects)
            and self.moments == other.moments
            and self.expressions == other.expressions
        )


# ---------------------------------------------------------------------------
# Document schema
# ---------------------------------------------------------------------------

class _Doc(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RLEDoc(_Doc):
    h: int = Field(ge=1)
    w: int = Field(ge=1)
    runs: str


class ObjectDoc(_Doc):
    masks: List[RLEDoc]
    moment: List[int] = Field(default_factory=list)


class ExpressionDoc(_Doc):
    tokens: List[int] = Field(min_length=1)
    verb_indices: List[int] = Field(default_factory=list)
    referred_object_ids: List[str] = Field(min_length=1)
    moments: Optional[Dict[str, List[int]]] = None
    text: str = ""

    @model_validator(mode="after")
    def _verbs_within_tokens(self):
        if any(t < 0 for t in self.tokens):
            raise ValueError("token ids must be non-negative")
        previous = 0
        for v in self.verb_indices:
            if not previous < v <= len(self.tokens):
                raise ValueError(
                    f"verb_indices must be strictly increasing within [1, {len(self.tokens)}]"
                )
            previous = v
        return self


class VideoDoc(_Doc):
    video_id: str = Field(min_length=1)
    T_V: int = Field(ge=1)
    H: int = Field(ge=1)
    W: int = Field(ge=1)
    C: int = Field(3, ge=1)
    frames: List[str]
    objects: Dict[str, ObjectDoc]
    expressions: List[ExpressionDoc] = Field(default_factory=list)

    @model_validator(mode="after")
    def _sizes_agree(self):
        if len(self.frames) != self.T_V:
            raise ValueError(f"{len(self.frames)} frames listed, T_V is {self.T_V}")
        for oid, obj in self.objects.items():
            if len(obj.masks) != self.T_V:
                raise ValueError(f"object {oid!r} has {len(obj.masks)} masks, T_V is {self.T_V}")
            for rle in obj.masks:
                if (rle.h, rle.w) != (self.H, self.W):
                    raise ValueError(
                        f"object {oid!r} mask is {rle.h}x{rle.w}, frames are {self.H}x{self.W}"
                    )
        return self


class DatasetDoc(_Doc):
    format_version: str
    videos: List[VideoDoc]

    @field_validator("format_version")
    @classmethod
    def _known_version(cls, value: str) -> str:
        if value != DATASET_FORMAT_VERSION:
            raise ValueError(f"unsupported format_version {value!r}, expected {DATASET_FORMAT_VERSION!r}")
        return value


def _loc_to_path(loc: Sequence[Any]) -> str:
    path = ""
    for part in loc:
        if isinstance(part, int):
            path += f"[{part}]"
        else:
            path += f".{part}" if path else str(part)
    return path or "<root>"


def _validate_document(model: type, data: bytes) -> Any:
    try:
        payload = json.loads(data.decode("utf-8") if isinstance(data, bytes) else data)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetSchemaError(f"not a UTF-8 JSON document: {e}") from None
    try:
        return model.model_validate(payload)
    except ValidationError as e:
        first = e.errors()[0]
        raise DatasetSchemaError(first["msg"], _loc_to_path(first["loc"])) from None


def _decode_video(doc: VideoDoc) -> VideoSample:
    frames = []
    for t, payload in enumerate(doc.frames, start=1):
        try:
            flat = b64_decode_array(payload, "uint8", doc.H * doc.W * doc.C)
        except ValueError as e:
            raise MaskCodecError(f"frame payload: {e}", doc.video_id, t) from None
        frames.append(flat.reshape(doc.H, doc.W, doc.C))

    objects: Dict[str, np.ndarray] = {}
    moments: Dict[str, Tuple[int, ...]] = {}
    for oid, obj in doc.objects.items():
        masks = []
        for t, record in enumerate(obj.masks, start=1):
            try:
                masks.append(decode_mask_rle(MaskRLE.from_json(record.model_dump())))
            except (ValueError, MaskCodecError) as e:
                raise MaskCodecError(f"object {oid!r}: {e.detail if isinstance(e, MaskCodecError) else e}", doc.video_id, t) from None
        objects[oid] = np.stack(masks)
        moments[oid] = tuple(obj.moment)

    expressions = [
        ExpressionRecord(
            tokens=tuple(e.tokens),
            verb_indices=tuple(e.verb_indices),
            referred_object_ids=tuple(e.referred_object_ids),
            moments=None if e.moments is None else {k: tuple(v) for k, v in e.moments.items()},
            text=e.text,
        )
        for e in doc.expressions
    ]
    return VideoSample(doc.video_id, np.stack(frames), objects, moments, expressions)


def parse_dataset(data: Union[bytes, str]) -> List[VideoSample]:
    """Parse and decode a dataset document."""
    doc = _validate_document(DatasetDoc, data)
    samples = [_decode_video(v) for v in doc.videos]
    logger.debug("Parsed %d videos", len(samples))
    return samples


def _video_to_json(sample: VideoSample) -> Dict[str, Any]:
    frames = np.asarray(sample.frames)
    if frames.ndim != 4:
        raise DatasetSchemaError(f"frames must be [T, H, W, C], got {list(frames.shape)}",
                                 f"{sample.video_id}.frames")
    objects = {}
    for oid, masks in sample.objects.items():
        if masks.shape != frames.shape[:3]:
            raise DatasetSchemaError(
                f"masks shaped {list(masks.shape)} do not match frames {list(frames.shape[:3])}",
                f"{sample.video_id}.objects.{oid}",
            )
        objects[oid] = {
            "masks": [encode_mask_rle(m).to_json() for m in masks],
            "moment": [int(i) for i in sample.moments.get(oid, ())],
        }
    expressions = []
    for e in sample.expressions:
        record: Dict[str, Any] = {
            "tokens": [int(t) for t in e.tokens],
            "verb_indices": [int(v) for v in e.verb_indices],
            "referred_object_ids": list(e.referred_object_ids),
        }
        if e.moments is not None:
            record["moments"] = {k: [int(i) for i in v] for k, v in e.moments.items()}
        if e.text:
            record["text"] = e.text
        expressions.append(record)
    return {
        "video_id": sample.video_id,
        "T_V": int(frames.shape[0]),
        "H": int(frames.shape[1]),
        "W": int(frames.shape[2]),
        "C": int(frames.shape[3]),
        "frames": [b64_encode_array(f, "uint8") for f in frames],
        "objects": objects,
        "expressions": expressions,
    }


def write_dataset(samples: Sequence[VideoSample]) -> bytes:
    """Serialise samples into a dataset document."""
    doc = {"format_version": DATASET_FORMAT_VERSION, "videos": [_video_to_json(s) for s in samples]}
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def load_dataset(path: Union[str, Path]) -> List[VideoSample]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Dataset file not found: {path}")
    samples = parse_dataset(path.read_bytes())
    logger.info("Loaded %d videos from %s", len(samples), path)
    return samples


def save_dataset(path: Union[str, Path], samples: Sequence[VideoSample]) -> Path:
    return atomic_write_bytes(path, write_dataset(samples))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    """One validation finding.

    ``kind`` is one of ``empty_mask_in_moment``, ``moment_out_of_range``,
    ``empty_moments``, ``unknown_object`` or ``no_verb_tokens``.
    """
    kind: str
    video_id: str
    expression_index: Optional[int] = None
    object_id: Optional[str] = None
    detail: str = ""


def _check_moment(sample: VideoSample, oid: str, indices: Sequence[int],
                  expression_index: Optional[int], found: List[Violation]):
    length = sample.video_length
    bad = [i for i in indices if not 1 <= i <= length]
    if bad:
        found.append(Violation("moment_out_of_range", sample.video_id, expression_index, oid,
                               f"indices {bad} outside [1, {length}]"))
    if oid == VIDEO_LEVEL_OBJECT_ID or oid not in sample.objects:
        return
    valid = [i for i in indices if 1 <= i <= length]
    masks = sample.objects[oid]
    if valid and all(not masks[i - 1].any() for i in valid):
        found.append(Violation("empty_mask_in_moment", sample.video_id, expression_index, oid,
                               f"mask empty on every moment frame {valid}"))


def validate_sample(sample: VideoSample) -> List[Violation]:
    found: List[Violation] = []
    object_level_checked = set()
    for index, expression in enumerate(sample.expressions):
        if not expression.verb_indices:
            found.append(Violation("no_verb_tokens", sample.video_id, index, None,
                                   "expression has no verb token indices"))
        for oid in expression.referred_object_ids:
            if oid not in sample.objects:
                found.append(Violation("unknown_object", sample.video_id, index, oid,
                                       "referred object is not annotated"))
        if expression.moments is not None:
            for oid in expression.moments:
                if oid != VIDEO_LEVEL_OBJECT_ID and oid not in sample.objects:
                    found.append(Violation("unknown_object", sample.video_id, index, oid,
                                           "moment given for an unannotated object"))
                _check_moment(sample, oid, expression.moments[oid], index, found)
        else:
            for oid in expression.referred_object_ids:
                if oid in sample.objects and oid not in object_level_checked:
                    object_level_checked.add(oid)
                    _check_moment(sample, oid, sample.moments.get(oid, ()), None, found)

        raw = sample.raw_moments(index)
        in_range = {oid: [i for i in v if 1 <= i <= sample.video_length] for oid, v in raw.items()}
        if VIDEO_LEVEL_OBJECT_ID in in_range:
            empty = not in_range[VIDEO_LEVEL_OBJECT_ID]
        else:
            empty = all(not in_range.get(oid) for oid in expression.referred_object_ids)
        if empty:
            found.append(Violation("empty_moments", sample.video_id, index, None,
                                   "no referred object has a non-empty moment"))
    return found


def validate_dataset(samples: Sequence[VideoSample]) -> List[Violation]:
    """Report defects without raising or mutating the samples."""
    found: List[Violation] = []
    for sample in samples:
        found.extend(validate_sample(sample))
    for violation in found:
        logger.warning("Dataset violation [%s] %s: %s", violation.kind, violation.video_id, violation.detail)
    return found


# ---------------------------------------------------------------------------
# Prediction documents
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PredictedMasks:
    video_id: str
    expression_index: int
    masks: np.ndarray  # [T, H, W] binary

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PredictedMasks):
            return NotImplemented
        return (self.video_id, self.expression_index) == (other.video_id, other.expression_index) \
            and np.array_equal(self.masks, other.masks)


@dataclass
class PredictedSegments:
    """Ranked interval predictions ``(start, end, score)`` of one expression."""
    video_id: str
    expression_index: int
    segments: List[Tuple[int, int, float]]


class _MaskPredictionDoc(_Doc):
    video_id: str
    expression_index: int = Field(ge=0)
    masks: List[RLEDoc] = Field(min_length=1)


class _SegmentPredictionDoc(_Doc):
    video_id: str
    expression_index: int = Field(ge=0)
    segments: List[Tuple[int, int, float]]


class MaskPredictionsDoc(_Doc):
    format_version: str = DATASET_FORMAT_VERSION
    predictions: List[_MaskPredictionDoc]


class SegmentPredictionsDoc(_Doc):
    format_version: str = DATASET_FORMAT_VERSION
    predictions: List[_SegmentPredictionDoc]


def write_predicted_masks(predictions: Sequence[PredictedMasks]) -> bytes:
    doc = {
        "format_version": DATASET_FORMAT_VERSION,
        "predictions": [
            {
                "video_id": p.video_id,
                "expression_index": int(p.expression_index),
                "masks": [encode_mask_rle(m).to_json() for m in p.masks],
            }
            for p in predictions
        ],
    }
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def parse_predicted_masks(data: Union[bytes, str]) -> List[PredictedMasks]:
    doc = _validate_document(MaskPredictionsDoc, data)
    if doc.format_version != DATASET_FORMAT_VERSION:
        raise DatasetSchemaError(f"unsupported format_version {doc.format_version!r}", "format_version")
    result = []
    for p in doc.predictions:
        masks = []
        for t, record in enumerate(p.masks, start=1):
            try:
                masks.append(decode_mask_rle(MaskRLE.from_json(record.model_dump())))
            except (ValueError, MaskCodecError) as e:
                raise MaskCodecError(getattr(e, "detail", str(e)), p.video_id, t) from None
        result.append(PredictedMasks(p.video_id, p.expression_index, np.stack(masks)))
    return result


def write_predicted_segments(predictions: Sequence[PredictedSegments]) -> bytes:
    doc = {
        "format_version": DATASET_FORMAT_VERSION,
        "predictions": [
            {
                "video_id": p.video_id,
                "expression_index": int(p.expression_index),
                "segments": [[int(s), int(e), float(score)] for s, e, score in p.segments],
            }
            for p in predictions
        ],
    }
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def parse_predicted_segments(data: Union[bytes, str]) -> List[PredictedSegments]:
    doc = _validate_document(SegmentPredictionsDoc, data)
    if doc.format_version != DATASET_FORMAT_VERSION:
        raise DatasetSchemaError(f"unsupported format_version {doc.format_version!r}", "format_version")
    return [
        PredictedSegments(p.video_id, p.expression_index, [tuple(s) for s in p.segments])
        for p in doc.predictions
    ]
