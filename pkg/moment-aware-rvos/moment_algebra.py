"""Frame-index sets marking when each referred object matches its expression.

Indices are 1-based, ``{1, ..., T_V}``. A video's text-relevant set M+ is the
union of its objects' sets; M- is the complement.
"""

import numbers
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Mapping, Sequence, Tuple

from config import VIDEO_LEVEL_OBJECT_ID
from errors import DataError


class MomentRangeError(DataError):
    """Frame index outside ``[1, video_length]`` or inconsistent lengths."""
    pass


Segment = Tuple[int, int]


@dataclass(frozen=True)
class MomentSet:
    """Sorted, duplicate-free frame indices bounded by the video length."""
    indices: Tuple[int, ...]
    video_length: int

    def __post_init__(self):
        if not isinstance(self.video_length, numbers.Integral) or self.video_length < 1:
            raise MomentRangeError(f"video_length must be a positive integer, got {self.video_length!r}")
        previous = 0
        for i in self.indices:
            if not 1 <= i <= self.video_length:
                raise MomentRangeError(f"frame index {i} outside [1, {self.video_length}]")
            if i <= previous:
                raise MomentRangeError(f"indices must be strictly increasing, got {list(self.indices)}")
            previous = i

    @classmethod
    def of(cls, indices: Iterable[int], video_length: int) -> "MomentSet":
        """Build from any iterable, sorting and dropping duplicates."""
        return cls(tuple(sorted({int(i) for i in indices})), video_length)

    @classmethod
    def full(cls, video_length: int) -> "MomentSet":
        return cls(tuple(range(1, video_length + 1)), video_length)

    @classmethod
    def empty(cls, video_length: int) -> "MomentSet":
        return cls((), video_length)

    def __contains__(self, frame: int) -> bool:
        return frame in self.as_set()

    def __iter__(self) -> Iterator[int]:
        return iter(self.indices)

    def __len__(self) -> int:
        return len(self.indices)

    def as_set(self) -> frozenset:
        return frozenset(self.indices)

    @property
    def is_empty(self) -> bool:
        return not self.indices

    @property
    def is_full_span(self) -> bool:
        return len(self.indices) == self.video_length


@dataclass(frozen=True)
class MomentAnnotation:
    """Per-object moment sets of one expression.

    The reserved object id ``"*"`` holds a video-level set that stands for M+
    directly.
    """
    per_object: Mapping[str, MomentSet]
    video_length: int

    def __post_init__(self):
        for object_id, moment in self.per_object.items():
            if moment.video_length != self.video_length:
                raise MomentRangeError(
                    f"object {object_id!r} has video_length {moment.video_length}, "
                    f"annotation has {self.video_length}"
                )
        object.__setattr__(self, "per_object", dict(self.per_object))

    @property
    def is_video_level(self) -> bool:
        return VIDEO_LEVEL_OBJECT_ID in self.per_object

    def relevant_set(self) -> MomentSet:
        return moment_union(self)

    def irrelevant_set(self) -> MomentSet:
        return moment_complement(moment_union(self))


def moment_union(ann: MomentAnnotation) -> MomentSet:
    """M+ as the union of every object's moment (or the video-level set when given)."""
    if not ann.per_object:
        raise MomentRangeError("moment_union needs at least one object")
    if ann.is_video_level:
        return ann.per_object[VIDEO_LEVEL_OBJECT_ID]
    members = set()
    for moment in ann.per_object.values():
        members.update(moment.indices)
    return MomentSet.of(members, ann.video_length)


def moment_complement(mplus: MomentSet) -> MomentSet:
    """M- = {1..T_V} minus M+."""
    chosen = mplus.as_set()
    rest = [i for i in range(1, mplus.video_length + 1) if i not in chosen]
    return MomentSet(tuple(rest), mplus.video_length)


def overlaps(clip: Sequence[int], m: MomentSet) -> bool:
    """True when the clip shares at least one frame with ``m``."""
    for i in clip:
        if not 1 <= i <= m.video_length:
            raise MomentRangeError(f"clip index {i} outside [1, {m.video_length}]")
    return not m.as_set().isdisjoint(clip)


def set_to_segments(m: MomentSet) -> List[Segment]:
    """Maximal runs of consecutive indices as closed intervals."""
    segments: List[Segment] = []
    for i in m.indices:
        if segments and segments[-1][1] == i - 1:
            segments[-1] = (segments[-1][0], i)
        else:
            segments.append((i, i))
    return segments


def segments_to_set(segments: Iterable[Sequence[int]], video_length: int) -> MomentSet:
    """Inverse of ``set_to_segments``; overlapping intervals are merged."""
    members = set()
    for segment in segments:
        start, end = int(segment[0]), int(segment[1])
        if start > end:
            raise MomentRangeError(f"segment [{start}, {end}] has start after end")
        if start < 1 or end > video_length:
            raise MomentRangeError(f"segment [{start}, {end}] outside [1, {video_length}]")
        members.update(range(start, end + 1))
    return MomentSet.of(members, video_length)


def nearest_distance(frame: int, m: MomentSet) -> int:
    """Temporal distance from ``frame`` to the closest member of ``m``."""
    if m.is_empty:
        raise MomentRangeError("distance to an empty moment set is undefined")
    return min(abs(frame - i) for i in m.indices)


def moments_from_lists(per_object: Dict[str, Sequence[int]], video_length: int) -> MomentAnnotation:
    """Convenience constructor from plain index lists."""
    return MomentAnnotation(
        {object_id: MomentSet.of(indices, video_length) for object_id, indices in per_object.items()},
        video_length,
    )
