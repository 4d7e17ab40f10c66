"""Shared immutable data model: videos, queries, masks, tracks, config, run state."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from trackprune.maskops import RleMask


class QueryType(enum.Enum):
    REFERRING = "referring"
    REASONING = "reasoning"
    UNKNOWN = "unknown"


class VerdictState(enum.Enum):
    ACCEPTED = "accept"
    REJECTED = "reject"
    UNCERTAIN = "uncertain"


@dataclass(frozen=True)
class VideoRef:
    """A video as an ordered list of pre-extracted frame images."""

    video_id: str
    frame_paths: tuple[str, ...]
    width: int
    height: int

    def __post_init__(self):
        if len(self.frame_paths) < 1:
            raise ValueError(f"video {self.video_id!r} has no frames")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"video {self.video_id!r} has invalid dimensions")

    @property
    def num_frames(self) -> int:
        return len(self.frame_paths)


@dataclass(frozen=True)
class Query:
    """A natural-language expression. query_type stays UNKNOWN until classified."""

    text: str
    query_type: QueryType = QueryType.UNKNOWN

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("query text must be non-empty")


@dataclass(frozen=True)
class BitMask:
    """A single-frame binary mask, stored run-length encoded."""

    width: int
    height: int
    payload: RleMask

    def __post_init__(self):
        if (self.payload.height, self.payload.width) != (self.height, self.width):
            raise ValueError("payload size does not match declared dimensions")

    @classmethod
    def from_array(cls, raster) -> "BitMask":
        from trackprune import maskops

        rle = maskops.rle_encode(raster)
        return cls(width=rle.width, height=rle.height, payload=rle)

    def to_array(self):
        from trackprune import maskops

        return maskops.rle_decode(self.payload)

    @property
    def area(self) -> int:
        """Foreground pixel count, read off the one-runs without decoding."""
        return int(sum(self.payload.counts[1::2]))


@dataclass(frozen=True)
class MaskTrack:
    """One object instance's per-frame masks. Absent frame key means not present."""

    track_id: int
    concept: str
    masks: dict[int, BitMask] = field(default_factory=dict)

    def __post_init__(self):
        for t, m in self.masks.items():
            if t < 0:
                raise ValueError(f"track {self.track_id}: negative frame index {t}")
            if not isinstance(m, BitMask):
                raise TypeError(f"track {self.track_id}: frame {t} is not a BitMask")

    def with_id(self, track_id: int) -> "MaskTrack":
        return MaskTrack(track_id=track_id, concept=self.concept, masks=self.masks)

    def mask_at(self, t: int) -> BitMask | None:
        return self.masks.get(t)

    def total_area(self) -> int:
        return sum(m.area for m in self.masks.values())


@dataclass(frozen=True)
class ConceptPair:
    """A (core, broader) noun-phrase pair for the concept segmenter."""

    core: str
    broad: str

    def __post_init__(self):
        if not self.core.strip() or not self.broad.strip():
            raise ValueError("concept pair fields must be non-empty")
        if self.core == self.broad:
            raise ValueError("core and broad concepts must differ")


@dataclass(frozen=True)
class Verdict:
    state: VerdictState
    rationale: str = ""


@dataclass(frozen=True)
class TemporalScope:
    """Ordered set of frame indices currently under consideration."""

    frames: tuple[int, ...]

    def __post_init__(self):
        for a, b in zip(self.frames, self.frames[1:]):
            if a >= b:
                raise ValueError("scope frames must be strictly increasing")
        if self.frames and self.frames[0] < 0:
            raise ValueError("scope frames must be non-negative")

    def __len__(self) -> int:
        return len(self.frames)

    def __contains__(self, t: int) -> bool:
        return t in set(self.frames)

    def is_empty(self) -> bool:
        return not self.frames

    def issubset(self, other: "TemporalScope") -> bool:
        return set(self.frames) <= set(other.frames)


@dataclass(frozen=True)
class PipelineConfig:
    """All tunables in one place; defaults follow the reference setup."""

    num_frames: int = 16
    max_extract_iters: int = 3
    max_prune_iters: int = 3
    temperature: float = 0.2
    max_output_tokens: int = 8192
    seed: int = 0
    boundary_tolerance_ratio: float = 0.008
    overlay_alpha: float = 0.5
    dedup_iou_threshold: float = 0.9
    reference_pad_factor: float = 2.0

    def __post_init__(self):
        for name in ("num_frames", "max_extract_iters", "max_prune_iters", "max_output_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not (0.0 < self.overlay_alpha <= 1.0):
            raise ValueError("overlay_alpha must be in (0, 1]")
        if self.boundary_tolerance_ratio <= 0:
            raise ValueError("boundary_tolerance_ratio must be > 0")


@dataclass
class RunState:
    """Mutable per-expression pipeline state, owned by a single driver."""

    candidates: list[MaskTrack] = field(default_factory=list)
    accepted: list[MaskTrack] = field(default_factory=list)
    rejected: list[MaskTrack] = field(default_factory=list)
    failure_set: list[list[ConceptPair]] = field(default_factory=list)
    selected_concepts: list[str] = field(default_factory=list)
    appearance: dict[int, str] = field(default_factory=dict)
    scope: TemporalScope = field(default_factory=lambda: TemporalScope(()))
    iteration: int = 0

    def check_disjoint(self) -> None:
        """Candidates/accepted/rejected must never share a track id."""
        cand = {t.track_id for t in self.candidates}
        acc = {t.track_id for t in self.accepted}
        rej = {t.track_id for t in self.rejected}
        if cand & acc or cand & rej or acc & rej:
            raise RuntimeError("track id appears in more than one of candidates/accepted/rejected")


def temporal_existence(track: MaskTrack) -> TemporalScope:
    """Frames where the track has at least one foreground pixel, sorted ascending.

    A stored all-zero mask counts as absent.
    """
    frames = sorted(t for t, m in track.masks.items() if m.area > 0)
    return TemporalScope(tuple(frames))


def union_scope(tracks: list[MaskTrack]) -> TemporalScope:
    """Sorted, deduplicated union of the tracks' existence sets."""
    frames: set[int] = set()
    for track in tracks:
        frames.update(temporal_existence(track).frames)
    return TemporalScope(tuple(sorted(frames)))
