"""Concept-segmentation backends: HTTP client and a deterministic synthetic world."""

from __future__ import annotations

import base64
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np
import requests

from trackprune import maskops
from trackprune.model import BitMask, MaskTrack, VideoRef, temporal_existence

RETRY_ATTEMPTS = 3
RETRY_BASE_DELAY = 0.5
RETRYABLE_STATUS = (502, 503, 504)


class BackendError(Exception):
    """Base class for backend failures."""


class TransportError(BackendError):
    """Connection-level failure that survived all retries."""


class ProtocolError(BackendError):
    """The backend answered, but not in the agreed wire format."""


@dataclass(frozen=True)
class PerceptionRequest:
    video: VideoRef
    concept: str

    def __post_init__(self):
        if not self.concept.strip():
            raise ValueError("concept must be non-empty")


class PerceptionBackend(ABC):
    """The concept-segmentation role: noun phrase in, mask tracks out."""

    @abstractmethod
    def segment_concept(self, video: VideoRef, concept: str) -> list[MaskTrack]:
        """Return one track per matching object instance; [] if nothing matches."""


def count_detections(tracks: list[MaskTrack]) -> int:
    """Total nonempty per-frame detections summed over all tracks."""
    return sum(len(temporal_existence(t)) for t in tracks)


def _tracks_from_payload(payload: dict, video: VideoRef) -> list[MaskTrack]:
    try:
        raw_tracks = payload["tracks"]
    except (TypeError, KeyError) as exc:
        raise ProtocolError(f"response missing 'tracks': {payload!r}") from exc
    if not isinstance(raw_tracks, list):
        raise ProtocolError("'tracks' must be a list")
    tracks = []
    for raw in raw_tracks:
        try:
            track_id = int(raw["track_id"])
            raw_masks = raw["masks"]
        except (TypeError, KeyError, ValueError) as exc:
            raise ProtocolError(f"malformed track entry: {raw!r}") from exc
        masks: dict[int, BitMask] = {}
        for key, rle_obj in raw_masks.items():
            try:
                t = int(key)
            except ValueError as exc:
                raise ProtocolError(f"non-integer frame key {key!r}") from exc
            rle = maskops.RleMask.from_json_dict(rle_obj)
            if rle.size != (video.height, video.width):
                raise ProtocolError(
                    f"mask size {rle.size} does not match video {video.height}x{video.width}"
                )
            try:
                masks[t] = BitMask(width=rle.width, height=rle.height, payload=rle)
            except ValueError as exc:
                raise ProtocolError(str(exc)) from exc
        tracks.append(MaskTrack(track_id=track_id, concept="", masks=masks))
    return tracks


class HttpPerceptionClient(PerceptionBackend):
    """Client for the `/v1/segment` wire protocol.

    Shareable across workers: each call is independent and stateless.
    """

    def __init__(
        self,
        base_url: str,
        frame_encoding: str = "path",
        timeout: float = 120.0,
        session: requests.Session | None = None,
        sleep=time.sleep,
    ):
        if frame_encoding not in ("path", "b64"):
            raise ValueError("frame_encoding must be 'path' or 'b64'")
        self.base_url = base_url.rstrip("/")
        self.frame_encoding = frame_encoding
        self.timeout = timeout
        self.session = session or requests.Session()
        self._sleep = sleep

    def build_request_payload(self, video: VideoRef, concept: str) -> dict:
        PerceptionRequest(video=video, concept=concept)  # validates
        if self.frame_encoding == "path":
            frames = list(video.frame_paths)
        else:
            frames = []
            for path in video.frame_paths:
                with open(path, "rb") as fh:
                    frames.append(base64.b64encode(fh.read()).decode("ascii"))
        return {
            "video_id": video.video_id,
            "frames": frames,
            "width": video.width,
            "height": video.height,
            "concept": concept,
            "frame_encoding": self.frame_encoding,
        }

    def segment_concept(self, video: VideoRef, concept: str) -> list[MaskTrack]:
        payload = self.build_request_payload(video, concept)
        body = self._post_with_retry(f"{self.base_url}/v1/segment", payload)
        tracks = _tracks_from_payload(body, video)
        return [MaskTrack(track_id=t.track_id, concept=concept, masks=t.masks) for t in tracks]

    def _post_with_retry(self, url: str, payload: dict) -> dict:
        last_exc: Exception | None = None
        for attempt in range(RETRY_ATTEMPTS):
            try:
                resp = self.session.post(url, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                self._sleep(RETRY_BASE_DELAY * (2 ** attempt))
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last_exc = TransportError(f"{url} -> {resp.status_code}")
                self._sleep(RETRY_BASE_DELAY * (2 ** attempt))
                continue
            if resp.status_code != 200:
                raise ProtocolError(f"{url} -> {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"{url} returned non-JSON body") from exc
        raise TransportError(f"{url} unreachable after {RETRY_ATTEMPTS} attempts: {last_exc}")


# ---------------------------------------------------------------------------
# synthetic world


@dataclass(frozen=True)
class SimObject:
    """One synthetic object: labeled shape with explicit per-frame placements."""

    object_id: int
    concept_labels: frozenset[str]
    shape: str  # "rect" | "ellipse"
    color: tuple[int, int, int]
    placements: dict[int, tuple[int, int, int, int]]  # frame -> inclusive (x0, y0, x1, y1)

    def __post_init__(self):
        if self.shape not in ("rect", "ellipse"):
            raise ValueError(f"unknown shape {self.shape!r}")

    def raster_at(self, t: int, height: int, width: int) -> np.ndarray | None:
        box = self.placements.get(t)
        if box is None:
            return None
        return rasterize_shape(self.shape, box, height, width)

    def existence(self) -> tuple[int, ...]:
        return tuple(sorted(self.placements))


@dataclass(frozen=True)
class SimWorld:
    """A deterministic synthetic video: canvas, duration, labeled moving objects."""

    video_id: str
    width: int
    height: int
    num_frames: int
    background: tuple[int, int, int]
    objects: tuple[SimObject, ...]
    seed: int = 0

    def __post_init__(self):
        for obj in self.objects:
            for t, (x0, y0, x1, y1) in obj.placements.items():
                if not (0 <= t < self.num_frames):
                    raise ValueError(f"object {obj.object_id} placed outside video at t={t}")
                if not (0 <= x0 <= x1 < self.width and 0 <= y0 <= y1 < self.height):
                    raise ValueError(f"object {obj.object_id} placement outside canvas at t={t}")

    def render_frame(self, t: int) -> np.ndarray:
        frame = np.empty((self.height, self.width, 3), dtype=np.uint8)
        frame[:, :] = self.background
        for obj in self.objects:
            raster = obj.raster_at(t, self.height, self.width)
            if raster is not None:
                frame[raster.astype(bool)] = obj.color
        return frame

    def object_by_id(self, object_id: int) -> SimObject:
        for obj in self.objects:
            if obj.object_id == object_id:
                return obj
        raise KeyError(object_id)


def rasterize_shape(shape: str, box: tuple[int, int, int, int], height: int, width: int) -> np.ndarray:
    """Rasterize a rect or ellipse over inclusive integer bounds."""
    x0, y0, x1, y1 = box
    out = np.zeros((height, width), dtype=np.uint8)
    if shape == "rect":
        out[y0:y1 + 1, x0:x1 + 1] = 1
        return out
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    rx, ry = (x1 - x0) / 2.0, (y1 - y0) / 2.0
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    if rx == 0 or ry == 0:
        inside = np.ones_like(xs, dtype=bool)
    else:
        inside = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    out[y0:y1 + 1, x0:x1 + 1] = inside.astype(np.uint8)
    return out


class SimPerception(PerceptionBackend):
    """Exact-oracle segmenter over SimWorlds: matches concepts by label set."""

    def __init__(self, worlds: dict[str, SimWorld] | list[SimWorld]):
        if isinstance(worlds, list):
            worlds = {w.video_id: w for w in worlds}
        self.worlds = dict(worlds)

    def segment_concept(self, video: VideoRef, concept: str) -> list[MaskTrack]:
        world = self.worlds.get(video.video_id)
        if world is None:
            raise ProtocolError(f"no simulated world for video {video.video_id!r}")
        tracks = []
        local_id = 0
        for obj in sorted(world.objects, key=lambda o: o.object_id):
            if concept not in obj.concept_labels:
                continue
            masks = {}
            for t in obj.existence():
                raster = obj.raster_at(t, world.height, world.width)
                masks[t] = BitMask.from_array(raster)
            tracks.append(MaskTrack(track_id=local_id, concept=concept, masks=masks))
            local_id += 1
        return tracks
