"""Segmenter backends and mask conversion to the wire format."""

from __future__ import annotations

import base64
import binascii
import json
from abc import ABC, abstractmethod
from importlib import resources
from pathlib import Path

import numpy as np

SOFT_MASK_THRESHOLD = 0.5


class SegmenterError(Exception):
    pass


class FramesUndecodable(SegmenterError):
    """Frame payloads could not be decoded (HTTP 422)."""


class ModelNotLoaded(SegmenterError):
    """The configured checkpoint is not available (HTTP 503)."""


def rle_encode_mask(raster: np.ndarray) -> dict:
    """Column-major uncompressed RLE, zero-run first (the wire mask format)."""
    arr = np.asarray(raster)
    h, w = arr.shape
    flat = arr.ravel(order="F").astype(np.int64)
    if flat.size == 0:
        return {"size": [h, w], "counts": [0]}
    change = np.flatnonzero(np.diff(flat)) + 1
    boundaries = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(boundaries).tolist()
    counts = runs if flat[0] == 0 else [0] + runs
    return {"size": [h, w], "counts": [int(c) for c in counts]}


def binarize_soft_mask(soft: np.ndarray) -> np.ndarray:
    """Probability maps become binary at the 0.5 threshold."""
    return (np.asarray(soft, dtype=np.float64) >= SOFT_MASK_THRESHOLD).astype(np.uint8)


def tracks_to_wire(per_instance: list[dict[int, np.ndarray]]) -> dict:
    """Per-instance {frame -> soft or binary mask} into the response shape."""
    tracks = []
    for track_id, frames in enumerate(per_instance):
        masks = {}
        for t in sorted(frames):
            raster = frames[t]
            if raster.dtype.kind == "f":
                raster = binarize_soft_mask(raster)
            masks[str(t)] = rle_encode_mask(raster)
        tracks.append({"track_id": track_id, "masks": masks})
    return {"tracks": tracks}


def decode_frames(frames: list[str], encoding: str) -> list[bytes | str]:
    """Resolve the request's frame references; b64 payloads must decode."""
    if encoding == "path":
        return list(frames)
    decoded = []
    for i, payload in enumerate(frames):
        try:
            decoded.append(base64.b64decode(payload, validate=True))
        except (binascii.Error, ValueError) as exc:
            raise FramesUndecodable(f"frame {i} is not valid base64") from exc
    return decoded


class SegmenterBackend(ABC):
    @abstractmethod
    def segment(self, request: dict, frames: list) -> dict:
        """Return the `{"tracks": [...]}` response body for one request."""


class StubSegmenter(SegmenterBackend):
    """Echoes a fixture track set; lets contract tests run without weights."""

    def __init__(self, fixture_path: str | Path | None = None):
        if fixture_path is None:
            text = (resources.files("trackprune_adapter") / "fixtures" / "stub_tracks.json").read_text()
        else:
            text = Path(fixture_path).read_text()
        self.fixture = json.loads(text)
        self.last_request: dict | None = None

    def segment(self, request: dict, frames: list) -> dict:
        self.last_request = request
        return {"tracks": self.fixture["tracks"]}


class CheckpointSegmenter(SegmenterBackend):
    """Placeholder for a real concept segmenter; reports unloaded until wired."""

    def __init__(self, checkpoint: str | None, device: str = "cpu"):
        self.checkpoint = checkpoint
        self.device = device
        self.model = None  # deployments attach the real model here

    def segment(self, request: dict, frames: list) -> dict:
        if self.model is None:
            raise ModelNotLoaded(f"checkpoint {self.checkpoint!r} is not loaded")
        per_instance = self.model.segment_video(frames, request["concept"])
        return tracks_to_wire(per_instance)
