"""Binary-mask numerics and rendering: RLE codec, IoU, boundary F, merge, overlays."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np
from PIL import Image
from scipy import ndimage

if TYPE_CHECKING:
    from trackprune.model import MaskTrack, VideoRef

# 8 fixed high-contrast colors; candidate color = PALETTE[track_id % 8].
PALETTE: tuple[tuple[int, int, int], ...] = (
    (230, 25, 75),    # red
    (60, 180, 75),    # green
    (0, 130, 200),    # blue
    (255, 225, 25),   # yellow
    (245, 130, 48),   # orange
    (145, 30, 180),   # purple
    (70, 240, 240),   # cyan
    (240, 50, 230),   # magenta
)

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

# 3x5 digit glyphs for track-id labels; rendering must not depend on system fonts.
_DIGITS = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "7": ("111", "001", "010", "010", "010"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
}
_GLYPH_SCALE = 2


class RleError(ValueError):
    pass


@dataclass(frozen=True)
class RleMask:
    """Uncompressed column-major RLE: counts alternate zero-runs/one-runs.

    The first element is always the initial zero-run (may be 0); decoding scans
    top-to-bottom then left-to-right.
    """

    size: tuple[int, int]  # (height, width)
    counts: tuple[int, ...]

    def __post_init__(self):
        if any(c < 0 for c in self.counts):
            raise RleError("RLE counts must be non-negative")

    @property
    def height(self) -> int:
        return self.size[0]

    @property
    def width(self) -> int:
        return self.size[1]

    def to_json_dict(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "RleMask":
        try:
            h, w = obj["size"]
            counts = tuple(int(c) for c in obj["counts"])
        except (KeyError, TypeError, ValueError) as exc:
            raise RleError(f"malformed RLE object: {obj!r}") from exc
        return cls(size=(int(h), int(w)), counts=counts)


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel bounding box."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError("degenerate bounding box")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError("bounding box outside image")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1


def round_half_up(x: float) -> int:
    """Deterministic rounding used for frame sampling and dilation radii."""
    return int(math.floor(x + 0.5))


def rle_encode(raster: np.ndarray) -> RleMask:
    arr = np.asarray(raster)
    if arr.ndim != 2:
        raise RleError(f"expected a 2-D raster, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise RleError("raster cells must be 0 or 1")
    h, w = arr.shape
    flat = arr.ravel(order="F").astype(np.int64)
    if flat.size == 0:
        return RleMask(size=(h, w), counts=(0,))
    change = np.flatnonzero(np.diff(flat)) + 1
    boundaries = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(boundaries).tolist()
    counts = runs if flat[0] == 0 else [0] + runs
    return RleMask(size=(h, w), counts=tuple(int(c) for c in counts))


def rle_decode(rle: RleMask) -> np.ndarray:
    h, w = rle.size
    total = sum(rle.counts)
    if total != h * w:
        raise RleError(f"RLE counts sum to {total}, expected {h}x{w}={h * w}")
    flat = np.zeros(total, dtype=np.uint8)
    pos = 0
    value = 0
    for run in rle.counts:
        if value:
            flat[pos:pos + run] = 1
        pos += run
        value = 1 - value
    return flat.reshape((h, w), order="F")


def _as_bool(mask) -> np.ndarray:
    if hasattr(mask, "to_array"):
        mask = mask.to_array()
    return np.asarray(mask).astype(bool)


def mask_iou(a, b) -> float:
    """Intersection over union; both-empty defined as 1.0."""
    a = _as_bool(a)
    b = _as_bool(b)
    if a.shape != b.shape:
        raise ValueError(f"mask dimensions differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """1-pixel inner boundary: foreground with a background 4-neighbor.

    The image border counts as background, so edge-touching foreground is boundary.
    """
    fg = _as_bool(mask)
    eroded = ndimage.binary_erosion(fg, structure=_CROSS, border_value=0)
    return fg & ~eroded


def _disk(radius: int) -> np.ndarray:
    if radius <= 0:
        return np.ones((1, 1), dtype=bool)
    y, x = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    return x * x + y * y <= radius * radius


def boundary_f(pred, gt, tolerance_ratio: float) -> float:
    """Boundary F-measure with a disk tolerance of round(ratio * image diagonal)."""
    if tolerance_ratio <= 0:
        raise ValueError("tolerance_ratio must be > 0")
    p = _as_bool(pred)
    g = _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask dimensions differ: {p.shape} vs {g.shape}")
    if not p.any() and not g.any():
        return 1.0
    if not p.any() or not g.any():
        return 0.0
    h, w = p.shape
    radius = round_half_up(tolerance_ratio * math.hypot(h, w))
    pb = boundary_pixels(p)
    gb = boundary_pixels(g)
    disk = _disk(radius)
    gb_dilated = ndimage.binary_dilation(gb, structure=disk)
    pb_dilated = ndimage.binary_dilation(pb, structure=disk)
    precision = float((pb & gb_dilated).sum() / pb.sum())
    recall = float((gb & pb_dilated).sum() / gb.sum())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def merge_tracks(tracks: list["MaskTrack"], num_frames: int, height: int, width: int) -> "MaskTrack":
    """Per-frame pixel-wise union of the given tracks."""
    from trackprune.model import BitMask, MaskTrack

    merged: dict[int, BitMask] = {}
    frames = sorted({t for track in tracks for t in track.masks})
    for t in frames:
        if t >= num_frames:
            raise ValueError(f"track frame {t} outside video of length {num_frames}")
        acc = np.zeros((height, width), dtype=bool)
        for track in tracks:
            m = track.mask_at(t)
            if m is not None:
                acc |= _as_bool(m)
        merged[t] = BitMask.from_array(acc.astype(np.uint8))
    concept = " + ".join(dict.fromkeys(track.concept for track in tracks)) or "empty"
    return MaskTrack(track_id=0, concept=concept, masks=merged)


def mask_centroid(mask) -> tuple[float, float]:
    """(x, y) mean of foreground coordinates; requires a nonempty mask."""
    fg = _as_bool(mask)
    ys, xs = np.nonzero(fg)
    if xs.size == 0:
        raise ValueError("centroid of an empty mask")
    return float(xs.mean()), float(ys.mean())


def bbox_of(mask) -> BBox:
    fg = _as_bool(mask)
    ys, xs = np.nonzero(fg)
    if xs.size == 0:
        raise ValueError("bounding box of an empty mask")
    return BBox(x_min=int(xs.min()), y_min=int(ys.min()), x_max=int(xs.max()), y_max=int(ys.max()))


def largest_area_frame(track: "MaskTrack") -> int:
    """Frame index with the most foreground pixels; earliest frame wins ties."""
    best_t = None
    best_area = 0
    for t in sorted(track.masks):
        area = track.masks[t].area
        if area > best_area:
            best_t, best_area = t, area
    if best_t is None:
        raise ValueError(f"track {track.track_id} has no nonempty mask")
    return best_t


def _draw_glyph(out: np.ndarray, text: str, cx: int, cy: int, color) -> None:
    rows = 5 * _GLYPH_SCALE
    cols = len(text) * 3 * _GLYPH_SCALE + (len(text) - 1) * _GLYPH_SCALE
    top = cy - rows // 2
    left = cx - cols // 2
    h, w = out.shape[:2]
    x = left
    for ch in text:
        glyph = _DIGITS.get(ch)
        if glyph is None:
            continue
        for gy, line in enumerate(glyph):
            for gx, bit in enumerate(line):
                if bit != "1":
                    continue
                y0 = top + gy * _GLYPH_SCALE
                x0 = x + gx * _GLYPH_SCALE
                for dy in range(_GLYPH_SCALE):
                    for dx in range(_GLYPH_SCALE):
                        yy, xx = y0 + dy, x0 + dx
                        if 0 <= yy < h and 0 <= xx < w:
                            out[yy, xx] = color
        x += 4 * _GLYPH_SCALE


def render_overlay(frame: np.ndarray, candidates, palette=PALETTE, alpha: float = 0.5) -> np.ndarray:
    """Set-of-marks overlay: per-candidate color blend, opaque contour, id numeral.

    `candidates` is a list of (track_id, mask); masks with no foreground are skipped.
    """
    out = np.asarray(frame, dtype=np.float64).copy()
    visible = []
    for track_id, mask in candidates:
        fg = _as_bool(mask)
        if fg.shape != out.shape[:2]:
            raise ValueError("candidate mask does not match frame dimensions")
        if fg.any():
            visible.append((track_id, fg))
    for track_id, fg in visible:
        color = np.array(palette[track_id % len(palette)], dtype=np.float64)
        out[fg] = (1.0 - alpha) * out[fg] + alpha * color
    for track_id, fg in visible:
        color = palette[track_id % len(palette)]
        out[boundary_pixels(fg)] = color
        cx, cy = mask_centroid(fg)
        _draw_glyph(out, str(track_id), round_half_up(cx), round_half_up(cy), color)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def load_frame(path: str) -> np.ndarray:
    """Read one frame image as an RGB uint8 array."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def encode_png(arr: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    import io

    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("RGB"))


def expand_bbox(box: BBox, pad_factor: float, width: int, height: int) -> BBox:
    """Grow the box by pad_factor about its center, clamped to the image."""
    extra_x = round_half_up(box.width * (pad_factor - 1.0) / 2.0)
    extra_y = round_half_up(box.height * (pad_factor - 1.0) / 2.0)
    return BBox(
        x_min=max(0, box.x_min - extra_x),
        y_min=max(0, box.y_min - extra_y),
        x_max=min(width - 1, box.x_max + extra_x),
        y_max=min(height - 1, box.y_max + extra_y),
    )


_PANEL_GAP = 4
_OUTLINE_COLOR = (255, 255, 255)


def make_reference_image(
    video: "VideoRef",
    track: "MaskTrack",
    pad_factor: float = 2.0,
    frame_loader: Callable[[str], np.ndarray] = load_frame,
) -> np.ndarray:
    """Two-panel reference image from the track's largest-area frame.

    Left: loosely cropped context view with the tight box outlined.
    Right: tight crop of the object.
    """
    if pad_factor < 1.0:
        raise ValueError("pad_factor must be >= 1.0")
    t = largest_area_frame(track)
    raster = track.masks[t].to_array()
    box = bbox_of(raster)
    frame = frame_loader(video.frame_paths[t])
    if frame.shape[:2] != (video.height, video.width):
        raise ValueError(f"frame {t} of {video.video_id!r} does not match video dimensions")

    tight = frame[box.y_min:box.y_max + 1, box.x_min:box.x_max + 1]
    loose_box = expand_bbox(box, pad_factor, video.width, video.height)
    loose = frame[loose_box.y_min:loose_box.y_max + 1, loose_box.x_min:loose_box.x_max + 1].copy()

    # outline the tight box in loose-crop coordinates
    x0, x1 = box.x_min - loose_box.x_min, box.x_max - loose_box.x_min
    y0, y1 = box.y_min - loose_box.y_min, box.y_max - loose_box.y_min
    loose[y0, x0:x1 + 1] = _OUTLINE_COLOR
    loose[y1, x0:x1 + 1] = _OUTLINE_COLOR
    loose[y0:y1 + 1, x0] = _OUTLINE_COLOR
    loose[y0:y1 + 1, x1] = _OUTLINE_COLOR

    h = max(loose.shape[0], tight.shape[0])
    w = loose.shape[1] + _PANEL_GAP + tight.shape[1]
    canvas = np.zeros((h, w, 3), dtype=np.uint8)
    canvas[:loose.shape[0], :loose.shape[1]] = loose
    canvas[:tight.shape[0], loose.shape[1] + _PANEL_GAP:] = tight
    return canvas
