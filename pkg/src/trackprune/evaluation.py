"""Dataset ingestion, J/F/J&F metrics, empty-mask ratio, and report generation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from trackprune import maskops
from trackprune.model import BitMask, MaskTrack, PipelineConfig, VideoRef


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class ExpressionRecord:
    video_id: str
    expression_id: str
    text: str
    gt_object_ids: frozenset[int]
    tag: str | None = None


@dataclass(frozen=True)
class EvalResult:
    J: float
    F: float
    JF: float
    is_empty_prediction: bool

    def __post_init__(self):
        for name in ("J", "F", "JF"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name}={value} outside [0, 1]")
        if abs(self.JF - (self.J + self.F) / 2.0) > 1e-12:
            raise ValueError("JF must be the arithmetic mean of J and F")


@dataclass
class Dataset:
    records: list[ExpressionRecord]
    videos: dict[str, VideoRef]
    # video_id -> object_id -> frame -> BitMask
    annotations: dict[str, dict[int, dict[int, BitMask]]]

    def gt_track(self, record: ExpressionRecord) -> MaskTrack:
        """Union ground-truth mask over the expression's object ids."""
        video = self.videos[record.video_id]
        per_object = self.annotations[record.video_id]
        tracks = [
            MaskTrack(track_id=obj_id, concept=str(obj_id), masks=per_object[obj_id])
            for obj_id in sorted(record.gt_object_ids)
        ]
        return maskops.merge_tracks(tracks, video.num_frames, video.height, video.width)


def _read_meta(meta_path: Path) -> dict:
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"meta file not found: {meta_path}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed meta JSON in {meta_path}: {exc}") from exc
    if not isinstance(meta.get("videos"), dict):
        raise DatasetError(f"meta {meta_path} lacks a 'videos' mapping")
    return meta


def _load_palette_annotations(ann_dir: Path, frame_names: list[str], video_id: str):
    per_object: dict[int, dict[int, BitMask]] = {}
    for t, name in enumerate(frame_names):
        path = ann_dir / f"{Path(name).stem}.png"
        if not path.exists():
            raise DatasetError(f"video {video_id!r}: missing annotation frame {path.name}")
        arr = np.asarray(Image.open(path))
        if arr.ndim == 3:
            arr = arr[..., 0]
        for obj_id in np.unique(arr):
            if obj_id == 0:
                continue
            mask = (arr == obj_id).astype(np.uint8)
            per_object.setdefault(int(obj_id), {})[t] = BitMask.from_array(mask)
    return per_object


def _load_rle_annotations(ann_file: Path, video_id: str):
    try:
        payload = json.loads(ann_file.read_text())
        objects = payload["objects"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"video {video_id!r}: malformed annotation JSON {ann_file}") from exc
    per_object: dict[int, dict[int, BitMask]] = {}
    for obj_key, frames in objects.items():
        obj_id = int(obj_key)
        for frame_key, rle_obj in frames.items():
            rle = maskops.RleMask.from_json_dict(rle_obj)
            per_object.setdefault(obj_id, {})[int(frame_key)] = BitMask(
                width=rle.width, height=rle.height, payload=rle
            )
    return per_object


def load_dataset(meta_path, annotations_root, frames_root) -> Dataset:
    """Parse a MeViS-style tree: meta JSON, frame images, per-video ground truth.

    Ground truth is auto-detected: a per-video directory of palette-indexed
    PNGs (pixel value = object id) or a per-video `<vid>.json` of per-object
    RLE masks. Pass annotations_root=None for unlabeled (test) splits.
    """
    meta_path = Path(meta_path)
    annotations_root = Path(annotations_root) if annotations_root is not None else None
    frames_root = Path(frames_root)
    meta = _read_meta(meta_path)

    records: list[ExpressionRecord] = []
    videos: dict[str, VideoRef] = {}
    annotations: dict[str, dict[int, dict[int, BitMask]]] = {}

    for video_id in sorted(meta["videos"]):
        entry = meta["videos"][video_id]
        frame_names = entry.get("frames")
        if not isinstance(frame_names, list) or not frame_names:
            raise DatasetError(f"video {video_id!r}: meta lists no frames")
        frame_paths = []
        for name in frame_names:
            path = frames_root / video_id / name
            if not path.exists():
                raise DatasetError(f"video {video_id!r}: missing frame file {path}")
            frame_paths.append(str(path))
        with Image.open(frame_paths[0]) as img:
            width, height = img.size
        videos[video_id] = VideoRef(
            video_id=video_id, frame_paths=tuple(frame_paths), width=width, height=height
        )

        if annotations_root is not None:
            ann_dir = annotations_root / video_id
            ann_file = annotations_root / f"{video_id}.json"
            if ann_dir.is_dir():
                listed = sorted(p.name for p in ann_dir.glob("*.png"))
                if len(listed) != len(frame_names):
                    raise DatasetError(
                        f"video {video_id!r}: {len(listed)} annotation frames for "
                        f"{len(frame_names)} meta frames"
                    )
                annotations[video_id] = _load_palette_annotations(ann_dir, frame_names, video_id)
            elif ann_file.exists():
                annotations[video_id] = _load_rle_annotations(ann_file, video_id)
            else:
                raise DatasetError(f"video {video_id!r}: no annotations at {ann_dir} or {ann_file}")

        expressions = entry.get("expressions")
        if not isinstance(expressions, dict):
            raise DatasetError(f"video {video_id!r}: meta lists no expressions")
        known_ids = set(annotations.get(video_id, {}))
        for expression_id in sorted(expressions):
            exp_entry = expressions[expression_id]
            try:
                text = exp_entry["exp"]
                obj_ids = frozenset(int(i) for i in exp_entry.get("obj_id", []))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(
                    f"video {video_id!r}: malformed expression {expression_id!r}"
                ) from exc
            if annotations_root is not None and not obj_ids <= known_ids:
                raise DatasetError(
                    f"video {video_id!r}: expression {expression_id!r} references "
                    f"unknown object ids {sorted(obj_ids - known_ids)}"
                )
            records.append(
                ExpressionRecord(
                    video_id=video_id,
                    expression_id=expression_id,
                    text=text,
                    gt_object_ids=obj_ids,
                    tag=exp_entry.get("tag"),
                )
            )
    return Dataset(records=records, videos=videos, annotations=annotations)


def eval_expression(
    pred: MaskTrack, gt: MaskTrack, num_frames: int, config: PipelineConfig | None = None
) -> EvalResult:
    """Frame-averaged J and F over all frames, including empty-GT frames."""
    config = config or PipelineConfig()
    j_values = []
    f_values = []
    for t in range(num_frames):
        pm = pred.mask_at(t)
        gm = gt.mask_at(t)
        p_empty = pm is None or pm.area == 0
        g_empty = gm is None or gm.area == 0
        if p_empty and g_empty:
            j_values.append(1.0)
            f_values.append(1.0)
            continue
        shape_src = pm if pm is not None else gm
        shape = (shape_src.height, shape_src.width)
        p_arr = pm.to_array() if pm is not None else np.zeros(shape, dtype=np.uint8)
        g_arr = gm.to_array() if gm is not None else np.zeros(shape, dtype=np.uint8)
        j_values.append(maskops.mask_iou(p_arr, g_arr))
        f_values.append(maskops.boundary_f(p_arr, g_arr, config.boundary_tolerance_ratio))
    j = float(np.mean(j_values)) if j_values else 1.0
    f = float(np.mean(f_values)) if f_values else 1.0
    return EvalResult(
        J=j, F=f, JF=(j + f) / 2.0, is_empty_prediction=pred.total_area() == 0
    )


@dataclass
class Report:
    num_expressions: int
    mean_j: float
    mean_f: float
    mean_jf: float
    empty_mask_ratio: float  # percent
    rows: list[dict] = field(default_factory=list)
    per_tag: dict[str, dict] = field(default_factory=dict)
    k_used_histogram: dict[int, int] = field(default_factory=dict)
    prune_iterations_histogram: dict[int, int] = field(default_factory=dict)

    def summary_line(self) -> str:
        return (
            f"J: {100 * self.mean_j:.1f}  F: {100 * self.mean_f:.1f}  "
            f"J&F: {100 * self.mean_jf:.1f}  empty-mask ratio: {self.empty_mask_ratio:.1f}%"
        )

    def to_json_dict(self) -> dict:
        return {
            "num_expressions": self.num_expressions,
            "J": self.mean_j,
            "F": self.mean_f,
            "JF": self.mean_jf,
            "empty_mask_ratio_percent": self.empty_mask_ratio,
            "per_tag": self.per_tag,
            "k_used_histogram": {str(k): v for k, v in sorted(self.k_used_histogram.items())},
            "prune_iterations_histogram": {
                str(k): v for k, v in sorted(self.prune_iterations_histogram.items())
            },
            "rows": self.rows,
        }

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        fields = ["video_id", "expression_id", "tag", "J", "F", "JF", "empty", "k_used", "prune_iterations"]
        writer = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in self.rows:
            writer.writerow(row)
        return buf.getvalue()


def aggregate(results: list[EvalResult], meta: list[dict] | None = None) -> Report:
    """Unweighted means across expressions plus provenance histograms."""
    if not results:
        raise ValueError("aggregate requires at least one result")
    if meta is not None and len(meta) != len(results):
        raise ValueError("meta must align one-to-one with results")
    meta = meta or [{} for _ in results]

    rows = []
    for result, info in zip(results, meta):
        row = {
            "video_id": info.get("video_id", ""),
            "expression_id": info.get("expression_id", ""),
            "tag": info.get("tag", ""),
            "J": result.J,
            "F": result.F,
            "JF": result.JF,
            "empty": result.is_empty_prediction,
        }
        for key in ("k_used", "prune_iterations"):
            if key in info:
                row[key] = info[key]
        rows.append(row)

    def mean_of(values):
        return float(np.mean(values))

    per_tag: dict[str, dict] = {}
    tags = {row["tag"] for row in rows if row["tag"]}
    for tag in sorted(tags):
        tagged = [row for row in rows if row["tag"] == tag]
        per_tag[tag] = {
            "num_expressions": len(tagged),
            "J": mean_of([r["J"] for r in tagged]),
            "F": mean_of([r["F"] for r in tagged]),
            "JF": mean_of([r["JF"] for r in tagged]),
        }

    k_hist: dict[int, int] = {}
    r_hist: dict[int, int] = {}
    for info in meta:
        if "k_used" in info:
            k_hist[info["k_used"]] = k_hist.get(info["k_used"], 0) + 1
        if "prune_iterations" in info:
            r_hist[info["prune_iterations"]] = r_hist.get(info["prune_iterations"], 0) + 1

    return Report(
        num_expressions=len(results),
        mean_j=mean_of([r.J for r in results]),
        mean_f=mean_of([r.F for r in results]),
        mean_jf=mean_of([r.JF for r in results]),
        empty_mask_ratio=100.0 * sum(r.is_empty_prediction for r in results) / len(results),
        rows=rows,
        per_tag=per_tag,
        k_used_histogram=k_hist,
        prune_iterations_histogram=r_hist,
    )


# ---------------------------------------------------------------------------
# prediction files


def write_prediction(
    out_dir, video: VideoRef, expression_id: str, track: MaskTrack, meta: dict | None = None
) -> Path:
    """Write per-frame binary PNGs plus a pred.json with RLE masks for every frame."""
    pred_dir = Path(out_dir) / video.video_id / str(expression_id)
    pred_dir.mkdir(parents=True, exist_ok=True)
    empty = BitMask.from_array(np.zeros((video.height, video.width), dtype=np.uint8))
    masks_json = {}
    for t in range(video.num_frames):
        mask = track.mask_at(t) or empty
        arr = mask.to_array() * np.uint8(255)
        Image.fromarray(arr, mode="L").save(pred_dir / f"{t:05d}.png")
        masks_json[str(t)] = mask.payload.to_json_dict()
    payload = {
        "video_id": video.video_id,
        "expression_id": str(expression_id),
        "num_frames": video.num_frames,
        "width": video.width,
        "height": video.height,
        "masks": masks_json,
        "meta": meta or {},
    }
    (pred_dir / "pred.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    return pred_dir


def load_prediction(pred_dir) -> tuple[MaskTrack, dict]:
    """Read a prediction back from its pred.json (the RLE side is authoritative)."""
    path = Path(pred_dir) / "pred.json"
    payload = json.loads(path.read_text())
    masks = {}
    for key, rle_obj in payload["masks"].items():
        rle = maskops.RleMask.from_json_dict(rle_obj)
        masks[int(key)] = BitMask(width=rle.width, height=rle.height, payload=rle)
    track = MaskTrack(track_id=0, concept="prediction", masks=masks)
    return track, payload


def write_report(report: Report, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
    (out / "report.csv").write_text(report.to_csv_text())
