"""Per-expression pipeline driver and the batch runner behind the CLI."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from trackprune import maskops
from trackprune.appearance import gather_appearance
from trackprune.evaluation import (
    Dataset,
    EvalResult,
    ExpressionRecord,
    eval_expression,
    load_prediction,
    write_prediction,
)
from trackprune.extraction import candidate_generation_loop
from trackprune.model import MaskTrack, PipelineConfig, Query, QueryType, VideoRef
from trackprune.perception import PerceptionBackend, TransportError
from trackprune.pruning import PruneIterationRecord, run_pruning
from trackprune.reasoning import PromptTemplate, ReasonerBackend


@dataclass
class ExpressionRunResult:
    record: ExpressionRecord
    prediction: MaskTrack
    query_type: QueryType = QueryType.UNKNOWN
    k_used: int = 0
    failure_set: list = field(default_factory=list)
    selected_concepts: list[str] = field(default_factory=list)
    appearance: dict[int, str] = field(default_factory=dict)
    prune_records: list[PruneIterationRecord] = field(default_factory=list)
    error: str | None = None

    @property
    def is_empty(self) -> bool:
        return self.prediction.total_area() == 0

    def meta_dict(self) -> dict:
        return {
            "video_id": self.record.video_id,
            "expression_id": self.record.expression_id,
            "tag": self.record.tag or "",
            "query_type": self.query_type.value,
            "k_used": self.k_used,
            "prune_iterations": len(self.prune_records),
            "empty": self.is_empty,
            "error": self.error,
        }

    def trace_dict(self) -> dict:
        return {
            "video_id": self.record.video_id,
            "expression_id": self.record.expression_id,
            "query": self.record.text,
            "query_type": self.query_type.value,
            "k_used": self.k_used,
            "failure_set": [
                [[p.core, p.broad] for p in round_pairs] for round_pairs in self.failure_set
            ],
            "selected_concepts": list(self.selected_concepts),
            "appearance": {str(k): v for k, v in sorted(self.appearance.items())},
            "empty": self.is_empty,
            "error": self.error,
            "iterations": [r.to_json_dict() for r in self.prune_records],
        }


def run_expression(
    record: ExpressionRecord,
    video: VideoRef,
    perception: PerceptionBackend,
    reasoner: ReasonerBackend,
    templates: dict[str, PromptTemplate],
    config: PipelineConfig,
    frame_loader=maskops.load_frame,
) -> ExpressionRunResult:
    """Candidate generation, then the optional appearance tool, then pruning."""
    query = Query(text=record.text)
    outcome = candidate_generation_loop(
        query, video, perception, reasoner, templates, config, frame_loader
    )
    appearance: dict[int, str] = {}
    prune_records: list[PruneIterationRecord] = []
    if outcome.candidates:
        appearance = gather_appearance(
            query, outcome.candidates, video, reasoner, templates, config, frame_loader
        )
        prediction, prune_records = run_pruning(
            outcome.candidates,
            video,
            query,
            outcome.selected_concepts,
            appearance,
            reasoner,
            templates,
            config,
            frame_loader,
        )
    else:
        prediction = MaskTrack(track_id=0, concept="empty", masks={})
    return ExpressionRunResult(
        record=record,
        prediction=prediction,
        query_type=outcome.query_type,
        k_used=outcome.k_used,
        failure_set=outcome.failure_set,
        selected_concepts=outcome.selected_concepts,
        appearance=appearance,
        prune_records=prune_records,
    )


def _safe_run(record, video, perception, reasoner, templates, config, frame_loader):
    try:
        return run_expression(record, video, perception, reasoner, templates, config, frame_loader)
    except Exception as exc:  # crash isolation: a bad expression must not kill the batch
        return ExpressionRunResult(
            record=record,
            prediction=MaskTrack(track_id=0, concept="empty", masks={}),
            error=f"{type(exc).__name__}: {exc}",
        )


def run_benchmark(
    dataset: Dataset,
    perception: PerceptionBackend,
    reasoner: ReasonerBackend,
    templates: dict[str, PromptTemplate],
    config: PipelineConfig,
    out_dir,
    parallel: int = 1,
    frame_loader=maskops.load_frame,
    log=lambda msg: None,
) -> list[ExpressionRunResult]:
    """Run every expression, writing predictions and traces as they finish."""
    out = Path(out_dir)
    pred_root = out / "predictions"
    trace_root = out / "traces"
    trace_root.mkdir(parents=True, exist_ok=True)

    def work(record: ExpressionRecord) -> ExpressionRunResult:
        video = dataset.videos[record.video_id]
        result = _safe_run(record, video, perception, reasoner, templates, config, frame_loader)
        write_prediction(pred_root, video, record.expression_id, result.prediction, result.meta_dict())
        trace_path = trace_root / f"{record.video_id}__{record.expression_id}.json"
        trace_path.write_text(json.dumps(result.trace_dict(), indent=2, sort_keys=True))
        log(f"{record.video_id}/{record.expression_id}: "
            f"{'empty' if result.is_empty else 'ok'}{' [' + result.error + ']' if result.error else ''}")
        return result

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(work, dataset.records))
    else:
        results = [work(record) for record in dataset.records]

    manifest = {
        "num_expressions": len(results),
        "num_empty": sum(r.is_empty for r in results),
        "num_errors": sum(r.error is not None for r in results),
        "config": {
            "num_frames": config.num_frames,
            "max_extract_iters": config.max_extract_iters,
            "max_prune_iters": config.max_prune_iters,
            "temperature": config.temperature,
            "max_output_tokens": config.max_output_tokens,
            "seed": config.seed,
        },
    }
    (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return results


def all_failed_unreachable(results: list[ExpressionRunResult]) -> bool:
    """True when every expression died on transport, i.e. the backend is down."""
    if not results:
        return False
    return all(r.error is not None and TransportError.__name__ in r.error for r in results)


def evaluate_predictions(
    dataset: Dataset, pred_root, config: PipelineConfig
) -> tuple[list[EvalResult], list[dict]]:
    """Score every expression's stored prediction against its ground truth."""
    results = []
    meta = []
    for record in dataset.records:
        video = dataset.videos[record.video_id]
        pred_dir = Path(pred_root) / record.video_id / str(record.expression_id)
        prediction, payload = load_prediction(pred_dir)
        gt = dataset.gt_track(record)
        results.append(eval_expression(prediction, gt, video.num_frames, config))
        info = dict(payload.get("meta", {}))
        info.setdefault("video_id", record.video_id)
        info.setdefault("expression_id", record.expression_id)
        info.setdefault("tag", record.tag or "")
        meta.append(info)
    return results, meta
