"""Candidate mask-track generation: query routing, concept pairs, retry loop."""

from __future__ import annotations

from dataclasses import dataclass, field

from trackprune import maskops
from trackprune.model import (
    ConceptPair,
    MaskTrack,
    PipelineConfig,
    Query,
    QueryType,
    VideoRef,
    temporal_existence,
)
from trackprune.perception import PerceptionBackend, count_detections
from trackprune.pruning import sample_frames
from trackprune.reasoning import (
    ConceptResponse,
    ParseError,
    PromptTemplate,
    ReasonerBackend,
    ask_and_parse,
    format_failed_pairs,
    parse_concepts,
    render_prompt,
    user_message,
)


@dataclass
class GenerationOutcome:
    """Everything the candidate-generation phase produced, plus provenance."""

    candidates: list[MaskTrack]
    selected_concepts: list[str]
    query_type: QueryType
    k_used: int
    failure_set: list[list[ConceptPair]] = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not self.candidates


def _sampled_frame_images(video: VideoRef, num_frames: int, frame_loader) -> list[bytes]:
    from trackprune.model import TemporalScope

    scope = TemporalScope(tuple(range(video.num_frames)))
    frames = sample_frames(scope, num_frames)
    return [maskops.encode_png(frame_loader(video.frame_paths[t])) for t in frames]


def extract_concepts(
    query: Query,
    video: VideoRef,
    k: int,
    failure_set: list[list[ConceptPair]],
    reasoner: ReasonerBackend,
    templates: dict[str, PromptTemplate],
    config: PipelineConfig,
    frame_loader=maskops.load_frame,
) -> ConceptResponse:
    """One extraction round: text-only first, video-conditioned otherwise.

    Round 0 asks the referring template on text alone; a reasoning
    classification (and every retry round) re-asks with the reasoning template
    plus uniformly sampled raw frames and the accumulated failure set.
    """
    if k >= config.max_extract_iters:
        raise ValueError(f"extraction round {k} exceeds the configured limit")
    if k == 0:
        prompt = render_prompt(templates["referring"], {"query": query.text})
        response = ask_and_parse(reasoner, [user_message(prompt)], parse_concepts, config)
        if response.query_type is QueryType.REFERRING:
            return response
    prompt = render_prompt(
        templates["reasoning"],
        {"query": query.text, "failed_pairs": format_failed_pairs(failure_set)},
    )
    images = _sampled_frame_images(video, config.num_frames, frame_loader)
    return ask_and_parse(reasoner, [user_message(prompt, images=images)], parse_concepts, config)


def _is_duplicate(track: MaskTrack, pool: list[MaskTrack], iou_threshold: float) -> bool:
    """Same-object test: mean per-frame IoU over shared existence frames."""
    frames = set(temporal_existence(track).frames)
    for other in pool:
        shared = frames & set(temporal_existence(other).frames)
        if not shared:
            continue
        mean_iou = sum(
            maskops.mask_iou(track.masks[t], other.masks[t]) for t in shared
        ) / len(shared)
        if mean_iou > iou_threshold:
            return True
    return False


def generate_candidates(
    video: VideoRef,
    pairs: list[ConceptPair],
    perception: PerceptionBackend,
    config: PipelineConfig,
) -> tuple[list[MaskTrack], list[str]]:
    """Segment each pair with both granularities and keep the richer concept.

    Ties go to the core concept. Track ids are renumbered densely in arrival
    order; near-identical tracks found under different pairs are dropped.
    """
    if not pairs:
        raise ValueError("generate_candidates needs at least one concept pair")
    pool: list[MaskTrack] = []
    selected: list[str] = []
    next_id = 0
    for pair in pairs:
        core_tracks = perception.segment_concept(video, pair.core)
        broad_tracks = perception.segment_concept(video, pair.broad)
        core_count = count_detections(core_tracks)
        broad_count = count_detections(broad_tracks)
        if core_count == 0 and broad_count == 0:
            continue
        if core_count >= broad_count:
            concept, tracks = pair.core, core_tracks
        else:
            concept, tracks = pair.broad, broad_tracks
        selected.append(concept)
        for track in tracks:
            if _is_duplicate(track, pool, config.dedup_iou_threshold):
                continue
            pool.append(track.with_id(next_id))
            next_id += 1
    return pool, selected


def candidate_generation_loop(
    query: Query,
    video: VideoRef,
    perception: PerceptionBackend,
    reasoner: ReasonerBackend,
    templates: dict[str, PromptTemplate],
    config: PipelineConfig,
    frame_loader=maskops.load_frame,
) -> GenerationOutcome:
    """Retry extraction until some pair detects something or rounds run out.

    Every empty round appends its pairs to the failure set, which the next
    round's prompt carries so the model avoids repeating them. Exhaustion is a
    normal outcome: the caller records an empty prediction.
    """
    failure_set: list[list[ConceptPair]] = []
    query_type = QueryType.UNKNOWN
    pool: list[MaskTrack] = []
    selected: list[str] = []
    k = 0
    while not pool and k < config.max_extract_iters:
        try:
            response = extract_concepts(
                query, video, k, failure_set, reasoner, templates, config, frame_loader
            )
            pairs = list(response.pairs)
            if k == 0:
                query_type = response.query_type
        except ParseError:
            pairs = []  # a round the model fumbled counts as a failed round
        if pairs:
            pool, selected = generate_candidates(video, pairs, perception, config)
        if not pool:
            failure_set.append(pairs)
        k += 1
    return GenerationOutcome(
        candidates=pool,
        selected_concepts=selected,
        query_type=query_type,
        k_used=k,
        failure_set=failure_set,
    )
