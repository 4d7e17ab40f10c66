"""Optional appearance evidence: requirement check and candidate descriptions."""

from __future__ import annotations

from trackprune import maskops
from trackprune.model import MaskTrack, PipelineConfig, Query, VideoRef
from trackprune.reasoning import (
    ParseError,
    PromptTemplate,
    ReasonerBackend,
    ask_and_parse,
    candidate_lines,
    parse_descriptions,
    parse_required,
    render_prompt,
    user_message,
)


def appearance_required(
    query: Query,
    reasoner: ReasonerBackend,
    templates: dict[str, PromptTemplate],
    config: PipelineConfig,
) -> bool:
    """Ask whether the query hinges on appearance attributes; unparseable => no."""
    prompt = render_prompt(templates["appearance_requirement"], {"query": query.text})
    try:
        return ask_and_parse(reasoner, [user_message(prompt)], parse_required, config)
    except ParseError:
        return False


def describe_candidates(
    query: Query,
    candidates: list[MaskTrack],
    video: VideoRef,
    reasoner: ReasonerBackend,
    templates: dict[str, PromptTemplate],
    config: PipelineConfig,
    frame_loader=maskops.load_frame,
) -> dict[int, str]:
    """One batched call: a two-panel reference image per candidate, id-labelled.

    Failures are non-fatal; the pipeline simply proceeds without descriptions.
    Only ids that were presented can come back.
    """
    if not candidates:
        return {}
    images = [
        maskops.encode_png(
            maskops.make_reference_image(
                video, track, pad_factor=config.reference_pad_factor, frame_loader=frame_loader
            )
        )
        for track in candidates
    ]
    prompt = render_prompt(
        templates["appearance_retrieval"],
        {"query": query.text, "candidates": candidate_lines(candidates)},
    )
    try:
        described = ask_and_parse(
            reasoner, [user_message(prompt, images=images)], parse_descriptions, config
        )
    except ParseError:
        return {}
    presented = {track.track_id for track in candidates}
    return {track_id: desc for track_id, desc in described.items() if track_id in presented}


def gather_appearance(
    query: Query,
    candidates: list[MaskTrack],
    video: VideoRef,
    reasoner: ReasonerBackend,
    templates: dict[str, PromptTemplate],
    config: PipelineConfig,
    frame_loader=maskops.load_frame,
) -> dict[int, str]:
    """Requirement check first; reference images are built only when needed."""
    if not candidates:
        return {}
    if not appearance_required(query, reasoner, templates, config):
        return {}
    return describe_candidates(query, candidates, video, reasoner, templates, config, frame_loader)
