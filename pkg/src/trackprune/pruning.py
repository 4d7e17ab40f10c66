"""Iterative spatio-temporal pruning: frame sampling, overlays, verdicts, convergence."""

from __future__ import annotations

from dataclasses import dataclass

from trackprune import maskops
from trackprune.model import (
    MaskTrack,
    PipelineConfig,
    Query,
    RunState,
    TemporalScope,
    Verdict,
    VerdictState,
    VideoRef,
    union_scope,
)
from trackprune.reasoning import (
    BINARY_DECISION_RULES,
    TERNARY_DECISION_RULES,
    ParseError,
    PromptTemplate,
    ReasonerBackend,
    ask_and_parse,
    candidate_lines,
    format_appearance,
    parse_verdicts,
    render_prompt,
    user_message,
)


@dataclass(frozen=True)
class PruneIterationRecord:
    """Audit trail of one pruning step; verdicts are the ones actually applied."""

    iteration: int
    binary_mode: bool
    sampled_frames: tuple[int, ...]
    verdicts: dict[int, Verdict]
    scope_before: TemporalScope
    scope_after: TemporalScope
    candidates_before: tuple[int, ...]
    candidates_after: tuple[int, ...]
    accepted_ids: tuple[int, ...]
    rejected_ids: tuple[int, ...]

    def to_json_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "binary_mode": self.binary_mode,
            "sampled_frames": list(self.sampled_frames),
            "verdicts": {
                str(track_id): {"verdict": v.state.value, "reason": v.rationale}
                for track_id, v in sorted(self.verdicts.items())
            },
            "scope_before": list(self.scope_before.frames),
            "scope_after": list(self.scope_after.frames),
            "candidates_before": list(self.candidates_before),
            "candidates_after": list(self.candidates_after),
            "accepted_ids": list(self.accepted_ids),
            "rejected_ids": list(self.rejected_ids),
        }


def sample_frames(scope: TemporalScope, n: int) -> list[int]:
    """Up to n evenly spaced members of the scope (all of it when small enough)."""
    if scope.is_empty():
        raise ValueError("cannot sample from an empty temporal scope")
    if n < 1:
        raise ValueError("sample count must be >= 1")
    frames = list(scope.frames)
    if len(frames) <= n:
        return frames
    if n == 1:
        return [frames[0]]
    picked = []
    for i in range(n):
        idx = maskops.round_half_up(i * (len(frames) - 1) / (n - 1))
        if not picked or frames[idx] != picked[-1]:
            picked.append(frames[idx])
    return picked


def _overlay_images(
    state: RunState, video: VideoRef, frames: list[int], config: PipelineConfig, frame_loader
) -> list[bytes]:
    images = []
    for t in frames:
        frame = frame_loader(video.frame_paths[t])
        marked = [
            (track.track_id, track.masks[t])
            for track in state.candidates
            if track.mask_at(t) is not None
        ]
        overlay = maskops.render_overlay(frame, marked, alpha=config.overlay_alpha)
        images.append(maskops.encode_png(overlay))
    return images


def prune_iteration(
    state: RunState,
    video: VideoRef,
    query: Query,
    reasoner: ReasonerBackend,
    templates: dict[str, PromptTemplate],
    config: PipelineConfig,
    binary: bool = False,
    frame_loader=maskops.load_frame,
) -> PruneIterationRecord:
    """One classify-and-narrow step over the current candidates.

    Overlays show only the remaining candidates; verdicts route each track to
    accepted, rejected, or the next round. In binary mode residual uncertain
    verdicts are applied as accepts.
    """
    if not state.candidates:
        raise ValueError("prune_iteration requires a non-empty candidate set")
    if state.scope.is_empty():
        raise ValueError("prune_iteration requires a non-empty temporal scope")

    frames = sample_frames(state.scope, config.num_frames)
    images = _overlay_images(state, video, frames, config, frame_loader)
    expected_ids = {track.track_id for track in state.candidates}
    prompt = render_prompt(
        templates["select"],
        {
            "query": query.text,
            "concepts": ", ".join(state.selected_concepts) or "(none)",
            "appearance": format_appearance(state.appearance),
            "round": f"{state.iteration + 1} of {config.max_prune_iters}",
            "sampled_frames": ", ".join(str(t) for t in frames),
            "candidates": candidate_lines(state.candidates),
            "decision_rules": BINARY_DECISION_RULES if binary else TERNARY_DECISION_RULES,
        },
    )
    try:
        response = ask_and_parse(
            reasoner,
            [user_message(prompt, images=images)],
            lambda text: parse_verdicts(text, expected_ids),
            config,
        )
        verdicts = dict(response.verdicts)
    except ParseError:
        # no forced progress: an unreadable reply leaves every candidate uncertain
        verdicts = {
            track_id: Verdict(state=VerdictState.UNCERTAIN, rationale="reasoner reply unparseable")
            for track_id in expected_ids
        }
    if binary:
        verdicts = {
            track_id: (
                Verdict(state=VerdictState.ACCEPTED, rationale=v.rationale or "undecided at final round")
                if v.state is VerdictState.UNCERTAIN
                else v
            )
            for track_id, v in verdicts.items()
        }

    scope_before = state.scope
    before_ids = tuple(track.track_id for track in state.candidates)
    accepted_now = [t for t in state.candidates if verdicts[t.track_id].state is VerdictState.ACCEPTED]
    rejected_now = [t for t in state.candidates if verdicts[t.track_id].state is VerdictState.REJECTED]
    keep = [t for t in state.candidates if verdicts[t.track_id].state is VerdictState.UNCERTAIN]

    state.accepted.extend(accepted_now)
    state.rejected.extend(rejected_now)
    state.candidates = keep
    state.scope = union_scope(keep)
    state.iteration += 1
    state.check_disjoint()

    return PruneIterationRecord(
        iteration=state.iteration - 1,
        binary_mode=binary,
        sampled_frames=tuple(frames),
        verdicts=verdicts,
        scope_before=scope_before,
        scope_after=state.scope,
        candidates_before=before_ids,
        candidates_after=tuple(track.track_id for track in keep),
        accepted_ids=tuple(track.track_id for track in accepted_now),
        rejected_ids=tuple(track.track_id for track in rejected_now),
    )


def run_pruning(
    candidates: list[MaskTrack],
    video: VideoRef,
    query: Query,
    selected_concepts: list[str],
    appearance: dict[int, str],
    reasoner: ReasonerBackend,
    templates: dict[str, PromptTemplate],
    config: PipelineConfig,
    frame_loader=maskops.load_frame,
) -> tuple[MaskTrack, list[PruneIterationRecord]]:
    """Iterate pruning until convergence or the round limit, then merge accepts.

    The final allowed round runs in binary mode, so every candidate ends up
    either accepted or rejected. An empty candidate pool (or an all-reject
    outcome) produces an empty prediction track.
    """
    live = [t for t in candidates if t.total_area() > 0]
    state = RunState(
        candidates=live,
        rejected=[t for t in candidates if t.total_area() == 0],
        selected_concepts=list(selected_concepts),
        appearance=dict(appearance),
        scope=union_scope(live),
    )
    records: list[PruneIterationRecord] = []
    for r in range(config.max_prune_iters):
        if not state.candidates:
            break
        binary = r == config.max_prune_iters - 1
        records.append(
            prune_iteration(state, video, query, reasoner, templates, config, binary, frame_loader)
        )
    merged = maskops.merge_tracks(state.accepted, video.num_frames, video.height, video.width)
    return merged, records
