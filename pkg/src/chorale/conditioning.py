"""Frame-aligned condition tracks and the per-song annotation pipeline.

Annotation mirrors the data-preparation flow: embed every segment, cluster
the verse embeddings into the global singer set, assign singer subsets to
all segments, and relabel detected multi-singer sections. The resulting
raw tracks (token ids, structure ids, f0, singer sets) are consumed by the
codec's texture stage and by the generation backbone, each of which embeds
them with its own learned tables.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import CorpusConfig
from .corpus import RenderedSong, segment_embedding
from .errors import AlignmentError, ValidationError
from .prompt import (
    DELTA_ID_DEFAULT,
    DELTA_MULTI_DEFAULT,
    LABEL_IDS,
    GlobalSingerSet,
    SegmentAssignment,
    assign_segments,
    cluster_verse_singers,
)


@dataclass
class SongAnnotation:
    """Everything the trainers need to condition on one song."""

    song_id: str
    global_set: GlobalSingerSet
    assignments: list[SegmentAssignment]
    segment_embeddings: np.ndarray      # (n_segments, d_emb)
    token_track: np.ndarray             # (frames,) int lyric-token ids
    structure_track: np.ndarray         # (frames,) int label ids
    segment_track: np.ndarray           # (frames,) segment index per frame
    f0_track: np.ndarray                # (frames,) Hz, 0 = unvoiced

    @property
    def n_frames(self) -> int:
        return len(self.token_track)

    def singer_sets(self) -> list[np.ndarray]:
        """Per segment, the (n_assigned, d_emb) matrix of assigned centroids."""
        return [self.global_set.members[list(a.assigned_singers)] for a in self.assignments]


def token_frame_track(tokens: list[int], n_frames: int, frames_per_note: int) -> np.ndarray:
    """Spread a token sequence over frames; each token owns an equal span.

    Training and generation share this convention, so segment duration is
    always len(tokens) * note length.
    """
    track = np.zeros(n_frames, dtype=np.int64)
    for i, tok in enumerate(tokens):
        a = i * frames_per_note
        track[a : min(a + frames_per_note, n_frames)] = tok
    return track


def annotate_song(
    song: RenderedSong,
    cfg: CorpusConfig,
    delta_id: float = DELTA_ID_DEFAULT,
    delta_multi: float = DELTA_MULTI_DEFAULT,
) -> SongAnnotation:
    manifest = song.manifest
    labels = [seg.label for seg in manifest.segments]
    embeddings = [segment_embedding(song, seg, cfg) for seg in manifest.segments]
    verse_embeddings = [e for e, lab in zip(embeddings, labels) if lab == "verse"]
    global_set = cluster_verse_singers(verse_embeddings, delta_id)
    assignments = assign_segments(labels, embeddings, global_set, delta_multi)

    n_frames = manifest.n_frames
    tokens = np.zeros(n_frames, dtype=np.int64)
    structure = np.zeros(n_frames, dtype=np.int64)
    seg_of = np.zeros(n_frames, dtype=np.int64)
    for idx, (seg, asg) in enumerate(zip(manifest.segments, assignments)):
        a = int(round(seg.start * manifest.frame_rate))
        b = a + len(seg.f0_track)
        tokens[a:b] = token_frame_track(seg.lyric_tokens, b - a, cfg.frames_per_note)
        structure[a:b] = LABEL_IDS[asg.updated_label]
        seg_of[a:b] = idx
    return SongAnnotation(
        song_id=manifest.song_id,
        global_set=global_set,
        assignments=assignments,
        segment_embeddings=np.stack(embeddings),
        token_track=tokens,
        structure_track=structure,
        segment_track=seg_of,
        f0_track=song.gt_f0.copy(),
    )


def f0_condition(f0_track: np.ndarray) -> np.ndarray:
    """(frames, 2) track: log-scaled pitch (0 when unvoiced) and voicing flag."""
    f0 = np.asarray(f0_track, dtype=np.float64)
    voiced = f0 > 0
    out = np.zeros((len(f0), 2))
    out[voiced, 0] = np.log2(f0[voiced] / 220.0)
    out[voiced, 1] = 1.0
    return out


def downsample_track(track: np.ndarray, target_frames: int) -> np.ndarray:
    """Align a higher-rate track to the latent frame count by window means.

    Accepts tracks whose length is within one window of target * factor;
    short tracks are edge-padded into the last window, longer ones are an
    alignment error.
    """
    track = np.asarray(track)
    length = track.shape[0]
    if length == target_frames:
        return track
    if length < target_frames:
        raise AlignmentError(f"track of {length} frames is shorter than target {target_frames}")
    factor = int(np.ceil(length / target_frames))
    if length > factor * target_frames:
        raise AlignmentError(
            f"track of {length} frames exceeds {target_frames} latent frames by more than one window"
        )
    if length <= (factor - 1) * target_frames:
        raise AlignmentError(
            f"track of {length} frames is more than one window short of {target_frames} x {factor}"
        )
    pad = factor * target_frames - length
    if pad:
        track = np.concatenate([track, np.repeat(track[-1:], pad, axis=0)], axis=0)
    shaped = track.reshape(target_frames, factor, *track.shape[1:])
    return shaped.mean(axis=1)


def assignment_to_dict(assignment: SegmentAssignment) -> dict:
    return {
        "index": assignment.segment_index,
        "label": assignment.updated_label,
        "singer_ids": list(assignment.assigned_singers),
        "similarity_scores": assignment.similarity_scores,
    }


def validate_frame_counts(tracks: dict[str, np.ndarray]) -> int:
    counts = {name: len(t) for name, t in tracks.items()}
    if len(set(counts.values())) > 1:
        raise ValidationError(f"condition tracks disagree on frame count: {counts}")
    return next(iter(counts.values()))
