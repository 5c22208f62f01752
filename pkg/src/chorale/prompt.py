"""Structure-aware singer scheduling and the adaptive singer-prompt fuser.

Pipeline: verse embeddings are greedily clustered into a per-song global
singer set; every segment is then assigned a singer subset (verses strictly
to their nearest cluster, chorus/bridge by thresholded similarity with
multi-singer relabeling); the fuser pools each segment's singer set into a
single prompt vector that is broadcast over the segment's frames.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import CoverageError, NoVerseError, ValidationError

DELTA_ID_DEFAULT = 0.4
DELTA_MULTI_DEFAULT = 0.4
K_MAX_DEFAULT = 8

LABEL_IDS = {"verse": 0, "chorus": 1, "bridge": 2, "multi_chorus": 3}


def check_unit_norm(v: np.ndarray, what: str = "embedding") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or not np.all(np.isfinite(v)):
        raise ValidationError(f"{what} must be a finite 1-D vector")
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ValidationError(f"{what} must be unit L2 norm")
    return v


@dataclass
class GlobalSingerSet:
    """Final cluster centroids u_1..u_K for one song."""

    members: np.ndarray                # (K, d_emb), unit rows
    k: int

    def __post_init__(self):
        if self.members.ndim != 2 or self.members.shape[0] != self.k:
            raise ValidationError("GlobalSingerSet members must be (K, d_emb)")


@dataclass
class SegmentAssignment:
    segment_index: int
    assigned_singers: tuple[int, ...]
    updated_label: str
    similarity_scores: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.assigned_singers:
            raise ValidationError("assignment must name at least one singer")
        multi = len(self.assigned_singers) >= 2
        if multi != (self.updated_label == "multi_chorus"):
            raise ValidationError("multi_chorus label must match |assigned_singers| >= 2")


@dataclass
class PromptTrack:
    """Frame-aligned prompt condition, constant within each segment."""

    values: np.ndarray                 # (frames, d_prompt)
    segment_of_frame: np.ndarray       # (frames,) provenance indices


def cluster_verse_singers(
    verse_embeddings: list[np.ndarray] | np.ndarray,
    delta_id: float = DELTA_ID_DEFAULT,
) -> GlobalSingerSet:
    """Greedy temporal-order clustering of verse embeddings.

    Each embedding joins the first existing cluster whose centroid cosine
    similarity reaches delta_id, otherwise founds a new cluster. Centroids
    are renormalized running means of their members.
    """
    embeddings = [check_unit_norm(v, "verse embedding") for v in verse_embeddings]
    if not embeddings:
        raise NoVerseError("cannot build a singer set from zero verse embeddings")
    if not 0.0 < delta_id < 1.0:
        raise ValidationError(f"delta_id must be in (0, 1), got {delta_id}")

    sums: list[np.ndarray] = []
    centroids: list[np.ndarray] = []
    for v in embeddings:
        joined = False
        for i, c in enumerate(centroids):
            if float(np.dot(v, c)) >= delta_id:
                sums[i] = sums[i] + v
                centroids[i] = sums[i] / np.linalg.norm(sums[i])
                joined = True
                break
        if not joined:
            sums.append(v.copy())
            centroids.append(v.copy())
    members = np.stack(centroids)
    return GlobalSingerSet(members=members, k=len(centroids))


def assign_segments(
    labels: list[str],
    embeddings: list[np.ndarray] | np.ndarray,
    global_set: GlobalSingerSet,
    delta_multi: float = DELTA_MULTI_DEFAULT,
) -> list[SegmentAssignment]:
    """Structure-based assignment with multi-singer detection and relabeling.

    Verses go strictly to the nearest cluster. For chorus/bridge segments
    with K > 1, every cluster whose similarity exceeds delta_multi is
    assigned; two or more matches flips the label to multi_chorus, zero
    matches falls back to the nearest singleton.
    """
    if global_set.k < 1:
        raise ValidationError("global singer set is empty")
    if len(labels) != len(embeddings):
        raise ValidationError("one embedding per segment is required")

    out = []
    for idx, (label, emb) in enumerate(zip(labels, embeddings)):
        v = check_unit_norm(emb, f"segment {idx} embedding")
        sims = global_set.members @ v
        scores = [float(s) for s in sims]
        nearest = int(np.argmax(sims))
        if label == "verse" or global_set.k == 1:
            assigned, new_label = (nearest,), label
        else:
            matched = tuple(int(i) for i in np.flatnonzero(sims > delta_multi))
            if len(matched) >= 2:
                assigned, new_label = matched, "multi_chorus"
            elif len(matched) == 1:
                assigned, new_label = matched, label
            else:
                assigned, new_label = (nearest,), label
        out.append(SegmentAssignment(idx, assigned, new_label, scores))
    return out


class SingerPromptFuser(nn.Module):
    """Attention pooling over a segment's singer set.

    Query, key, and value are linear projections; a single learned query
    vector reduces the set to one prompt embedding per segment, so the
    output is invariant to the order of the input singers.
    """

    def __init__(self, d_emb: int = 192, d_k: int = 32, n_heads: int = 4):
        super().__init__()
        if d_k % n_heads != 0:
            raise ValidationError("d_k must be divisible by n_heads")
        self.d_emb = d_emb
        self.d_k = d_k
        self.n_heads = n_heads
        self.d_head = d_k // n_heads
        self.w_q = nn.Linear(d_emb, d_k, bias=False)
        self.w_k = nn.Linear(d_emb, d_k, bias=False)
        self.w_v = nn.Linear(d_emb, d_k, bias=False)
        self.query = nn.Parameter(torch.zeros(d_emb))
        nn.init.normal_(self.query, std=0.5)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        return x.reshape(*x.shape[:-1], self.n_heads, self.d_head)

    def attention(self, singers: torch.Tensor) -> torch.Tensor:
        """Pooling weights, shape (n_heads, n_singers); rows sum to 1."""
        if singers.ndim != 2 or singers.shape[0] < 1:
            raise ValidationError("fuser needs a nonempty (n, d_emb) singer set")
        if singers.shape[1] != self.d_emb:
            raise ValidationError(
                f"singer embeddings have width {singers.shape[1]}, expected {self.d_emb}"
            )
        q = self._heads(self.w_q(self.query))                  # (H, Dh)
        k = self._heads(self.w_k(singers))                     # (n, H, Dh)
        logits = torch.einsum("hd,nhd->hn", q, k) / self.d_head**0.5
        return torch.softmax(logits, dim=1)

    def forward(self, singers: torch.Tensor) -> torch.Tensor:
        alpha = self.attention(singers)                        # (H, n)
        v = self._heads(self.w_v(singers))                     # (n, H, Dh)
        pooled = torch.einsum("hn,nhd->hd", alpha, v)
        return pooled.reshape(self.d_k)

    def cross_attention(self, singers: torch.Tensor) -> torch.Tensor:
        """Singer-to-singer attention matrix, head-averaged; rows sum to 1."""
        q = self._heads(self.w_q(singers))
        k = self._heads(self.w_k(singers))
        logits = torch.einsum("ihd,jhd->hij", q, k) / self.d_head**0.5
        return torch.softmax(logits, dim=2).mean(dim=0)


def fuse(singer_set: np.ndarray, fuser: SingerPromptFuser, k_max: int = K_MAX_DEFAULT) -> np.ndarray:
    """Pool a (n, d_emb) singer set into one d_k prompt vector."""
    u = np.atleast_2d(np.asarray(singer_set, dtype=np.float64))
    if u.shape[0] < 1:
        raise ValidationError("fuse requires at least one singer embedding")
    if u.shape[0] > k_max:
        raise ValidationError(f"fuse supports at most {k_max} singers, got {u.shape[0]}")
    with torch.no_grad():
        out = fuser(torch.as_tensor(u, dtype=torch.get_default_dtype()))
    return out.numpy()


def attention_weights(singer_set: np.ndarray, fuser: SingerPromptFuser) -> np.ndarray:
    """Per-head pooling weights used by fuse, shape (n_heads, n)."""
    u = np.atleast_2d(np.asarray(singer_set, dtype=np.float64))
    if u.shape[0] < 1:
        raise ValidationError("attention_weights requires a nonempty singer set")
    with torch.no_grad():
        alpha = fuser.attention(torch.as_tensor(u, dtype=torch.get_default_dtype()))
    return alpha.numpy()


def broadcast_prompt(
    assignments: list[SegmentAssignment],
    fused: list[np.ndarray] | np.ndarray,
    frame_times: np.ndarray,
    segment_spans: list[tuple[float, float]],
) -> PromptTrack:
    """Broadcast each segment's fused prompt to its frames.

    Frames belong to segments by the half-open convention [start, end); a
    frame outside every span is a coverage error.
    """
    if len(assignments) != len(fused):
        raise ValidationError("one fused embedding per segment is required")
    if len(segment_spans) != len(assignments):
        raise ValidationError("one (start, end) span per segment is required")
    fused = [np.asarray(f, dtype=np.float64) for f in fused]
    d = fused[0].shape[0]
    n = len(frame_times)
    values = np.zeros((n, d))
    seg_of = np.full(n, -1, dtype=np.int64)
    starts = np.array([a for a, _ in segment_spans])
    ends = np.array([b for _, b in segment_spans])
    for i, t in enumerate(np.asarray(frame_times, dtype=np.float64)):
        hits = np.flatnonzero((starts <= t) & (t < ends))
        if hits.size == 0:
            raise CoverageError(f"frame at t={t:.4f}s lies outside every segment span")
        seg = int(hits[0])
        values[i] = fused[seg]
        seg_of[i] = seg
    return PromptTrack(values=values, segment_of_frame=seg_of)
