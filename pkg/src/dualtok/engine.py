"""Query-time search over a gallery index.

Four operations share one scoring substrate so their results agree
bit-for-bit wherever the contracts demand it:

* every global cosine goes through ``GalleryIndex.global_scores`` (one
  pass over the packed normalized matrix);
* every token-level score goes through ``_local_scores`` (per-sample
  matrix product against the index's cached normalized tokens, best-X
  per text token, averaged over the text side);
* mixed scores are always the same elementwise ``(1-theta)*sg +
  theta*sl`` expression;
* every ordering is ``np.lexsort`` on (descending score, ascending id).

Because the two-stage path re-scores its candidates with exactly these
pieces, running it with k = n reproduces the exhaustive mixed ranking
identically, not merely approximately.

Token orientation: the image side always supplies the "max" argument
and the text side the "mean" argument, whichever of query or gallery is
which. Token scoring therefore requires one image side and one text
side; same-modality token scoring is rejected.

The two-stage result is the re-ranked top-K block. ``include_tail=True``
appends the remaining gallery items in first-stage global order (tagged
"global"), which is how callers evaluate R@m for m > K.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DataError, DomainError
from .features import Modality, SampleFeatures
from .index import GalleryIndex
from .similarity import SimilarityMode

STAGE_TAGS = ("global", "local", "mixed", "rerank")


@dataclass(frozen=True)
class InferenceConfig:
    k: int = 100
    theta: float = 0.5

    def __post_init__(self):
        if self.k < 1:
            raise DomainError(f"k must be >= 1, got {self.k}")
        if not (math.isfinite(self.theta) and 0.0 <= self.theta <= 1.0):
            raise DomainError(f"theta must lie in [0, 1], got {self.theta}")


@dataclass(frozen=True)
class RankedEntry:
    id: int
    score: float
    stage: str


@dataclass(frozen=True, eq=False)
class RankedList:
    """Ranking result: ids with scores and the stage that produced them.

    Within each contiguous stage segment scores are nonincreasing and
    equal scores are ordered by ascending id; ids are unique across the
    whole list. (A two-stage list is a "rerank" segment followed by a
    "global" tail whose score scales differ, so monotonicity is a
    per-segment invariant.)
    """

    ids: np.ndarray      # (n,) u64
    scores: np.ndarray   # (n,) f64
    stages: tuple[str, ...]

    def __post_init__(self):
        n = len(self.ids)
        if len(self.scores) != n or len(self.stages) != n:
            raise DomainError("ids, scores, and stages must have equal length")
        if any(s not in STAGE_TAGS for s in set(self.stages)):
            raise DomainError(f"stage tags must be drawn from {STAGE_TAGS}")
        if n and len(np.unique(self.ids)) != n:
            raise DomainError("ranked ids must be unique")
        start = 0
        for end in range(1, n + 1):
            if end == n or self.stages[end] != self.stages[start]:
                seg_scores = self.scores[start:end]
                seg_ids = self.ids[start:end]
                diffs = np.diff(seg_scores)
                if (diffs > 0).any():
                    raise DomainError("scores must be nonincreasing within a stage")
                tied = diffs == 0
                if tied.any() and (seg_ids[1:][tied] <= seg_ids[:-1][tied]).any():
                    raise DomainError("tied scores must be ordered by ascending id")
                start = end

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i: int) -> RankedEntry:
        return RankedEntry(int(self.ids[i]), float(self.scores[i]), self.stages[i])

    @cached_property
    def entries(self) -> tuple[RankedEntry, ...]:
        return tuple(self[i] for i in range(len(self)))

    @staticmethod
    def empty() -> "RankedList":
        return RankedList(np.empty(0, dtype=np.uint64), np.empty(0, dtype=np.float64), ())


def _ranked(ids: np.ndarray, scores: np.ndarray, stage: str) -> RankedList:
    """Sort by descending score, ascending id; tag every entry."""
    perm = np.lexsort((ids, -scores))
    return RankedList(ids[perm].astype(np.uint64), scores[perm], (stage,) * len(ids))


def _unit_global(vec: np.ndarray, expected_dim: int) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    if v.ndim != 1:
        raise DomainError(f"query global must be a vector, got shape {v.shape}")
    if v.shape[0] != expected_dim:
        raise DomainError(
            f"query global dim {v.shape[0]} does not match index dim {expected_dim}"
        )
    if not np.isfinite(v).all():
        raise DomainError("query global contains non-finite values")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DomainError("query global vector has zero norm")
    return v / norm


def _unit_tokens(tokens: np.ndarray, expected_dim: int) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] < 1:
        raise DomainError(f"query tokens must be a nonempty matrix, got shape {t.shape}")
    if t.shape[1] != expected_dim:
        raise DomainError(
            f"query token dim {t.shape[1]} does not match index dim {expected_dim}"
        )
    if not np.isfinite(t).all():
        raise DomainError("query tokens contain non-finite values")
    norms = np.linalg.norm(t, axis=1, keepdims=True)
    if (norms == 0.0).any():
        raise DomainError("query token matrix has a zero row")
    return t / norms


def _gallery_is_max_side(query_modality: Modality, index_modality: Modality) -> bool:
    if query_modality is index_modality:
        raise DomainError(
            "token-level scoring needs one image side and one text side; "
            f"both are {index_modality.name}"
        )
    return index_modality is Modality.IMAGE


def _local_scores(index: GalleryIndex, positions, q_tokens_unit: np.ndarray,
                  gallery_is_max_side: bool) -> np.ndarray:
    """Token-level score of the query against each listed gallery item."""
    q_t = q_tokens_unit.T
    out = np.empty(len(positions), dtype=np.float64)
    if gallery_is_max_side:
        for j, p in enumerate(positions):
            out[j] = (index.tokens_normalized(p) @ q_t).max(axis=0).mean()
    else:
        for j, p in enumerate(positions):
            out[j] = (index.tokens_normalized(p) @ q_t).max(axis=1).mean()
    return out


def exhaustive_search(query: SampleFeatures, index: GalleryIndex,
                      mode: SimilarityMode) -> RankedList:
    """Score every gallery item under the mode; the two-stage oracle."""
    if not isinstance(mode, SimilarityMode):
        raise DomainError("mode must be a SimilarityMode")
    if index.n == 0:
        return RankedList.empty()
    need_global = mode.kind in ("global", "mixed")
    need_local = mode.kind in ("local", "mixed")
    if need_global:
        qg = _unit_global(query.global_vec, index.output_dim)
        sg = index.global_scores(qg)
    if need_local:
        gallery_max = _gallery_is_max_side(query.modality, index.modality)
        ql = _unit_tokens(query.tokens, index.output_dim)
        sl = _local_scores(index, range(index.n), ql, gallery_max)
    if mode.kind == "global":
        scores = sg
    elif mode.kind == "local":
        scores = sl
    else:
        scores = (1.0 - mode.theta) * sg + mode.theta * sl
    return _ranked(index.ids, scores, mode.kind)


def global_topk(query_global: np.ndarray, index: GalleryIndex, k: int) -> RankedList:
    """Top min(k, n) gallery items by global cosine, deterministic ties."""
    if not (isinstance(k, (int, np.integer)) and k >= 1):
        raise DomainError(f"k must be an integer >= 1, got {k!r}")
    if index.n == 0:
        return RankedList.empty()
    qg = _unit_global(query_global, index.output_dim)
    full = _ranked(index.ids, index.global_scores(qg), "global")
    take = min(int(k), index.n)
    return RankedList(full.ids[:take], full.scores[:take], full.stages[:take])


def rerank_mixed(query: SampleFeatures, candidates: RankedList,
                 index: GalleryIndex, theta: float) -> RankedList:
    """Re-score the candidate set under the mixed similarity and re-sort.

    Global scores are recomputed with the same full-index pass the first
    stage uses (then sliced to the candidates), and token scores use the
    same per-sample kernel as exhaustive search, so a rerank over the
    whole gallery reproduces exhaustive mixed scoring bit-for-bit.
    """
    if not (isinstance(theta, (int, float)) and math.isfinite(theta)
            and 0.0 <= theta <= 1.0):
        raise DomainError(f"theta must lie in [0, 1], got {theta!r}")
    if len(candidates) == 0:
        return RankedList.empty()
    positions = [index.position(int(i)) for i in candidates.ids]
    qg = _unit_global(query.global_vec, index.output_dim)
    gallery_max = _gallery_is_max_side(query.modality, index.modality)
    ql = _unit_tokens(query.tokens, index.output_dim)
    sg = index.global_scores(qg)[positions]
    sl = _local_scores(index, positions, ql, gallery_max)
    scores = (1.0 - float(theta)) * sg + float(theta) * sl
    perm = np.lexsort((candidates.ids, -scores))
    return RankedList(candidates.ids[perm], scores[perm], ("rerank",) * len(positions))


def two_stage_search(query: SampleFeatures, index: GalleryIndex,
                     cfg: InferenceConfig, include_tail: bool = False) -> RankedList:
    """Global top-K candidates, then mixed re-ranking of exactly those.

    Returns the re-ranked block; with include_tail the items beyond K
    follow in their first-stage global order, tagged "global".
    """
    shortlist = global_topk(query.global_vec, index, cfg.k)
    block = rerank_mixed(query, shortlist, index, cfg.theta)
    if not include_tail or len(block) >= index.n:
        return block
    full = exhaustive_search(query, index, SimilarityMode.global_())
    tail_ids = full.ids[cfg.k:]
    tail_scores = full.scores[cfg.k:]
    return RankedList(
        np.concatenate([block.ids, tail_ids]),
        np.concatenate([block.scores, tail_scores]),
        block.stages + ("global",) * len(tail_ids),
    )
