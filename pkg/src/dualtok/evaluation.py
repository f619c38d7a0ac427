"""Recall metrics in both retrieval directions, hyperparameter sweeps,
and wall-clock benchmarking of the search modes.

Recall uses the any-match convention: R@K for one query is 1 when any
relevant id appears in the top min(K, length) entries, and the reported
number is the mean over queries. Queries run in ascending-id order so
every report is deterministic; only the timing fields vary across runs.

Queries are reconstructed from the query-side index (unit global plus
stored tokens). Cosine scoring is scale-invariant, so rankings match
those of the original feature vectors.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .engine import InferenceConfig, RankedList, exhaustive_search, two_stage_search
from .errors import DataError, DomainError
from .features import SampleFeatures
from .index import GalleryIndex
from .similarity import SimilarityMode

SEARCH_MODES = ("global", "local", "mixed", "two-stage")


@dataclass(frozen=True)
class GroundTruth:
    """Relevant-id sets for both retrieval directions."""

    image_to_texts: dict[int, frozenset[int]]
    text_to_images: dict[int, frozenset[int]]

    def __post_init__(self):
        for name, mapping in (("image_to_texts", self.image_to_texts),
                              ("text_to_images", self.text_to_images)):
            for qid, rel in mapping.items():
                if not rel:
                    raise DomainError(f"{name}: empty relevance set for query {qid}")

    @staticmethod
    def from_pairs(pairs: list[tuple[int, int]]) -> "GroundTruth":
        """Build both directions from (image_id, text_id) pairs.

        Many-to-many pairings are fine; each image collects all its
        texts and vice versa (the 5-captions-per-image shape).
        """
        if not pairs:
            raise DomainError("ground truth needs at least one pair")
        i2t: dict[int, set[int]] = {}
        t2i: dict[int, set[int]] = {}
        for img, txt in pairs:
            i2t.setdefault(img, set()).add(txt)
            t2i.setdefault(txt, set()).add(img)
        return GroundTruth(
            image_to_texts={k: frozenset(v) for k, v in i2t.items()},
            text_to_images={k: frozenset(v) for k, v in t2i.items()},
        )


def recall_at_k(ranking: RankedList, relevant: frozenset[int] | set[int], k: int) -> int:
    """1 when any relevant id appears in the first min(k, len) entries."""
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if not relevant:
        raise DomainError("relevant set must be nonempty")
    top = ranking.ids[: min(k, len(ranking))]
    return int(any(int(i) in relevant for i in top))


@dataclass(frozen=True)
class DirectionMetrics:
    r1: float
    r5: float
    r10: float
    query_count: int

    def __post_init__(self):
        if not (0.0 <= self.r1 <= self.r5 <= self.r10 <= 1.0):
            raise DomainError(
                f"recall values must satisfy 0 <= R@1 <= R@5 <= R@10 <= 1, "
                f"got ({self.r1}, {self.r5}, {self.r10})"
            )


@dataclass(frozen=True)
class MetricsReport:
    mode: str
    k: int
    theta: float
    text_to_image: DirectionMetrics
    image_to_text: DirectionMetrics
    total_seconds: float
    per_query_seconds: float

    def to_tsv_lines(self) -> list[str]:
        """Deterministic table (timing deliberately excluded)."""
        lines = [f"# mode={self.mode} k={self.k} theta={self.theta:g}",
                 "direction\tr@1\tr@5\tr@10\tqueries"]
        for name, m in (("text_to_image", self.text_to_image),
                        ("image_to_text", self.image_to_text)):
            lines.append(f"{name}\t{m.r1:.6f}\t{m.r5:.6f}\t{m.r10:.6f}\t{m.query_count}")
        return lines

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode, "k": self.k, "theta": self.theta,
            "text_to_image": {"r1": self.text_to_image.r1, "r5": self.text_to_image.r5,
                              "r10": self.text_to_image.r10,
                              "queries": self.text_to_image.query_count},
            "image_to_text": {"r1": self.image_to_text.r1, "r5": self.image_to_text.r5,
                              "r10": self.image_to_text.r10,
                              "queries": self.image_to_text.query_count},
            "timing": {"total_seconds": self.total_seconds,
                       "per_query_seconds": self.per_query_seconds},
        }


def query_from_index(index: GalleryIndex, sample_id: int) -> SampleFeatures:
    """Rebuild a query sample from its indexed representation."""
    pos = index.position(sample_id)
    return SampleFeatures(
        sample_id, index.modality,
        index.globals_normalized[pos].astype(np.float32),
        index.tokens[pos],
    )


def queries_from_index(index: GalleryIndex, limit: int | None = None) -> list[SampleFeatures]:
    """First ``limit`` samples (ascending id) reconstructed as queries."""
    ids = np.sort(index.ids)
    if limit is not None:
        if limit < 0:
            raise DomainError(f"limit must be >= 0, got {limit}")
        ids = ids[:limit]
    return [query_from_index(index, int(i)) for i in ids]


def _search(query: SampleFeatures, gallery: GalleryIndex, mode: str,
            cfg: InferenceConfig) -> RankedList:
    if mode == "two-stage":
        return two_stage_search(query, gallery, cfg, include_tail=True)
    theta = cfg.theta if mode == "mixed" else 0.0
    return exhaustive_search(query, gallery, SimilarityMode(mode, theta))


def _direction(query_index: GalleryIndex, gallery_index: GalleryIndex,
               mapping: dict[int, frozenset[int]], mode: str,
               cfg: InferenceConfig) -> DirectionMetrics:
    hits = np.zeros(3, dtype=np.int64)
    qids = sorted(mapping)
    for qid in qids:
        rel = mapping[qid]
        ranking = _search(query_from_index(query_index, qid), gallery_index, mode, cfg)
        hits += [recall_at_k(ranking, rel, k) for k in (1, 5, 10)]
    n = len(qids)
    return DirectionMetrics(float(hits[0]) / n, float(hits[1]) / n, float(hits[2]) / n, n)


def evaluate_retrieval(image_index: GalleryIndex, text_index: GalleryIndex,
                       ground_truth: GroundTruth, cfg: InferenceConfig,
                       mode: str) -> MetricsReport:
    """Run every ground-truth query in both directions and aggregate R@K."""
    if mode not in SEARCH_MODES:
        raise DomainError(f"unknown mode {mode!r}, expected one of {SEARCH_MODES}")
    image_ids = {int(i) for i in image_index.ids}
    text_ids = {int(i) for i in text_index.ids}
    for qid, rel in ground_truth.text_to_images.items():
        if qid not in text_ids:
            raise DataError(f"text query id {qid} missing from the text index")
        if not rel <= image_ids:
            raise DataError(f"text query {qid}: relevant image ids missing from the index")
    for qid, rel in ground_truth.image_to_texts.items():
        if qid not in image_ids:
            raise DataError(f"image query id {qid} missing from the image index")
        if not rel <= text_ids:
            raise DataError(f"image query {qid}: relevant text ids missing from the index")

    start = time.perf_counter()
    t2i = _direction(text_index, image_index, ground_truth.text_to_images, mode, cfg)
    i2t = _direction(image_index, text_index, ground_truth.image_to_texts, mode, cfg)
    total = time.perf_counter() - start
    n_queries = t2i.query_count + i2t.query_count
    return MetricsReport(
        mode=mode, k=cfg.k, theta=cfg.theta,
        text_to_image=t2i, image_to_text=i2t,
        total_seconds=total,
        per_query_seconds=total / n_queries if n_queries else 0.0,
    )


SWEEP_PARAMETERS = ("theta", "k", "sigma")


def sweep(parameter: str, values: list, *, image_index: GalleryIndex | None = None,
          text_index: GalleryIndex | None = None, ground_truth: GroundTruth,
          cfg: InferenceConfig, mode: str,
          retrain=None) -> list[tuple[float, MetricsReport]]:
    """One metrics row per hyperparameter value.

    theta and k vary at inference time against fixed indexes; sigma is a
    training-time parameter, so a ``retrain`` callable mapping sigma to
    (image_index, text_index) must be supplied and is invoked per value.
    Every value is validated before any evaluation runs.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise DomainError(f"unknown sweep parameter {parameter!r}, "
                          f"expected one of {SWEEP_PARAMETERS}")
    if not values:
        raise DomainError("sweep needs at least one value")
    if parameter == "theta":
        if mode not in ("mixed", "two-stage"):
            raise DomainError("theta sweeps need mode 'mixed' or 'two-stage'")
        for v in values:
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise DomainError(f"theta value {v!r} outside [0, 1]")
    elif parameter == "k":
        if mode != "two-stage":
            raise DomainError("k sweeps need mode 'two-stage'")
        for v in values:
            if int(v) != v or v < 1:
                raise DomainError(f"k value {v!r} is not a positive integer")
    else:
        if retrain is None:
            raise DomainError("sigma sweeps need a retrain callable")
        for v in values:
            if math.isnan(v) or v < 0:
                raise DomainError(f"sigma value {v!r} must be >= 0")

    rows = []
    for v in values:
        if parameter == "theta":
            run_cfg, ii, ti = InferenceConfig(k=cfg.k, theta=float(v)), image_index, text_index
        elif parameter == "k":
            run_cfg, ii, ti = InferenceConfig(k=int(v), theta=cfg.theta), image_index, text_index
        else:
            ii, ti = retrain(v)
            run_cfg = cfg
        if ii is None or ti is None:
            raise DomainError("sweep needs image and text indexes")
        rows.append((float(v), evaluate_retrieval(ii, ti, ground_truth, run_cfg, mode)))
    return rows


def sweep_table_lines(parameter: str, rows: list[tuple[float, MetricsReport]]) -> list[str]:
    lines = [f"{parameter}\tt2i_r@1\tt2i_r@5\tt2i_r@10\ti2t_r@1\ti2t_r@5\ti2t_r@10"]
    for v, rep in rows:
        t, i = rep.text_to_image, rep.image_to_text
        lines.append(f"{v:g}\t{t.r1:.6f}\t{t.r5:.6f}\t{t.r10:.6f}"
                     f"\t{i.r1:.6f}\t{i.r5:.6f}\t{i.r10:.6f}")
    return lines


@dataclass(frozen=True)
class ModeTiming:
    mode: str
    query_count: int
    total_seconds: float
    per_query_seconds: float


@dataclass(frozen=True)
class BenchmarkReport:
    threads: int
    image_gallery_size: int
    text_gallery_size: int
    image_query_count: int
    text_query_count: int
    timings: tuple[ModeTiming, ...]

    def timing_for(self, mode: str) -> ModeTiming:
        for t in self.timings:
            if t.mode == mode:
                return t
        raise DomainError(f"mode {mode!r} not present in the benchmark report")

    def to_tsv_lines(self) -> list[str]:
        lines = [
            f"# threads={self.threads}",
            f"# gallery_sizes image={self.image_gallery_size} text={self.text_gallery_size}",
            f"# query_counts image={self.image_query_count} text={self.text_query_count}",
            "mode\tqueries\ttotal_seconds\tper_query_ms",
        ]
        for t in self.timings:
            lines.append(f"{t.mode}\t{t.query_count}\t{t.total_seconds:.6f}"
                         f"\t{t.per_query_seconds * 1e3:.4f}")
        return lines

    def to_json_dict(self) -> dict:
        return {
            "threads": self.threads,
            "gallery_sizes": {"image": self.image_gallery_size,
                              "text": self.text_gallery_size},
            "query_counts": {"image": self.image_query_count,
                             "text": self.text_query_count},
            "modes": [
                {"mode": t.mode, "queries": t.query_count,
                 "total_seconds": t.total_seconds,
                 "per_query_seconds": t.per_query_seconds}
                for t in self.timings
            ],
        }


def benchmark(image_index: GalleryIndex, text_index: GalleryIndex,
              image_queries: list[SampleFeatures], text_queries: list[SampleFeatures],
              cfg: InferenceConfig, modes: list[str] | tuple[str, ...] = SEARCH_MODES,
              threads: int = 1) -> BenchmarkReport:
    """Wall-clock time to answer every query in both directions per mode.

    One warmup query per nonempty direction runs untimed before each
    mode's measurement. Two-stage runs without the tail (its production
    shape); exhaustive modes rank the full gallery.
    """
    for m in modes:
        if m not in SEARCH_MODES:
            raise DomainError(f"unknown mode {m!r}, expected one of {SEARCH_MODES}")

    def run(query, gallery, mode):
        if mode == "two-stage":
            return two_stage_search(query, gallery, cfg)
        theta = cfg.theta if mode == "mixed" else 0.0
        return exhaustive_search(query, gallery, SimilarityMode(mode, theta))

    timings = []
    n_queries = len(image_queries) + len(text_queries)
    for mode in modes:
        if image_queries:
            run(image_queries[0], text_index, mode)
        if text_queries:
            run(text_queries[0], image_index, mode)
        start = time.perf_counter()
        for q in text_queries:
            run(q, image_index, mode)
        for q in image_queries:
            run(q, text_index, mode)
        total = time.perf_counter() - start if n_queries else 0.0
        timings.append(ModeTiming(
            mode=mode, query_count=n_queries, total_seconds=total,
            per_query_seconds=total / n_queries if n_queries else 0.0,
        ))
    return BenchmarkReport(
        threads=threads,
        image_gallery_size=image_index.n, text_gallery_size=text_index.n,
        image_query_count=len(image_queries), text_query_count=len(text_queries),
        timings=tuple(timings),
    )
