import numpy as np
import pytest

from dualtok import (
    BenchmarkReport,
    DataError,
    DirectionMetrics,
    DomainError,
    GroundTruth,
    InferenceConfig,
    Modality,
    RankedList,
    SampleFeatures,
    benchmark,
    build_index,
    evaluate_retrieval,
    queries_from_index,
    query_from_index,
    recall_at_k,
    sweep,
    sweep_table_lines,
)
from dualtok.evaluation import SEARCH_MODES

from .helpers import random_gallery

DIM = 6


def planted_galleries(n=5, seed=0):
    """Image i and text n+i share the same vectors, so every mode should
    put the partner at rank 1."""
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(n, DIM)).astype(np.float32)
    images, texts, pairs = [], [], []
    for i in range(n):
        tok = vecs[i][None, :]
        images.append(SampleFeatures(i, Modality.IMAGE, vecs[i], tok))
        texts.append(SampleFeatures(n + i, Modality.TEXT, vecs[i], tok))
        pairs.append((i, n + i))
    return build_index(images), build_index(texts), pairs


def ranking(ids):
    n = len(ids)
    return RankedList(np.asarray(ids, np.uint64),
                      np.linspace(1.0, 0.0, n), ("global",) * n)


def test_recall_at_k_any_match_semantics():
    r = ranking([7, 3, 9, 1])
    assert recall_at_k(r, {3}, 1) == 0
    assert recall_at_k(r, {3}, 2) == 1
    assert recall_at_k(r, {1, 3}, 2) == 1  # any relevant id counts
    assert recall_at_k(r, {42}, 10) == 0
    assert recall_at_k(r, {1}, 100) == 1  # k larger than the list is fine


def test_recall_at_k_monotone_in_k():
    r = ranking([5, 4, 3, 2, 1])
    values = [recall_at_k(r, {2}, k) for k in (1, 2, 3, 4, 5)]
    assert values == sorted(values)


def test_recall_at_k_validation():
    r = ranking([1])
    with pytest.raises(DomainError):
        recall_at_k(r, {1}, 0)
    with pytest.raises(DomainError):
        recall_at_k(r, set(), 1)


def test_ground_truth_from_pairs_many_to_many():
    gt = GroundTruth.from_pairs([(0, 10), (0, 11), (1, 10)])
    assert gt.image_to_texts[0] == {10, 11}
    assert gt.text_to_images[10] == {0, 1}
    with pytest.raises(DomainError):
        GroundTruth.from_pairs([])
    with pytest.raises(DomainError, match="query 5"):
        GroundTruth(image_to_texts={5: frozenset()}, text_to_images={})


def test_direction_metrics_must_be_monotone():
    DirectionMetrics(0.1, 0.5, 0.5, 10)
    with pytest.raises(DomainError):
        DirectionMetrics(0.5, 0.4, 0.6, 10)
    with pytest.raises(DomainError):
        DirectionMetrics(0.0, 0.0, 1.1, 10)


def test_planted_correspondence_gets_perfect_recall():
    ii, ti, pairs = planted_galleries()
    gt = GroundTruth.from_pairs(pairs)
    for mode in SEARCH_MODES:
        rep = evaluate_retrieval(ii, ti, gt, InferenceConfig(k=3, theta=0.5), mode)
        assert rep.text_to_image.r1 == 1.0, mode
        assert rep.image_to_text.r1 == 1.0, mode
        assert rep.text_to_image.r10 == 1.0
        assert rep.mode == mode


def test_evaluation_is_deterministic_apart_from_timing():
    ii, ti, pairs = planted_galleries(8, seed=3)
    gt = GroundTruth.from_pairs(pairs)
    a = evaluate_retrieval(ii, ti, gt, InferenceConfig(), "mixed")
    b = evaluate_retrieval(ii, ti, gt, InferenceConfig(), "mixed")
    assert a.to_tsv_lines() == b.to_tsv_lines()
    assert "timing" in a.to_json_dict()
    assert not any("seconds" in line for line in a.to_tsv_lines())


def test_evaluate_checks_id_consistency():
    ii, ti, pairs = planted_galleries()
    gt = GroundTruth.from_pairs(pairs + [(77, 5)])
    with pytest.raises(DataError, match="missing"):
        evaluate_retrieval(ii, ti, gt, InferenceConfig(), "global")
    gt2 = GroundTruth.from_pairs([(0, 999)])
    with pytest.raises(DataError, match="999"):
        evaluate_retrieval(ii, ti, gt2, InferenceConfig(), "global")


def test_evaluate_rejects_unknown_mode():
    ii, ti, pairs = planted_galleries()
    with pytest.raises(DomainError, match="mode"):
        evaluate_retrieval(ii, ti, GroundTruth.from_pairs(pairs), InferenceConfig(),
                           "approximate")


def test_query_reconstruction():
    ii, _, _ = planted_galleries()
    q = query_from_index(ii, 2)
    assert q.id == 2 and q.modality is Modality.IMAGE
    assert abs(np.linalg.norm(q.global_vec.astype(np.float64)) - 1.0) < 1e-6
    assert q.tokens.tobytes() == ii.tokens[ii.position(2)].tobytes()
    qs = queries_from_index(ii, limit=3)
    assert [s.id for s in qs] == [0, 1, 2]
    assert len(queries_from_index(ii)) == ii.n
    with pytest.raises(DomainError):
        queries_from_index(ii, limit=-1)


# ----------------------------------------------------------------------- sweep


def test_theta_sweep_runs_per_value():
    ii, ti, pairs = planted_galleries(6, seed=5)
    gt = GroundTruth.from_pairs(pairs)
    rows = sweep("theta", [0.0, 0.5, 1.0], image_index=ii, text_index=ti,
                 ground_truth=gt, cfg=InferenceConfig(k=3), mode="mixed")
    assert [v for v, _ in rows] == [0.0, 0.5, 1.0]
    assert all(rep.theta == v for v, rep in rows)
    table = sweep_table_lines("theta", rows)
    assert table[0].startswith("theta\t")
    assert len(table) == 4


def test_k_sweep_requires_two_stage():
    ii, ti, pairs = planted_galleries(6, seed=6)
    gt = GroundTruth.from_pairs(pairs)
    rows = sweep("k", [1, 3, 6], image_index=ii, text_index=ti,
                 ground_truth=gt, cfg=InferenceConfig(theta=0.5), mode="two-stage")
    assert [rep.k for _, rep in rows] == [1, 3, 6]
    with pytest.raises(DomainError, match="two-stage"):
        sweep("k", [1], image_index=ii, text_index=ti, ground_truth=gt,
              cfg=InferenceConfig(), mode="global")


def test_sweep_validates_everything_upfront():
    ii, ti, pairs = planted_galleries(4, seed=7)
    gt = GroundTruth.from_pairs(pairs)
    with pytest.raises(DomainError):
        sweep("gamma", [1.0], image_index=ii, text_index=ti, ground_truth=gt,
              cfg=InferenceConfig(), mode="mixed")
    with pytest.raises(DomainError):
        sweep("theta", [], image_index=ii, text_index=ti, ground_truth=gt,
              cfg=InferenceConfig(), mode="mixed")
    with pytest.raises(DomainError, match="outside"):
        sweep("theta", [0.5, 1.5], image_index=ii, text_index=ti, ground_truth=gt,
              cfg=InferenceConfig(), mode="mixed")
    with pytest.raises(DomainError, match="theta sweeps"):
        sweep("theta", [0.5], image_index=ii, text_index=ti, ground_truth=gt,
              cfg=InferenceConfig(), mode="global")
    with pytest.raises(DomainError, match="positive integer"):
        sweep("k", [0], image_index=ii, text_index=ti, ground_truth=gt,
              cfg=InferenceConfig(), mode="two-stage")


def test_sigma_sweep_uses_the_retrain_callable():
    ii, ti, pairs = planted_galleries(4, seed=8)
    gt = GroundTruth.from_pairs(pairs)
    calls = []

    def retrain(sigma):
        calls.append(sigma)
        return ii, ti

    rows = sweep("sigma", [0.1, 0.3], ground_truth=gt, cfg=InferenceConfig(k=4),
                 mode="two-stage", retrain=retrain)
    assert calls == [0.1, 0.3]
    assert len(rows) == 2
    with pytest.raises(DomainError, match="retrain"):
        sweep("sigma", [0.1], image_index=ii, text_index=ti, ground_truth=gt,
              cfg=InferenceConfig(), mode="two-stage")
    with pytest.raises(DomainError, match=">= 0"):
        sweep("sigma", [-1.0], ground_truth=gt, cfg=InferenceConfig(),
              mode="two-stage", retrain=retrain)


# ------------------------------------------------------------------- benchmark


def test_benchmark_reports_all_modes():
    ii, ti, _ = planted_galleries(10, seed=9)
    iq = queries_from_index(ii, limit=3)
    tq = queries_from_index(ti, limit=3)
    rep = benchmark(ii, ti, iq, tq, InferenceConfig(k=5), modes=SEARCH_MODES)
    assert [t.mode for t in rep.timings] == list(SEARCH_MODES)
    for t in rep.timings:
        assert t.query_count == 6
        assert t.total_seconds >= 0.0
    assert rep.timing_for("global").mode == "global"
    with pytest.raises(DomainError):
        rep.timing_for("warp")
    lines = rep.to_tsv_lines()
    assert lines[0] == "# threads=1"
    assert lines[3].startswith("mode\t")
    assert len(lines) == 4 + len(SEARCH_MODES)
    js = rep.to_json_dict()
    assert js["gallery_sizes"] == {"image": 10, "text": 10}


def test_benchmark_with_no_queries():
    ii, ti, _ = planted_galleries(4, seed=10)
    rep = benchmark(ii, ti, [], [], InferenceConfig(), modes=("global",))
    t = rep.timing_for("global")
    assert t.query_count == 0
    assert t.total_seconds == 0.0
    assert t.per_query_seconds == 0.0


def test_benchmark_rejects_unknown_modes():
    ii, ti, _ = planted_galleries(4, seed=11)
    with pytest.raises(DomainError):
        benchmark(ii, ti, [], [], InferenceConfig(), modes=("global", "fuzzy"))
