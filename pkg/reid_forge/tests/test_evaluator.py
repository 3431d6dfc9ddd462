"""
評估器測試: 排序、AP、mAP/R1、與參照實現比對
"""

import math

import numpy as np
import pytest

from reid_forge.common.errors import DatasetError, EvaluationError
from reid_forge.common.models import RankingResult
from reid_forge.core.evaluator import (
    average_precision,
    evaluate_split,
    oracle_evaluate,
    query_distances,
    rank_action,
)
from reid_forge.tests.conftest import make_dataset


def _ranking(relevance):
    n = len(relevance)
    return RankingResult('q', tuple(str(i) for i in range(n)), tuple(float(i) for i in range(n)),
                         tuple(bool(r) for r in relevance))


def test_rank_action_orders_by_distance():
    gallery = np.array([[1.0, 0.0], [3.0, 0.0], [2.0, 0.0]])
    result = rank_action(np.zeros(2), gallery, gallery_ids=['g1', 'g2', 'g3'])
    assert result.gallery_ids == ('g1', 'g3', 'g2')
    assert result.distances == (1.0, 2.0, 3.0)


def test_rank_action_ties_keep_gallery_order():
    gallery = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    result = rank_action(np.zeros(2), gallery, gallery_ids=['a', 'b', 'c'])
    assert result.gallery_ids == ('a', 'b', 'c')


def test_rank_action_relevance():
    result = rank_action(np.zeros(1), np.array([[2.0], [1.0]]), query_label=7, gallery_labels=[7, 3])
    assert result.relevance == (False, True)
    assert result.n_relevant == 1


def test_rank_action_empty_gallery():
    with pytest.raises(EvaluationError):
        rank_action(np.zeros(2), np.zeros((0, 2)))


def test_average_precision_hand_value():
    assert average_precision(_ranking([0, 1, 1])) == pytest.approx(7 / 12, abs=1e-12)


def test_average_precision_all_relevant_first():
    assert average_precision(_ranking([1, 1, 0, 0])) == 1.0


@pytest.mark.parametrize("rank", [1, 2, 5, 9])
def test_average_precision_single_relevant(rank):
    relevance = [0] * 9
    relevance[rank - 1] = 1
    assert average_precision(_ranking(relevance)) == pytest.approx(1.0 / rank, abs=1e-12)


def test_average_precision_requires_relevant_item():
    with pytest.raises(EvaluationError):
        average_precision(_ranking([0, 0]))


def test_cosine_distance_rejects_zero_rows():
    with pytest.raises(EvaluationError):
        query_distances(np.zeros(2), np.ones((2, 2)), metric="cosine")
    with pytest.raises(EvaluationError):
        query_distances(np.ones(2), np.ones((2, 2)), metric="manhattan")


# ----------------------------------------------------------------------
# 數據集級評估

@pytest.fixture
def single_action():
    """1 個動作，1 個查詢，相關性模式 [0, 1, 1]"""
    records = [(0, 'a1', 'query'), (1, 'a1', 'gallery'), (0, 'a1', 'gallery'), (0, 'a1', 'gallery')]
    embeddings = np.array([[0.0], [1.0], [2.0], [3.0]])
    dataset = make_dataset(records, np.zeros((4, 1)), {'m1': (2020, 'x', 'y')}, {'a1': 'm1'})
    return dataset, embeddings


def test_single_action_map_and_r1(single_action):
    dataset, embeddings = single_action
    result = evaluate_split(dataset, embeddings)
    assert result.mAP == pytest.approx(58.33, abs=0.01)
    assert result.R1 == 0.0
    assert (result.n_queries, result.n_valid, result.n_excluded) == (1, 1, 0)
    assert result.format_lines()[:2] == ["mAP=58.3", "R1=0.0"]
    assert result.rankings[0].gallery_ids == ('s1', 's2', 's3')


def test_embeddings_by_sample_id(single_action):
    dataset, embeddings = single_action
    mapping = {s.sample_id: embeddings[i] for i, s in enumerate(dataset.samples)}
    assert evaluate_split(dataset, mapping).mAP == evaluate_split(dataset, embeddings).mAP


def test_missing_embedding(single_action):
    dataset, embeddings = single_action
    mapping = {s.sample_id: embeddings[i] for i, s in enumerate(dataset.samples) if i != 2}
    with pytest.raises(DatasetError, match="s2"):
        evaluate_split(dataset, mapping)


def test_embedding_matrix_shape_checked(single_action):
    dataset, embeddings = single_action
    with pytest.raises(DatasetError):
        evaluate_split(dataset, embeddings[:3])


def test_queries_without_relevant_gallery_are_excluded():
    records = [
        (0, 'a1', 'query'), (0, 'a1', 'gallery'), (1, 'a1', 'gallery'),
        (5, 'a1', 'query'),
        (2, 'a2', 'query'),
    ]
    embeddings = np.arange(5, dtype=np.float64).reshape(5, 1)
    dataset = make_dataset(records, np.zeros((5, 1)), {'m1': (2020, 'x', 'y')}, {'a1': 'm1', 'a2': 'm1'})
    result = evaluate_split(dataset, embeddings)
    assert (result.n_queries, result.n_valid, result.n_excluded) == (3, 1, 2)
    assert result.mAP == 100.0
    assert math.isnan(result.per_action['a2'].mAP)


def test_no_valid_queries_gives_nan():
    records = [(0, 'a1', 'query'), (1, 'a1', 'gallery')]
    dataset = make_dataset(records, np.zeros((2, 1)), {'m1': (2020, 'x', 'y')}, {'a1': 'm1'})
    result = evaluate_split(dataset, np.array([[0.0], [1.0]]))
    assert math.isnan(result.mAP) and math.isnan(result.R1)
    assert result.n_excluded == 1


def test_gallery_is_limited_to_the_query_action():
    """另一動作中更近的同一身份不參與排序"""
    records = [(0, 'a1', 'query'), (0, 'a1', 'gallery'), (1, 'a1', 'gallery'), (0, 'a2', 'gallery')]
    embeddings = np.array([[0.0], [5.0], [1.0], [0.0]])
    dataset = make_dataset(records, np.zeros((4, 1)), {'m1': (2020, 'x', 'y')}, {'a1': 'm1', 'a2': 'm1'})
    result = evaluate_split(dataset, embeddings)
    assert result.mAP == 50.0
    assert result.R1 == 0.0


def _random_instance(rng, integer: bool):
    n_actions = int(rng.integers(1, 11))
    records, actions = [], {}
    while len(records) < 3:
        records, actions = [], {}
        for a in range(n_actions):
            action_id = f"a{a}"
            actions[action_id] = 'm0' if a % 2 == 0 else 'm1'
            for _ in range(int(rng.integers(1, 20))):
                role = 'query' if rng.random() < 0.3 else 'gallery'
                records.append((int(rng.integers(0, 4)), action_id, role))
        records = records[:200]
        actions = {a: m for a, m in actions.items() if any(r[1] == a for r in records)}
    dim = int(rng.integers(1, 5))
    if integer:
        embeddings = rng.integers(-2, 3, size=(len(records), dim)).astype(np.float64)
    else:
        embeddings = rng.normal(size=(len(records), dim))
    dataset = make_dataset(records, np.zeros((len(records), 1)),
                           {'m0': (2020, 'x', 'y'), 'm1': (2021, 'x', 'z')}, actions)
    return dataset, embeddings


def _same(a: float, b: float) -> bool:
    return (math.isnan(a) and math.isnan(b)) or a == b


@pytest.mark.parametrize("metric", ["euclidean", "cosine"])
def test_oracle_parity_on_random_instances(metric):
    """50 個隨機實例上與暴力實現逐位一致 (整數嵌入覆蓋平局)"""
    rng = np.random.default_rng(42)
    for trial in range(50):
        dataset, embeddings = _random_instance(rng, integer=(trial % 2 == 0 and metric == "euclidean"))
        if metric == "cosine":
            embeddings = embeddings + np.sign(embeddings[:, :1] + 0.5) * 10.0
        fast = evaluate_split(dataset, embeddings, metric)
        slow = oracle_evaluate(dataset, embeddings, metric)
        assert _same(fast.mAP, slow.mAP)
        assert _same(fast.R1, slow.R1)
        assert (fast.n_queries, fast.n_valid, fast.n_excluded) == (slow.n_queries, slow.n_valid, slow.n_excluded)


def test_constant_embeddings_match_oracle():
    rng = np.random.default_rng(1)
    dataset, embeddings = _random_instance(rng, integer=False)
    constant = np.ones_like(embeddings)
    fast = evaluate_split(dataset, constant)
    slow = oracle_evaluate(dataset, constant)
    assert _same(fast.mAP, slow.mAP)
    assert _same(fast.R1, slow.R1)


def test_metrics_invariant_to_sample_order():
    rng = np.random.default_rng(7)
    dataset, embeddings = _random_instance(rng, integer=False)
    order = rng.permutation(len(dataset))
    records = [(dataset.samples[i].player_id, dataset.samples[i].action_id, dataset.samples[i].role)
               for i in order]
    shuffled = make_dataset(records, np.zeros((len(records), 1)),
                            {m.match_id: (m.year, m.team_a, m.team_b) for m in dataset.matches.values()},
                            {a.action_id: a.match_id for a in dataset.actions.values()})
    base = evaluate_split(dataset, embeddings)
    moved = evaluate_split(shuffled, embeddings[order])
    assert _same(base.mAP, moved.mAP)
    assert _same(base.R1, moved.R1)


def test_translation_and_scaling_invariance():
    rng = np.random.default_rng(3)
    dataset, embeddings = _random_instance(rng, integer=False)
    base = evaluate_split(dataset, embeddings)
    shifted = evaluate_split(dataset, embeddings + rng.normal(size=(1, embeddings.shape[1])))
    assert _same(base.R1, shifted.R1)
    assert shifted.mAP == pytest.approx(base.mAP, nan_ok=True)
    for metric in ("euclidean", "cosine"):
        reference = evaluate_split(dataset, embeddings, metric)
        for factor in (2.0, 0.5):
            scaled = evaluate_split(dataset, embeddings * factor, metric)
            assert _same(scaled.mAP, reference.mAP)
            assert _same(scaled.R1, reference.R1)


def test_cosine_matches_euclidean_on_unit_rows():
    rng = np.random.default_rng(11)
    dataset, embeddings = _random_instance(rng, integer=False)
    embeddings = embeddings + 0.1 * np.sign(embeddings)
    unit = embeddings / np.linalg.norm(embeddings, axis=1, keepdims=True)
    euclid = evaluate_split(dataset, unit, "euclidean")
    cosine = evaluate_split(dataset, unit, "cosine")
    assert cosine.mAP == pytest.approx(euclid.mAP, nan_ok=True)
    assert _same(cosine.R1, euclid.R1)


def test_split_filter(small_dataset):
    embeddings = small_dataset.feature_rows(np.arange(len(small_dataset)))
    assert evaluate_split(small_dataset, embeddings, split='valid').n_queries == 0
    assert evaluate_split(small_dataset, embeddings, split='test').n_queries == \
        evaluate_split(small_dataset, embeddings).n_queries


def test_metric_ranges(small_dataset):
    embeddings = np.random.default_rng(0).normal(size=(len(small_dataset), 3))
    result = evaluate_split(small_dataset, embeddings)
    assert 0.0 <= result.mAP <= 100.0
    assert 0.0 <= result.R1 <= 100.0
