import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from querycrop.errors import EmptyConditioningSet, EmptyDataset
from querycrop.metrics import (
    LabeledRanking,
    MetricsReport,
    aggregate,
    cond_recall_at_k,
    first_positive_rank,
    hit_at_k,
    ndcg,
    reciprocal_rank,
)


def at_rank(rank, n=5):
    """Ranking with a single positive placed at ``rank``."""
    labels = [0] * n
    labels[0] = 1
    order = list(range(1, n))
    order.insert(rank - 1, 0)
    return LabeledRanking(order, labels)


@pytest.mark.parametrize("order,labels,expected", [
    ([2, 0, 1], [0, 1, 0], 3),
    ([1, 0, 2], [0, 1, 0], 1),
    ([0, 1], [0, 0], None),
])
def test_first_positive_rank(order, labels, expected):
    assert first_positive_rank(LabeledRanking(order, labels)) == expected


@pytest.mark.parametrize("rank,expected", [(1, 1.0), (4, 0.25)])
def test_reciprocal_rank(rank, expected):
    assert reciprocal_rank(at_rank(rank)) == expected


def test_no_positive_scores_zero():
    r = LabeledRanking([1, 0, 2], [0, 0, 0])
    assert reciprocal_rank(r) == 0.0
    assert ndcg(r) == 0.0
    assert all(hit_at_k(r, k) == 0 for k in (1, 2, 3, 20))


def test_ndcg_examples():
    assert ndcg(at_rank(1)) == 1.0
    r = LabeledRanking([0, 1, 2], [0, 1, 0])
    assert ndcg(r) == pytest.approx(1 / math.log2(3), abs=1e-12)
    assert ndcg(r) == pytest.approx(0.63093, abs=1e-5)


@pytest.mark.parametrize("k,expected", [(5, 1), (1, 0), (3, 1), (2, 0)])
def test_hit_at_k(k, expected):
    assert hit_at_k(at_rank(3), k) == expected


def test_hit_at_k_rejects_nonpositive_k():
    with pytest.raises(ValueError):
        hit_at_k(at_rank(1), 0)


def test_cond_recall():
    assert cond_recall_at_k([1, 0, 0], [1, 1, 0]) == 0.5
    assert cond_recall_at_k([1, 1, 1], [1, 1, 1]) == 1.0
    with pytest.raises(EmptyConditioningSet):
        cond_recall_at_k([0, 0], [0, 0])
    with pytest.raises(ValueError):
        cond_recall_at_k([1, 0], [0, 1])


@pytest.mark.parametrize("order,labels", [
    ([0, 0, 1], [0, 1, 0]),
    ([0, 1], [0, 2]),
    ([0, 1, 2], [0, 1]),
])
def test_labeled_ranking_validation(order, labels):
    with pytest.raises(ValueError):
        LabeledRanking(order, labels)


def test_aggregate_examples():
    rep = aggregate([at_rank(1), at_rank(2)])
    assert rep.mrr == 0.75
    assert rep.n_queries == 2
    ones = aggregate([at_rank(1, n=3)] * 4)
    assert ones.mrr == ones.ndcg == 1.0
    assert all(v == 1.0 for v in ones.recall_at.values())
    assert all(v == 1.0 for v in ones.cond_recall_at.values())
    with pytest.raises(EmptyDataset):
        aggregate([])


def test_aggregate_cond_recall_none_without_conditioning_set():
    rep = aggregate([LabeledRanking([0, 1], [0, 0])])
    assert rep.cond_recall_at == {1: None, 5: None, 10: None}


def test_aggregate_cond_recall_uses_top20_prefix():
    # positives at ranks 1, 7 and 25 (outside the conditioning set)
    rep = aggregate([at_rank(1, 30), at_rank(7, 30), at_rank(25, 30)])
    assert rep.cond_recall_at[1] == 0.5
    assert rep.cond_recall_at[10] == 1.0
    assert rep.recall_at[20] == pytest.approx(2 / 3)


@pytest.mark.parametrize("n", range(1, 6))
def test_exhaustive_against_oracle(n):
    # the full N <= 6 sweep lives in the acceptance suite; this is the quick version
    for labels in itertools.product((0, 1), repeat=n):
        for order in itertools.permutations(range(n)):
            r = LabeledRanking(order, labels)
            assert reciprocal_rank(r) == oracles.rr(order, labels)
            assert abs(ndcg(r) - oracles.ndcg(order, labels)) <= 1e-12
            for k in range(1, n + 1):
                assert hit_at_k(r, k) == oracles.hit(order, labels, k)


@given(st.lists(st.integers(0, 1), min_size=1, max_size=30), st.randoms(use_true_random=False))
def test_metrics_bounded_and_consistent(labels, rnd):
    order = list(range(len(labels)))
    rnd.shuffle(order)
    r = LabeledRanking(order, labels)
    assert 0.0 <= ndcg(r) <= 1.0 + 1e-12
    assert 0.0 <= reciprocal_rank(r) <= 1.0
    hits = [hit_at_k(r, k) for k in range(1, len(labels) + 1)]
    assert hits == sorted(hits)  # monotone in k
    if any(labels):
        assert hits[-1] == 1


def test_report_dict_round_trip():
    rep = aggregate([at_rank(1), at_rank(3), LabeledRanking([0, 1], [0, 0])])
    again = MetricsReport.from_dict(rep.to_dict())
    assert again == rep
    assert list(rep.as_row()) == ["mrr", "ndcg", "r@1", "r@5", "r@10", "r@20",
                                  "condr@1", "condr@5", "condr@10"]


def test_aggregate_matches_per_query_means():
    rng = np.random.default_rng(3)
    rankings = []
    for _ in range(50):
        labels = (rng.random(20) < 0.1).astype(int)
        rankings.append(LabeledRanking(rng.permutation(20), labels))
    rep = aggregate(rankings)
    assert rep.mrr == pytest.approx(np.mean([oracles.rr(r.order, r.labels) for r in rankings]), abs=1e-12)
    assert rep.ndcg == pytest.approx(np.mean([oracles.ndcg(r.order, r.labels) for r in rankings]), abs=1e-12)
