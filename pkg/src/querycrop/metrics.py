"""Rank-quality metrics over labeled rankings.

Rankings carry an ``order`` (candidate indices, best first) and binary
``labels`` aligned to the original candidate indices.  All per-query
metrics use binary relevance; averages are macro means over queries.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyConditioningSet, EmptyDataset

RECALL_KS = (1, 5, 10, 20)
COND_KS = (1, 5, 10)
COND_ON = 20


@dataclass(frozen=True, eq=False)
class LabeledRanking:
    order: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        order = np.asarray(self.order, dtype=np.int64)
        labels = np.asarray(self.labels, dtype=np.int64)
        n = labels.shape[0]
        if order.ndim != 1 or labels.ndim != 1 or order.shape[0] != n:
            raise ValueError("order and labels must be 1-d and of equal length")
        if not np.array_equal(np.sort(order), np.arange(n)):
            raise ValueError("order must be a permutation of 0..N-1")
        if np.any((labels != 0) & (labels != 1)):
            raise ValueError("labels must be binary")
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def gains(self) -> np.ndarray:
        """Labels permuted into ranked order."""
        return self.labels[self.order]


def first_positive_rank(r: LabeledRanking) -> int | None:
    hits = np.flatnonzero(r.gains)
    if hits.size == 0:
        return None
    return int(hits[0]) + 1


def reciprocal_rank(r: LabeledRanking) -> float:
    rank = first_positive_rank(r)
    return 0.0 if rank is None else 1.0 / rank


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2, dtype=np.float64))


def ndcg(r: LabeledRanking) -> float:
    """Binary-gain NDCG with a 1/log2(p+1) discount over the whole ranking."""
    gains = r.gains
    n_pos = int(gains.sum())
    if n_pos == 0:
        return 0.0
    disc = _discounts(len(gains))
    dcg = float(disc[gains == 1].sum())
    idcg = float(disc[:n_pos].sum())
    return dcg / idcg


def hit_at_k(r: LabeledRanking, k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    rank = first_positive_rank(r)
    return int(rank is not None and rank <= k)


def cond_recall_at_k(hits_k: Sequence[int], hits_20: Sequence[int]) -> float:
    """Mean of ``hits_k`` over the queries whose ``hits_20`` is 1."""
    hk = np.asarray(hits_k, dtype=np.int64)
    h20 = np.asarray(hits_20, dtype=np.int64)
    if hk.shape != h20.shape:
        raise ValueError("hit sequences must be aligned")
    if np.any(hk > h20):
        raise ValueError("hits_k must not exceed hits_20 (top-K is a prefix of top-20)")
    mask = h20 == 1
    n = int(mask.sum())
    if n == 0:
        raise EmptyConditioningSet("no query has a positive within the top 20")
    return float(hk[mask].sum()) / n


@dataclass
class MetricsReport:
    mrr: float
    ndcg: float
    recall_at: dict[int, float]
    cond_recall_at: dict[int, float | None]
    n_queries: int

    def as_row(self) -> dict:
        row = {"mrr": self.mrr, "ndcg": self.ndcg}
        for k in RECALL_KS:
            row[f"r@{k}"] = self.recall_at.get(k)
        for k in COND_KS:
            row[f"condr@{k}"] = self.cond_recall_at.get(k)
        return row

    def to_dict(self) -> dict:
        return {
            "mrr": self.mrr,
            "ndcg": self.ndcg,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "cond_recall_at": {str(k): v for k, v in self.cond_recall_at.items()},
            "n_queries": self.n_queries,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(
            mrr=d["mrr"],
            ndcg=d["ndcg"],
            recall_at={int(k): v for k, v in d["recall_at"].items()},
            cond_recall_at={int(k): v for k, v in d["cond_recall_at"].items()},
            n_queries=d["n_queries"],
        )

    def __eq__(self, other):
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def aggregate(
    rankings: Sequence[LabeledRanking],
    ks: Sequence[int] = RECALL_KS,
    cond_ks: Sequence[int] = COND_KS,
    cond_on: int = COND_ON,
) -> MetricsReport:
    """Macro-average per-query metrics into a report.

    Conditional recall entries are ``None`` when no query has a positive
    within the top ``cond_on`` positions.
    """
    if len(rankings) == 0:
        raise EmptyDataset("cannot aggregate an empty set of rankings")
    ranks = [first_positive_rank(r) for r in rankings]

    def hits(k):
        return [int(rk is not None and rk <= k) for rk in ranks]

    mrr = float(np.mean([0.0 if rk is None else 1.0 / rk for rk in ranks]))
    nd = float(np.mean([ndcg(r) for r in rankings]))
    recall = {k: float(np.mean(hits(k))) for k in ks}
    base = hits(cond_on)
    cond: dict[int, float | None] = {}
    for k in cond_ks:
        try:
            cond[k] = cond_recall_at_k(hits(min(k, cond_on)), base)
        except EmptyConditioningSet:
            cond[k] = None
    return MetricsReport(mrr=mrr, ndcg=nd, recall_at=recall, cond_recall_at=cond,
                         n_queries=len(rankings))
