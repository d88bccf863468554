"""Fixed cosine scoring model: normalization, candidate fusion, ranking."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Hashable, Sequence

import numpy as np

from .errors import ZeroVector
from .metrics import LabeledRanking, first_positive_rank


def normalize(e) -> np.ndarray:
    v = np.asarray(e, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("embedding has non-finite entries")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ZeroVector("cannot normalize a zero vector")
    return v / norm


@dataclass(frozen=True, eq=False)
class Candidate:
    id: Hashable
    image_emb: np.ndarray
    label: int
    text_emb: np.ndarray | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"candidate {self.id!r}: label must be 0 or 1")
        object.__setattr__(self, "image_emb", np.asarray(self.image_emb, dtype=np.float64))
        if self.text_emb is not None:
            object.__setattr__(self, "text_emb", np.asarray(self.text_emb, dtype=np.float64))
            if self.text_emb.shape != self.image_emb.shape:
                raise ValueError(f"candidate {self.id!r}: text/image dimension mismatch")
            if not np.any(self.text_emb):
                raise ZeroVector(f"candidate {self.id!r}: zero text embedding")
        if not np.any(self.image_emb):
            raise ZeroVector(f"candidate {self.id!r}: zero image embedding")


def fuse_candidate(c: Candidate) -> np.ndarray:
    """Unit embedding of image plus (when present) text."""
    v = c.image_emb if c.text_emb is None else c.image_emb + c.text_emb
    return normalize(v)


class CandidatePool:
    def __init__(self, candidates: Sequence[Candidate]):
        candidates = tuple(candidates)
        if len(candidates) < 2:
            raise ValueError("a candidate pool needs at least 2 candidates")
        ids = [c.id for c in candidates]
        if len(set(ids)) != len(ids):
            raise ValueError("candidate ids must be unique")
        self.candidates = candidates

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.candidates], dtype=np.int64)

    @cached_property
    def fused(self) -> np.ndarray:
        """(N, D) matrix of fused unit candidate embeddings."""
        return np.stack([fuse_candidate(c) for c in self.candidates])

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())


def score_pool(q: np.ndarray, pool: CandidatePool) -> np.ndarray:
    return np.clip(pool.fused @ np.asarray(q, dtype=np.float64), -1.0, 1.0)


@dataclass(frozen=True, eq=False)
class RankOutcome:
    ranking: LabeledRanking
    scores: np.ndarray
    rank: int | None
    pos: float | None
    neg: float | None

    @property
    def margin(self) -> float | None:
        if self.pos is None or self.neg is None:
            return None
        return self.pos - self.neg

    @property
    def order(self) -> np.ndarray:
        return self.ranking.order


def induce_ranking(scores, labels) -> RankOutcome:
    """Sort descending; equal scores keep ascending candidate index."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must be aligned")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    order = np.argsort(-scores, kind="stable")
    ranking = LabeledRanking(order, labels)
    pos_mask = labels == 1
    pos = float(scores[pos_mask].max()) if pos_mask.any() else None
    neg = float(scores[~pos_mask].max()) if (~pos_mask).any() else None
    return RankOutcome(ranking=ranking, scores=scores, rank=first_positive_rank(ranking),
                       pos=pos, neg=neg)
