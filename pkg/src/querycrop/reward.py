"""Cropping reward: ranking-improvement deltas over the full-image baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .env import BBox, Decision
from .errors import MissingClass, MissingPositive
from .metrics import ndcg, reciprocal_rank
from .scoring import RankOutcome

DEFAULT_ETA = 1.0

# Reward-ablation rows, each adding one component to the previous one.
ABLATION_MASKS = {
    "mrr": (1, 0, 0, 0),
    "mrr+ndcg": (1, 1, 0, 0),
    "mrr+ndcg+rank": (1, 1, 1, 0),
    "full": (1, 1, 1, 1),
}


@dataclass(frozen=True)
class RewardWeights:
    w1: float = 0.25
    w2: float = 0.25
    w3: float = 0.25
    w4: float = 0.25

    def __post_init__(self):
        ws = self.as_tuple()
        if any(w < 0 or not math.isfinite(w) for w in ws):
            raise ValueError("reward weights must be finite and non-negative")
        if abs(sum(ws) - 1.0) > 1e-12:
            raise ValueError(f"reward weights must sum to 1, got {sum(ws)!r}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.w1, self.w2, self.w3, self.w4)

    def masked(self, mask) -> "RewardWeights":
        """Zero the inactive terms and renormalize the rest to sum to 1."""
        if isinstance(mask, str):
            mask = ABLATION_MASKS[mask]
        kept = [w if m else 0.0 for w, m in zip(self.as_tuple(), mask)]
        total = math.fsum(kept)
        if total <= 0:
            raise ValueError("mask leaves no positive weight")
        scaled = [w / total for w in kept]
        # absorb rounding into the largest active weight so the sum is exact
        i = max(range(4), key=lambda j: scaled[j])
        scaled[i] = 1.0 - math.fsum(scaled[:i] + scaled[i + 1:])
        return RewardWeights(*scaled)


@dataclass(frozen=True)
class RewardBreakdown:
    decision: Decision
    d_mrr: float = 0.0
    d_ndcg: float = 0.0
    d_rank: float = 0.0
    d_margin: float = 0.0
    penalty: float = 0.0
    total: float = 0.0


def delta_mrr(base: RankOutcome, act: RankOutcome) -> float:
    return reciprocal_rank(act.ranking) - reciprocal_rank(base.ranking)


def delta_ndcg(base: RankOutcome, act: RankOutcome) -> float:
    return ndcg(act.ranking) - ndcg(base.ranking)


def delta_rank(base_rank: int | None, act_rank: int | None) -> float:
    """ln((base_rank + 1) / (act_rank + 1)).

    Evaluated as a difference of logs so that swapping the arguments
    negates the result exactly.
    """
    if base_rank is None or act_rank is None:
        raise MissingPositive("rank delta needs a positive in both rankings")
    return math.log(base_rank + 1) - math.log(act_rank + 1)


def delta_margin(base: RankOutcome, act: RankOutcome) -> float:
    if base.margin is None or act.margin is None:
        raise MissingClass("margin needs at least one positive and one negative candidate")
    return act.margin - base.margin


def box_penalty(box: BBox | None, malformed: int | bool, eta: float = DEFAULT_ETA) -> float:
    if malformed or (box is not None and BBox(*box).malformed):
        return eta
    return 0.0


def region_reward(base: RankOutcome, act: RankOutcome, weights: RewardWeights,
                  penalty: float = 0.0) -> RewardBreakdown:
    d_mrr = delta_mrr(base, act)
    d_ndcg = delta_ndcg(base, act)
    d_rank = delta_rank(base.rank, act.rank)
    d_margin = delta_margin(base, act)
    total = (weights.w1 * d_mrr + weights.w2 * d_ndcg + weights.w3 * d_rank
             + weights.w4 * d_margin - penalty)
    return RewardBreakdown(Decision.REGION, d_mrr, d_ndcg, d_rank, d_margin, penalty, total)


def full_reward(base: RankOutcome) -> RewardBreakdown:
    if base.rank is None:
        raise MissingPositive("FULL reward needs a positive in the baseline ranking")
    return RewardBreakdown(Decision.FULL, total=1.0 if base.rank == 1 else 0.0)
