"""Decision-balanced group-relative policy optimization.

Per query, a group of N actions is drawn from the policy.  If the group
lacks either decision, its least likely sample is replaced by a forced
sample of the missing decision, so every group contains both FULL and
REGION.  Rewards are normalized into advantages within each decision's
subgroup, and the update is a single plain policy-gradient step

    theta <- theta + lr * mean_n A_n * grad ln pi(a_n | x)

with no ratio clipping or KL term (one update per batch, so the clipped
importance ratio is identically 1).
"""
from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .env import Action, Decision
from .episode import Episode
from .errors import EmptyDataset, NonFiniteGradient
from .metrics import COND_KS, RECALL_KS, aggregate
from .policy import ActionDistribution, PolicyParams, distribution, greedy_index
from .reward import DEFAULT_ETA, RewardBreakdown, RewardWeights, box_penalty, full_reward, region_reward

log = logging.getLogger(__name__)

THREADS_ENV = "REGION_R1_THREADS"
ADVANTAGE_MODES = ("decision", "group")


@dataclass
class TrainConfig:
    group_size: int = 8
    learning_rate: float = 0.05
    steps: int = 2000
    eps: float = 1e-8
    batch_size: int = 4
    weights: RewardWeights = field(default_factory=RewardWeights)
    eta: float = DEFAULT_ETA
    advantage_mode: str = "decision"
    eval_every: int = 0
    seed: int = 42

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ValueError("learning_rate and eps must be positive")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.advantage_mode not in ADVANTAGE_MODES:
            raise ValueError(f"advantage_mode must be one of {ADVANTAGE_MODES}")


@dataclass
class GroupSample:
    query_id: str
    indices: list[int]
    actions: list[Action]
    log_probs: np.ndarray
    grads: np.ndarray
    forced_indices: frozenset[int] = frozenset()
    rewards: list[RewardBreakdown] | None = None
    advantages: np.ndarray | None = None

    def __len__(self):
        return len(self.indices)

    @property
    def decisions(self) -> list[Decision]:
        return [a.decision for a in self.actions]

    @property
    def totals(self) -> np.ndarray:
        if self.rewards is None:
            raise ValueError("group has not been scored")
        return np.array([r.total for r in self.rewards], dtype=np.float64)


def sample_group(params: PolicyParams, x: Episode, n: int, rng: np.random.Generator,
                 dist: ActionDistribution | None = None) -> GroupSample:
    if n < 2:
        raise ValueError("group size must be at least 2")
    if dist is None:
        dist = distribution(params, x)
    idx = [int(i) for i in rng.choice(len(dist.probs), size=n, p=dist.probs)]
    forced = set()
    has_full = any(i == 0 for i in idx)
    has_region = any(i != 0 for i in idx)
    if not (has_full and has_region):
        slot = int(np.argmin([dist.log_probs[i] for i in idx]))
        if not has_full:
            idx[slot] = 0
        else:
            # renormalize over REGION actions in log space; their total mass may underflow
            region = ActionDistribution.from_logits(dist.actions[1:], dist.logits[1:])
            idx[slot] = 1 + int(rng.choice(len(region.probs), p=region.probs))
        forced.add(slot)
    mean_feat = dist.probs @ x.features
    return GroupSample(
        query_id=x.query_id,
        indices=idx,
        actions=[dist.actions[i] for i in idx],
        log_probs=dist.log_probs[idx].copy(),
        grads=x.features[idx] - mean_feat,
        forced_indices=frozenset(forced),
    )


def score_group(group: GroupSample, x: Episode, weights: RewardWeights,
                eta: float = DEFAULT_ETA) -> GroupSample:
    base = x.baseline
    rewards = []
    for i, a in zip(group.indices, group.actions):
        if a.is_full:
            rewards.append(full_reward(base))
        else:
            act, flag = x.outcome(i), 0
            rewards.append(region_reward(base, act, weights, box_penalty(a.box, flag, eta)))
    group.rewards = rewards
    return group


def normalize_advantages(group: GroupSample, eps: float = 1e-8, mode: str = "decision") -> GroupSample:
    """(r - mean) / (std + eps) within each decision subgroup (or the whole group).

    Population std; a subgroup of one sample gets advantage 0.
    """
    r = group.totals
    adv = np.zeros_like(r)
    if mode == "decision":
        decisions = np.array([d is Decision.FULL for d in group.decisions])
        parts = [np.flatnonzero(decisions), np.flatnonzero(~decisions)]
    elif mode == "group":
        parts = [np.arange(len(r))]
    else:
        raise ValueError(f"unknown advantage mode {mode!r}")
    for part in parts:
        if part.size < 2:
            continue
        sub = r[part]
        adv[part] = (sub - sub.mean()) / (sub.std() + eps)
    group.advantages = adv
    return group


def update_step(params: PolicyParams, groups: Sequence[GroupSample], lr: float) -> PolicyParams:
    adv = np.concatenate([g.advantages for g in groups])
    grads = np.concatenate([g.grads for g in groups])
    step = (adv[:, None] * grads).mean(axis=0)
    if not np.all(np.isfinite(step)):
        raise NonFiniteGradient("policy-gradient step has non-finite entries")
    return PolicyParams(params.theta + lr * step)


@dataclass(frozen=True)
class CurveRecord:
    step: int
    mean_reward: float
    full_rate: float
    eval_mrr: float | None = None


class TrainingCurve(list):
    HEADER = ("step", "mean_reward", "full_rate", "eval_mrr")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for rec in self:
            w.writerow([rec.step, repr(rec.mean_reward), repr(rec.full_rate),
                        "" if rec.eval_mrr is None else repr(rec.eval_mrr)])
        return buf.getvalue()


def train(stream: Iterable[Episode], cfg: TrainConfig, params: PolicyParams | None = None,
          eval_episodes: Sequence[Episode] | None = None) -> tuple[PolicyParams, TrainingCurve]:
    """Run ``cfg.steps`` updates, each over ``cfg.batch_size`` queries from ``stream``."""
    params = PolicyParams.zeros() if params is None else PolicyParams(params.theta)
    curve = TrainingCurve()
    if cfg.steps == 0:
        return params, curve
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    it: Iterator[Episode] = iter(stream)
    for step in range(1, cfg.steps + 1):
        groups = []
        for _ in range(cfg.batch_size):
            try:
                x = next(it)
            except StopIteration:
                raise EmptyDataset("training stream exhausted") from None
            g = sample_group(params, x, cfg.group_size, rng)
            score_group(g, x, cfg.weights, cfg.eta)
            normalize_advantages(g, cfg.eps, cfg.advantage_mode)
            groups.append(g)
        params = update_step(params, groups, cfg.learning_rate)
        totals = np.concatenate([g.totals for g in groups])
        n_full = sum(d is Decision.FULL for g in groups for d in g.decisions)
        eval_mrr = None
        if eval_episodes and cfg.eval_every and step % cfg.eval_every == 0:
            eval_mrr = evaluate(params, eval_episodes, "greedy")[0].mrr
            log.info("step %d: eval MRR %.4f", step, eval_mrr)
        curve.append(CurveRecord(step, float(totals.mean()), n_full / totals.size, eval_mrr))
    return params, curve


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    action: Action
    area: float
    base_rank: int | None
    post_rank: int | None
    base_margin: float | None
    post_margin: float | None

    @property
    def decision(self) -> Decision:
        return self.action.decision

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "decision": self.decision.value,
            "box": None if self.action.box is None else list(self.action.box),
            "area": self.area,
            "base_rank": self.base_rank,
            "post_rank": self.post_rank,
            "base_margin": self.base_margin,
            "post_margin": self.post_margin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QueryRecord":
        action = Action.full() if d["decision"] == "FULL" else Action.region(d["box"])
        return cls(d["query_id"], action, d["area"], d["base_rank"], d["post_rank"],
                   d["base_margin"], d["post_margin"])


def eval_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    n = int(raw)
    if n < 0:
        raise ValueError(f"{THREADS_ENV} must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def _choose(params: PolicyParams, x: Episode, mode: str, rng) -> int:
    dist = distribution(params, x)
    if mode == "greedy":
        return greedy_index(dist)
    if mode == "stochastic":
        return int(rng.choice(len(dist.probs), p=dist.probs))
    raise ValueError(f"unknown evaluation mode {mode!r}")


def evaluate(params: PolicyParams, episodes: Sequence[Episode], mode: str = "greedy",
             seed: int = 0, threads: int | None = None, ks: Sequence[int] = RECALL_KS,
             cond_ks: Sequence[int] = COND_KS):
    """Metrics and per-query records for the policy's chosen actions.

    Stochastic mode draws each query's action from its own generator keyed
    by ``(seed, query position)``, so results do not depend on threading.
    """
    if len(episodes) == 0:
        raise EmptyDataset("no evaluation queries")

    def one(item):
        pos, x = item
        rng = np.random.default_rng([seed, pos]) if mode == "stochastic" else None
        i = _choose(params, x, mode, rng)
        return x, i, x.outcome(i)

    n_threads = eval_threads() if threads is None else threads
    items = list(enumerate(episodes))
    if n_threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    records = []
    for x, i, out in results:
        base = x.baseline
        records.append(QueryRecord(x.query_id, x.actions[i], float(x.areas[i]), base.rank,
                                   out.rank, base.margin, out.margin))
    report = aggregate([out.ranking for _, _, out in results], ks, cond_ks)
    return report, records
