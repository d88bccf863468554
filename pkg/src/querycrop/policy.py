"""Linear-softmax cropping policy over {FULL} plus a fixed anchor set.

Action 0 is always FULL; actions 1.. are REGION crops at the anchors.
Each action is described by a small feature vector and the policy puts
``softmax(features @ theta)`` over actions, so log-probability gradients
are available in closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import Action, BBox, SyntheticInstance, apply_action, embed_image
from .errors import ConfigInfeasible, ZeroVector

FEATURE_NAMES = ("question_cos", "area_frac", "is_full", "bias")
FEATURE_DIM = len(FEATURE_NAMES)
DEFAULT_SCALES = (0.25, 0.375, 0.5, 0.625, 0.75, 1.0)
DEFAULT_STRIDE = 2
PARAMS_HEADER = "region-r1-policy v1 dim={dim}"


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def build_anchors(H: int, W: int, scales: Sequence[float] = DEFAULT_SCALES,
                  stride: int = DEFAULT_STRIDE) -> tuple[BBox, ...]:
    """Square-ish anchor boxes per scale at ``stride`` offsets.

    The last offset on each axis is clamped so boxes reach the far edge.
    Order is scale, then row, then column; duplicates keep the first.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    boxes: list[BBox] = []
    seen = set()
    for s in scales:
        if not 0 < s <= 1:
            raise ValueError(f"anchor scale {s} outside (0, 1]")
        bw, bh = _round_half_up(s * W), _round_half_up(s * H)
        if bw < 1 or bh < 1:
            continue
        ys = sorted({min(y, H - bh) for y in range(0, H - bh + stride, stride)})
        xs = sorted({min(x, W - bw) for x in range(0, W - bw + stride, stride)})
        for y in ys:
            for x in xs:
                b = BBox(x, y, x + bw, y + bh)
                if b not in seen:
                    seen.add(b)
                    boxes.append(b)
    if not boxes:
        raise ConfigInfeasible(f"no anchor fits a {W}x{H} grid with scales {tuple(scales)}")
    return tuple(boxes)


def features_from_embedding(question: np.ndarray, emb: np.ndarray, area: float,
                            is_full: bool) -> np.ndarray:
    return np.array([float(question @ emb), area, 1.0 if is_full else 0.0, 1.0])


def action_feature_matrix(question: np.ndarray, embs: np.ndarray, areas: np.ndarray) -> np.ndarray:
    """Features for every action at once; row 0 is FULL."""
    n = embs.shape[0]
    is_full = np.zeros(n)
    is_full[0] = 1.0
    return np.column_stack([embs @ question, areas, is_full, np.ones(n)])


def action_features(x: SyntheticInstance, a: Action) -> np.ndarray:
    img = x.image
    view, malformed = apply_action(img, a)
    if a.is_full or malformed:
        area = 1.0
    else:
        area = a.box.area / (img.width * img.height)
    try:
        emb = embed_image(view)
    except ZeroVector:
        emb = np.zeros(img.dim)  # blank crop: no evidence either way
    return features_from_embedding(x.question_vec, emb, area, a.is_full)


@dataclass
class PolicyParams:
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).copy()
        if self.theta.ndim != 1:
            raise ValueError("theta must be a flat vector")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta has non-finite entries")

    @property
    def feature_dim(self) -> int:
        return self.theta.shape[0]

    @classmethod
    def zeros(cls, dim: int = FEATURE_DIM) -> "PolicyParams":
        return cls(np.zeros(dim))

    def save(self, path) -> None:
        lines = [PARAMS_HEADER.format(dim=self.feature_dim)]
        lines += [repr(float(v)) for v in self.theta]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "PolicyParams":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("region-r1-policy v1 dim="):
            raise ValueError(f"{path}: missing policy header")
        dim = int(lines[0].split("dim=", 1)[1])
        values = [float(v) for v in lines[1:] if v.strip()]
        if len(values) != dim:
            raise ValueError(f"{path}: header says dim={dim} but found {len(values)} values")
        return cls(np.array(values))


@dataclass(frozen=True, eq=False)
class ActionDistribution:
    actions: tuple[Action, ...]
    logits: np.ndarray
    probs: np.ndarray
    log_probs: np.ndarray

    def __len__(self):
        return len(self.actions)

    @property
    def full_prob(self) -> float:
        return float(self.probs[0])

    @classmethod
    def from_logits(cls, actions, logits) -> "ActionDistribution":
        logits = np.asarray(logits, dtype=np.float64)
        shifted = logits - logits.max()
        lse = math.log(np.exp(shifted).sum())
        log_probs = shifted - lse
        probs = np.exp(log_probs)
        probs /= probs.sum()
        return cls(tuple(actions), logits, probs, log_probs)


def distribution(params: PolicyParams, x) -> ActionDistribution:
    """Softmax over ``x.features @ theta`` for the prepared query ``x``."""
    return ActionDistribution.from_logits(x.actions, x.features @ params.theta)


def sample_index(dist: ActionDistribution, rng: np.random.Generator) -> tuple[int, float]:
    i = int(rng.choice(len(dist.probs), p=dist.probs))
    return i, float(dist.log_probs[i])


def sample_action(dist: ActionDistribution, rng: np.random.Generator) -> tuple[Action, float]:
    i, lp = sample_index(dist, rng)
    return dist.actions[i], lp


def greedy_index(dist: ActionDistribution) -> int:
    """Argmax action; ties go to the lowest index (FULL first)."""
    return int(np.argmax(dist.logits))


def _action_index(x, a) -> int:
    if isinstance(a, (int, np.integer)):
        return int(a)
    return x.actions.index(a)


def log_prob_grad(params: PolicyParams, x, a) -> np.ndarray:
    """Gradient of ln pi(a|x) w.r.t. theta: features(a) - E_pi[features]."""
    dist = distribution(params, x)
    i = _action_index(x, a)
    return x.features[i] - dist.probs @ x.features
