"""Prepared queries shared by training, evaluation and the baselines.

An ``Episode`` fixes the action list ([FULL] + anchor crops), the query
embedding each action induces, the policy features, and the candidate
pool.  Outcomes (rankings) are computed lazily and cached per action.
Synthetic instances and ingested precomputed-embedding pools both become
episodes, so the two data paths share all downstream code.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from .env import Action, BBox, FeatureGrid, SyntheticInstance, apply_action, embed_image
from .policy import action_feature_matrix
from .errors import ZeroVector
from .scoring import CandidatePool, RankOutcome, induce_ranking, normalize, score_pool


def crop_embeddings(img: FeatureGrid, boxes: Sequence[BBox], allow_blank: bool = False) -> np.ndarray:
    """Batched ``embed_image(crop(img, b))`` for valid boxes via a summed-area table.

    Agrees with the per-box path to rounding (~1e-15), not bit for bit.
    With ``allow_blank`` a crop whose cells average to zero gets a zero
    embedding (scoring 0 against every candidate) instead of raising.
    """
    H, W, D = img.cells.shape
    sat = np.zeros((H + 1, W + 1, D))
    sat[1:, 1:] = img.cells.cumsum(axis=0).cumsum(axis=1)
    b = np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
    x1, y1, x2, y2 = b.T
    sums = sat[y2, x2] - sat[y1, x2] - sat[y2, x1] + sat[y1, x1]
    means = sums / ((x2 - x1) * (y2 - y1))[:, None]
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    blank = norms[:, 0] == 0
    if np.any(blank) and not allow_blank:
        raise ZeroVector("a crop has a zero mean embedding")
    norms[blank] = 1.0
    return means / norms


@lru_cache(maxsize=16)
def anchor_actions(anchors: tuple[BBox, ...]) -> tuple[Action, ...]:
    return (Action.full(),) + tuple(Action.region(b) for b in anchors)


class Episode:
    def __init__(self, query_id: str, pool: CandidatePool, actions: Sequence[Action],
                 action_embs: np.ndarray, question: np.ndarray, grid_hw: tuple[int, int],
                 image: FeatureGrid | None = None):
        if not actions or not actions[0].is_full:
            raise ValueError("action 0 must be FULL")
        if any(a.is_full for a in actions[1:]):
            raise ValueError("only action 0 may be FULL")
        self.query_id = query_id
        self.pool = pool
        self.actions = tuple(actions)
        self.action_embs = np.asarray(action_embs, dtype=np.float64)
        self.question = np.asarray(question, dtype=np.float64)
        self.grid_hw = grid_hw
        self.image = image
        H, W = grid_hw
        self.areas = np.array([1.0 if a.is_full else a.box.area / (H * W) for a in self.actions])
        self.features = action_feature_matrix(self.question, self.action_embs, self.areas)
        self._outcomes: dict[int, RankOutcome] = {}

    def __len__(self):
        return len(self.actions)

    @property
    def labels(self) -> np.ndarray:
        return self.pool.labels

    def outcome(self, i: int) -> RankOutcome:
        out = self._outcomes.get(i)
        if out is None:
            out = induce_ranking(score_pool(self.action_embs[i], self.pool), self.pool.labels)
            self._outcomes[i] = out
        return out

    @property
    def baseline(self) -> RankOutcome:
        return self.outcome(0)

    def outcome_for_action(self, a: Action) -> tuple[RankOutcome, int]:
        """Outcome for an arbitrary action, plus the malformed-box flag.

        Boxes outside the anchor set need the source image; without one
        (ingested pools) the nearest available region by IoU stands in.
        """
        if a in self.actions:
            return self.outcome(self.actions.index(a)), 0
        H, W = self.grid_hw
        if not a.is_full and a.box == BBox.full(W, H):
            return self.baseline, 0
        if not a.is_full and not a.box.valid_for(W, H):
            return self.baseline, 1
        if self.image is not None:
            view, flag = apply_action(self.image, a)
            q = crop_embeddings(view, [BBox.full(view.width, view.height)], allow_blank=True)[0]
            return induce_ranking(score_pool(q, self.pool), self.pool.labels), flag
        ious = [0.0 if b.is_full else a.box.iou(b.box) for b in self.actions]
        return self.outcome(int(np.argmax(ious))), 0

    @classmethod
    def from_instance(cls, inst: SyntheticInstance, anchors: Sequence[BBox]) -> "Episode":
        actions = anchor_actions(tuple(anchors))
        img = inst.image
        full = BBox.full(img.width, img.height)
        embs = np.vstack([embed_image(img)[None, :], crop_embeddings(img, anchors, allow_blank=True)])
        # a full-image anchor is an exact no-op, not just equal to rounding
        for j, b in enumerate(anchors, start=1):
            if b == full:
                embs[j] = embs[0]
        return cls(inst.query_id, inst.pool, actions, embs, inst.question_vec,
                   (inst.image.height, inst.image.width), image=inst.image)

    @classmethod
    def from_embeddings(cls, query_id: str, pool: CandidatePool, query_emb,
                        region_embs: dict[BBox, np.ndarray], question, grid_hw) -> "Episode":
        boxes = list(region_embs)
        actions = [Action.full()] + [Action.region(b) for b in boxes]
        embs = np.stack([normalize(query_emb)] + [normalize(region_embs[b]) for b in boxes])
        return cls(query_id, pool, actions, embs, normalize(question), grid_hw)
