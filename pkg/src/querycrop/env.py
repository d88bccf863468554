"""Desk-scale query environment.

A query "image" is an H x W grid of D-dimensional feature cells.  Cropping
selects a half-open cell rectangle, and the image encoder is the
normalized mean over cells.  ``generate_instance`` plants a target region
carrying the positive entity's direction among distractor regions that
carry negative entities' directions.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigInfeasible, MalformedBox, OutOfBounds
from .scoring import Candidate, CandidatePool, normalize

TARGET_AREA = (0.10, 0.60)
DISTRACTOR_AREA = (0.05, 0.25)
TEXT_PROB = 0.5
_U64 = (1 << 64) - 1


class FeatureGrid:
    def __init__(self, cells):
        cells = np.asarray(cells, dtype=np.float64)
        if cells.ndim != 3 or cells.shape[0] < 1 or cells.shape[1] < 1:
            raise ValueError("a feature grid needs shape (H, W, D) with H, W >= 1")
        if not np.all(np.isfinite(cells)):
            raise ValueError("feature grid has non-finite cells")
        self.cells = cells

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def dim(self) -> int:
        return self.cells.shape[2]

    def __eq__(self, other):
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return np.array_equal(self.cells, other.cells)

    def __repr__(self):
        return f"FeatureGrid(H={self.height}, W={self.width}, D={self.dim})"


class BBox(NamedTuple):
    """Half-open cell rectangle [x1, x2) x [y1, y2); may be malformed."""

    x1: int
    y1: int
    x2: int
    y2: int

    @property
    def malformed(self) -> bool:
        return self.x2 <= self.x1 or self.y2 <= self.y1

    def within(self, width: int, height: int) -> bool:
        return 0 <= self.x1 and self.x2 <= width and 0 <= self.y1 and self.y2 <= height

    def valid_for(self, width: int, height: int) -> bool:
        return not self.malformed and self.within(width, height)

    @property
    def area(self) -> int:
        return max(self.x2 - self.x1, 0) * max(self.y2 - self.y1, 0)

    def iou(self, other: "BBox") -> float:
        ix = max(0, min(self.x2, other.x2) - max(self.x1, other.x1))
        iy = max(0, min(self.y2, other.y2) - max(self.y1, other.y1))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0

    @classmethod
    def full(cls, width: int, height: int) -> "BBox":
        return cls(0, 0, width, height)


class Decision(str, enum.Enum):
    FULL = "FULL"
    REGION = "REGION"


@dataclass(frozen=True)
class Action:
    decision: Decision
    box: BBox | None = None

    def __post_init__(self):
        decision = Decision(self.decision)
        object.__setattr__(self, "decision", decision)
        if decision is Decision.FULL and self.box is not None:
            raise ValueError("a FULL action carries no box")
        if decision is Decision.REGION:
            if self.box is None:
                raise ValueError("a REGION action requires a box")
            object.__setattr__(self, "box", BBox(*(int(v) for v in self.box)))

    @classmethod
    def full(cls) -> "Action":
        return cls(Decision.FULL)

    @classmethod
    def region(cls, box) -> "Action":
        return cls(Decision.REGION, BBox(*box))

    @property
    def is_full(self) -> bool:
        return self.decision is Decision.FULL


def crop(img: FeatureGrid, b: BBox) -> FeatureGrid:
    b = BBox(*b)
    if b.malformed:
        raise MalformedBox(f"malformed box {tuple(b)}")
    if not b.within(img.width, img.height):
        raise OutOfBounds(f"box {tuple(b)} outside {img.width}x{img.height} grid")
    return FeatureGrid(img.cells[b.y1:b.y2, b.x1:b.x2])


def embed_image(img: FeatureGrid) -> np.ndarray:
    """Stand-in image encoder: unit-normalized mean over cells."""
    return normalize(img.cells.reshape(-1, img.dim).mean(axis=0))


def apply_action(img: FeatureGrid, a: Action) -> tuple[FeatureGrid, int]:
    """Transformed query grid plus a malformed flag.

    Malformed or out-of-bounds REGION boxes fall back to the full image
    with flag 1; the reward applies the box penalty.
    """
    if a.is_full:
        return img, 0
    if not a.box.valid_for(img.width, img.height):
        return img, 1
    return crop(img, a.box), 0


# ---------------------------------------------------------------------------
# synthetic instances


@dataclass(frozen=True)
class EnvConfig:
    H: int = 16
    W: int = 16
    D: int = 16
    pool_size: int = 20
    noise_in: float = 0.3
    noise_emb: float = 0.1
    noise_q: float = 0.2
    n_distractor_regions: int = 3
    seed: int = 42

    def __post_init__(self):
        if self.H < 1 or self.W < 1 or self.D < 1:
            raise ValueError("H, W and D must be positive")
        if self.pool_size < 2:
            raise ValueError("pool_size must be at least 2")
        if min(self.noise_in, self.noise_emb, self.noise_q) < 0:
            raise ValueError("noise levels must be non-negative")
        if self.n_distractor_regions < 0:
            raise ValueError("n_distractor_regions must be non-negative")
        if not 0 <= self.seed <= _U64:
            raise ValueError("seed must fit in 64 bits")


@dataclass(frozen=True, eq=False)
class SyntheticInstance:
    image: FeatureGrid
    question_vec: np.ndarray
    pool: CandidatePool
    target_box: BBox
    seed: int
    distractor_boxes: tuple[BBox, ...] = field(default=())

    @property
    def query_id(self) -> str:
        return f"syn-{self.seed}"


@lru_cache(maxsize=64)
def _boxes_in_area_range(H: int, W: int, lo: float, hi: float) -> np.ndarray:
    """All valid boxes whose area fraction lies in [lo, hi], as (M, 4) rows."""
    total = H * W
    rows = [
        (x1, y1, x2, y2)
        for y1 in range(H)
        for y2 in range(y1 + 1, H + 1)
        for x1 in range(W)
        for x2 in range(x1 + 1, W + 1)
        if lo * total <= (x2 - x1) * (y2 - y1) <= hi * total
    ]
    return np.array(rows, dtype=np.int64).reshape(-1, 4)


def _rng_for(cfg: EnvConfig, seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[cfg.seed & _U64, seed & _U64]))


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / norms


def generate_instance(cfg: EnvConfig, seed: int) -> SyntheticInstance:
    """Deterministic synthetic query keyed by ``(cfg.seed, seed)``."""
    targets = _boxes_in_area_range(cfg.H, cfg.W, *TARGET_AREA)
    if len(targets) == 0:
        raise ConfigInfeasible(f"no target box with area in {TARGET_AREA} fits {cfg.W}x{cfg.H}")
    rng = _rng_for(cfg, seed)
    H, W, D, N = cfg.H, cfg.W, cfg.D, cfg.pool_size

    pos_entity = _unit_rows(rng, 1, D)[0]
    neg_entities = _unit_rows(rng, N - 1, D)
    target = BBox(*(int(v) for v in targets[rng.integers(len(targets))]))

    cells = cfg.noise_in * rng.standard_normal((H, W, D))
    distractors = []
    candidates_d = _boxes_in_area_range(H, W, *DISTRACTOR_AREA)
    if len(candidates_d):
        t = target
        disjoint = candidates_d[
            (candidates_d[:, 2] <= t.x1) | (candidates_d[:, 0] >= t.x2)
            | (candidates_d[:, 3] <= t.y1) | (candidates_d[:, 1] >= t.y2)
        ]
        pick_from = disjoint if len(disjoint) else candidates_d
        for _ in range(cfg.n_distractor_regions):
            box = BBox(*(int(v) for v in pick_from[rng.integers(len(pick_from))]))
            entity = neg_entities[rng.integers(N - 1)]
            cells[box.y1:box.y2, box.x1:box.x2] += entity
            distractors.append(box)
    # target painted last so it stays clean of distractor entities
    cells[target.y1:target.y2, target.x1:target.x2] = (
        pos_entity + cfg.noise_in * rng.standard_normal((target.y2 - target.y1, target.x2 - target.x1, D))
    )

    entities = np.vstack([pos_entity[None, :], neg_entities])
    labels = np.zeros(N, dtype=np.int64)
    labels[0] = 1
    perm = rng.permutation(N)
    candidates = []
    for slot, src in enumerate(perm):
        e = entities[src]
        image_emb = e + cfg.noise_emb * rng.standard_normal(D)
        has_text = rng.random() < TEXT_PROB
        text_noise = cfg.noise_emb * rng.standard_normal(D)
        text_emb = e + text_noise if has_text else None
        candidates.append(Candidate(id=f"c{slot}", image_emb=image_emb, label=int(labels[src]),
                                    text_emb=text_emb))
    question = normalize(pos_entity + cfg.noise_q * rng.standard_normal(D))
    return SyntheticInstance(
        image=FeatureGrid(cells),
        question_vec=question,
        pool=CandidatePool(candidates),
        target_box=target,
        seed=seed,
        distractor_boxes=tuple(distractors),
    )


# ---------------------------------------------------------------------------
# heuristic crop baselines


def box_size_for_area(H: int, W: int, fraction: float) -> tuple[int, int]:
    """Box (h, w) whose cell area is closest to ``fraction * H * W``.

    Ties prefer the aspect ratio closest to the grid's, then smaller h.
    """
    target = fraction * H * W
    h = np.arange(1, H + 1)
    # for fixed h only the two widths bracketing target / h can be closest
    lo = np.floor(target / h).astype(np.int64)
    hh = np.concatenate([h, h])
    ww = np.clip(np.concatenate([lo, lo + 1]), 1, W)
    dist = np.abs(hh * ww - target)
    aspect = np.abs(hh / H - ww / W)
    i = np.lexsort((hh, aspect, dist))[0]
    return int(hh[i]), int(ww[i])


def center_box(H: int, W: int, fraction: float = 0.5) -> BBox:
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    h, w = box_size_for_area(H, W, fraction)
    y1 = (H - h) // 2
    x1 = (W - w) // 2
    return BBox(x1, y1, x1 + w, y1 + h)


def center_crop(img: FeatureGrid, fraction: float = 0.5) -> Action:
    return Action.region(center_box(img.height, img.width, fraction))


AreaSampler = Callable[[np.random.Generator], float]


def uniform_area_sampler(lo: float = 0.1, hi: float = 0.9) -> AreaSampler:
    def sample(rng):
        return float(rng.uniform(lo, hi))
    return sample


def empirical_area_sampler(values: Sequence[float]) -> AreaSampler:
    """Resample uniformly from an observed list of area fractions."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("empirical area distribution is empty")
    if np.any((vals <= 0) | (vals > 1)):
        raise ValueError("area fractions must lie in (0, 1]")

    def sample(rng):
        return float(vals[rng.integers(vals.size)])
    return sample


def random_box(H: int, W: int, area_sampler: AreaSampler, rng: np.random.Generator) -> BBox:
    fraction = area_sampler(rng)
    if not 0 < fraction <= 1:
        raise ValueError(f"area sampler produced {fraction}, outside (0, 1]")
    h, w = box_size_for_area(H, W, fraction)
    y1 = int(rng.integers(H - h + 1))
    x1 = int(rng.integers(W - w + 1))
    return BBox(x1, y1, x1 + w, y1 + h)


def random_crop(img: FeatureGrid, area_sampler: AreaSampler, rng: np.random.Generator) -> Action:
    return Action.region(random_box(img.height, img.width, area_sampler, rng))


def read_area_distribution(path) -> list[float]:
    with open(path) as fh:
        return [float(line) for line in fh if line.strip()]


def write_area_distribution(values: Sequence[float], path) -> None:
    with open(path, "w") as fh:
        for v in values:
            fh.write(f"{float(v)!r}\n")


def area_fraction(box: BBox, width: int, height: int) -> float:
    return box.area / (width * height)
