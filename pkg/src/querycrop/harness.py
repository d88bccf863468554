"""Experiment plumbing: data sources, baselines, analysis and reports.

Synthetic splits use disjoint instance-seed ranges so training, model
selection and test queries never overlap.  Ingested pools (one JSON
object per line) become the same ``Episode`` objects as synthetic
instances, so every downstream routine serves both data paths.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .config import ExperimentConfig
from .env import (
    Action,
    BBox,
    center_box,
    empirical_area_sampler,
    generate_instance,
    random_box,
    read_area_distribution,
    uniform_area_sampler,
    write_area_distribution,
)
from .episode import Episode
from .errors import DimensionMismatch, EmptyDataset, EmptySplit, SchemaError
from .metrics import MetricsReport, aggregate
from .policy import PolicyParams, build_anchors, distribution, greedy_index
from .rgrpo import QueryRecord, TrainingCurve, evaluate, train
from .scoring import Candidate, CandidatePool

log = logging.getLogger(__name__)

SPLIT_BASES = {"train": 0, "test": 1 << 40, "valid": 1 << 41}
REPORT_COLUMNS = ("method", "mrr", "ndcg", "r@1", "r@5", "r@10", "r@20",
                  "condr@1", "condr@5", "condr@10")


def split_seeds(split: str, n: int) -> range:
    base = SPLIT_BASES[split]
    return range(base, base + n)


def anchors_for(cfg: ExperimentConfig) -> tuple[BBox, ...]:
    return build_anchors(cfg.env.H, cfg.env.W, cfg.scales, cfg.stride)


def synthetic_episodes(cfg: ExperimentConfig, split: str, n: int) -> list[Episode]:
    anchors = anchors_for(cfg)
    return [Episode.from_instance(generate_instance(cfg.env, s), anchors) for s in split_seeds(split, n)]


def synthetic_stream(cfg: ExperimentConfig) -> Iterator[Episode]:
    """Endless stream of fresh training instances."""
    anchors = anchors_for(cfg)
    for s in itertools.count(SPLIT_BASES["train"]):
        yield Episode.from_instance(generate_instance(cfg.env, s), anchors)


# ---------------------------------------------------------------------------
# ingestion


def _box_key(b: BBox) -> str:
    return ",".join(str(v) for v in b)


@dataclass(eq=False)
class PoolRecord:
    query_id: str
    query_emb: np.ndarray
    candidates: list[Candidate]
    region_embs: dict[BBox, np.ndarray] = field(default_factory=dict)
    question_emb: np.ndarray | None = None
    grid: tuple[int, int] | None = None

    @property
    def dim(self) -> int:
        return int(self.query_emb.shape[0])

    @property
    def n_positive(self) -> int:
        return sum(c.label for c in self.candidates)

    def pool(self) -> CandidatePool:
        return CandidatePool(self.candidates)

    def grid_hw(self) -> tuple[int, int]:
        if self.grid is not None:
            return self.grid
        if not self.region_embs:
            return (1, 1)
        return (max(b.y2 for b in self.region_embs), max(b.x2 for b in self.region_embs))

    def to_episode(self) -> Episode:
        question = self.query_emb if self.question_emb is None else self.question_emb
        return Episode.from_embeddings(self.query_id, self.pool(), self.query_emb,
                                       self.region_embs, question, self.grid_hw())

    def to_json(self) -> dict:
        out: dict = {"query_id": self.query_id, "query_emb": self.query_emb.tolist()}
        if self.question_emb is not None:
            out["question_emb"] = self.question_emb.tolist()
        if self.grid is not None:
            out["grid"] = list(self.grid)
        if self.region_embs:
            out["region_embs"] = {_box_key(b): e.tolist() for b, e in self.region_embs.items()}
        cands = []
        for c in self.candidates:
            row = {"id": c.id, "image_emb": c.image_emb.tolist(), "label": c.label}
            if c.text_emb is not None:
                row["text_emb"] = c.text_emb.tolist()
            cands.append(row)
        out["candidates"] = cands
        return out


def _vector(row: int, name: str, value, dim: int | None) -> np.ndarray:
    if not isinstance(value, list) or not value:
        raise SchemaError(row, name, "expected a non-empty list of numbers")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise SchemaError(row, name, "expected numbers")
    vec = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        raise SchemaError(row, name, "non-finite value")
    if dim is not None and vec.shape[0] != dim:
        raise DimensionMismatch(f"row {row}: field {name!r} has {vec.shape[0]} dims, expected {dim}")
    return vec


def _parse_box(row: int, key: str) -> BBox:
    try:
        vals = [int(v) for v in key.split(",")]
    except ValueError:
        raise SchemaError(row, "region_embs", f"bad box key {key!r}") from None
    if len(vals) != 4:
        raise SchemaError(row, "region_embs", f"box key {key!r} needs 4 integers")
    b = BBox(*vals)
    if b.malformed or min(vals) < 0:
        raise SchemaError(row, "region_embs", f"box {key!r} is malformed")
    return b


def parse_pool_record(obj, row: int, dim: int | None = None) -> PoolRecord:
    if not isinstance(obj, dict):
        raise SchemaError(row, "<row>", "expected a JSON object")
    for name in ("query_id", "query_emb", "candidates"):
        if name not in obj:
            raise SchemaError(row, name, "missing")
    qid = obj["query_id"]
    if not isinstance(qid, (str, int)) or isinstance(qid, bool):
        raise SchemaError(row, "query_id", "expected a string or integer")
    q = _vector(row, "query_emb", obj["query_emb"], dim)
    dim = q.shape[0]
    if not np.any(q):
        raise SchemaError(row, "query_emb", "zero vector")
    question = None
    if obj.get("question_emb") is not None:
        question = _vector(row, "question_emb", obj["question_emb"], dim)
    grid = None
    if obj.get("grid") is not None:
        g = obj["grid"]
        if not (isinstance(g, list) and len(g) == 2 and all(isinstance(v, int) and v > 0 for v in g)):
            raise SchemaError(row, "grid", "expected [H, W] positive integers")
        grid = (g[0], g[1])
    regions: dict[BBox, np.ndarray] = {}
    raw_regions = obj.get("region_embs") or {}
    if not isinstance(raw_regions, dict):
        raise SchemaError(row, "region_embs", "expected an object keyed by 'x1,y1,x2,y2'")
    for key, vec in raw_regions.items():
        regions[_parse_box(row, key)] = _vector(row, f"region_embs[{key}]", vec, dim)
    if grid is not None and any(b.x2 > grid[1] or b.y2 > grid[0] for b in regions):
        raise SchemaError(row, "region_embs", "box outside the declared grid")
    raw_cands = obj["candidates"]
    if not isinstance(raw_cands, list) or len(raw_cands) < 2:
        raise SchemaError(row, "candidates", "need a list of at least 2 candidates")
    cands = []
    for j, c in enumerate(raw_cands):
        where = f"candidates[{j}]"
        if not isinstance(c, dict):
            raise SchemaError(row, where, "expected an object")
        for name in ("id", "image_emb", "label"):
            if name not in c:
                raise SchemaError(row, f"{where}.{name}", "missing")
        label = c["label"]
        if label not in (0, 1) or isinstance(label, bool):
            raise SchemaError(row, f"{where}.label", f"label must be 0 or 1, got {label!r}")
        img = _vector(row, f"{where}.image_emb", c["image_emb"], dim)
        text = None
        if c.get("text_emb") is not None:
            text = _vector(row, f"{where}.text_emb", c["text_emb"], dim)
        try:
            cands.append(Candidate(c["id"], img, int(label), text))
        except ValueError as exc:
            raise SchemaError(row, where, str(exc)) from None
    if len({c.id for c in cands}) != len(cands):
        raise SchemaError(row, "candidates", "duplicate candidate ids")
    return PoolRecord(str(qid), q, cands, regions, question, grid)


def load_pools(path, dim: int | None = None) -> list[PoolRecord]:
    """Read newline-delimited pool records; rows are numbered from 1."""
    records = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as exc:
                raise SchemaError(n, "<row>", f"invalid JSON: {exc}") from None
            rec = parse_pool_record(obj, n, dim)
            dim = rec.dim
            records.append(rec)
    if not records:
        raise EmptyDataset(f"{path}: no records")
    return records


def write_pools(records: Iterable[PoolRecord], path) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")
            n += 1
    return n


def record_from_instance(inst, anchors: Sequence[BBox]) -> PoolRecord:
    ep = Episode.from_instance(inst, anchors)
    embs = ep.action_embs[1:]
    return PoolRecord(
        query_id=inst.query_id,
        query_emb=ep.action_embs[0],
        candidates=list(inst.pool.candidates),
        region_embs={b: e for b, e in zip(anchors, embs)},
        question_emb=inst.question_vec,
        grid=(inst.image.height, inst.image.width),
    )


def filter_training_pools(records: Sequence[PoolRecord]) -> tuple[list[PoolRecord], int]:
    """Keep only records with at least one positive; also return the dropped count."""
    kept = [r for r in records if r.n_positive > 0]
    dropped = len(records) - len(kept)
    if dropped:
        log.info("dropped %d of %d pools without a positive", dropped, len(records))
    return kept, dropped


def cycle_records(records: Sequence[PoolRecord], seed: int) -> Iterator[Episode]:
    """Endless reshuffled passes over ingested training pools."""
    if not records:
        raise EmptyDataset("no training pools")
    episodes = [r.to_episode() for r in records]
    rng = np.random.default_rng(seed)
    while True:
        for i in rng.permutation(len(episodes)):
            yield episodes[i]


def eval_episodes(cfg: ExperimentConfig) -> list[Episode]:
    if cfg.dataset is not None:
        return [r.to_episode() for r in load_pools(cfg.dataset)]
    return synthetic_episodes(cfg, "test", cfg.n_eval)


def train_stream(cfg: ExperimentConfig) -> Iterator[Episode]:
    if cfg.train_dataset is not None:
        kept, _ = filter_training_pools(load_pools(cfg.train_dataset))
        return cycle_records(kept, cfg.train.seed)
    return synthetic_stream(cfg)


# ---------------------------------------------------------------------------
# baselines


def _evaluate_boxes(episodes: Sequence[Episode], boxes: Sequence[BBox | None], cfg) -> MetricsReport:
    rankings = []
    for x, b in zip(episodes, boxes):
        out, _ = x.outcome_for_action(Action.full() if b is None else Action.region(b))
        rankings.append(out.ranking)
    return aggregate(rankings, cfg.eval_ks, cfg.cond_ks)


def mean_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    if not reports:
        raise EmptyDataset("no reports to average")

    def avg(vals):
        return None if any(v is None for v in vals) else float(np.mean(vals))

    first = reports[0]
    return MetricsReport(
        mrr=float(np.mean([r.mrr for r in reports])),
        ndcg=float(np.mean([r.ndcg for r in reports])),
        recall_at={k: avg([r.recall_at[k] for r in reports]) for k in first.recall_at},
        cond_recall_at={k: avg([r.cond_recall_at[k] for r in reports]) for k in first.cond_recall_at},
        n_queries=first.n_queries,
    )


def run_baselines(cfg: ExperimentConfig, episodes: Sequence[Episode],
                  area_values: Sequence[float] | None = None) -> dict[str, MetricsReport]:
    """FULL, center-crop and random-crop reports on the same queries.

    The random crop draws its area from ``area_values`` (or
    ``cfg.area_file``) when given, else uniformly; draw ``d`` uses its
    own generator keyed by ``(seed, d)``.
    """
    if not episodes:
        raise EmptyDataset("no queries for the baselines")
    out: dict[str, MetricsReport] = {}
    if "full" in cfg.baselines:
        out["full"] = _evaluate_boxes(episodes, [None] * len(episodes), cfg)
    if "center" in cfg.baselines:
        boxes = [center_box(*x.grid_hw, cfg.center_fraction) for x in episodes]
        out["center"] = _evaluate_boxes(episodes, boxes, cfg)
    if "random" in cfg.baselines:
        if area_values is None and cfg.area_file is not None:
            area_values = read_area_distribution(cfg.area_file)
        sampler = empirical_area_sampler(area_values) if area_values else uniform_area_sampler()
        reports = []
        for d in range(cfg.random_draws):
            rng = np.random.default_rng([cfg.env.seed, d])
            boxes = [random_box(*x.grid_hw, sampler, rng) for x in episodes]
            reports.append(_evaluate_boxes(episodes, boxes, cfg))
        out["random"] = mean_reports(reports)
    return out


# ---------------------------------------------------------------------------
# behavior analysis and margin scatter


@dataclass(frozen=True)
class BehaviorReport:
    split: str
    rc_rate: float
    help: float
    hurt: float
    no_change: float
    n: int

    def to_dict(self) -> dict:
        return {"split": self.split, "rc_rate": self.rc_rate, "help": self.help,
                "hurt": self.hurt, "no_change": self.no_change, "n": self.n}


def _behavior(split: str, recs: Sequence[QueryRecord]) -> BehaviorReport | None:
    if not recs:
        warnings.warn(f"behavior split {split!r} has no queries", EmptySplit, stacklevel=3)
        return None
    n = len(recs)
    region = [r for r in recs if not r.action.is_full]
    help_ = sum(r.post_rank < r.base_rank for r in region)
    hurt = sum(r.post_rank > r.base_rank for r in region)
    return BehaviorReport(split, len(region) / n, help_ / n, hurt / n, (n - help_ - hurt) / n, n)


def behavior_analysis(records: Sequence[QueryRecord]) -> tuple[BehaviorReport | None, BehaviorReport | None]:
    """Reports for the queries the baseline already ranks first and for the rest.

    Queries whose pool lacks a positive are excluded; FULL decisions
    count as no change.
    """
    usable = [r for r in records if r.base_rank is not None and r.post_rank is not None]
    rank1 = [r for r in usable if r.base_rank == 1]
    rest = [r for r in usable if r.base_rank > 1]
    return _behavior("rank1", rank1), _behavior("rank_gt1", rest)


SCATTER_HEADER = ("query_id", "margin_before", "margin_after", "decision")


def margin_scatter(records: Sequence[QueryRecord], path) -> int:
    """Write REGION queries' margins before and after cropping; returns the row count."""
    rows = [r for r in records if not r.action.is_full and r.base_margin is not None
            and r.post_margin is not None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCATTER_HEADER)
        for r in rows:
            w.writerow([r.query_id, repr(r.base_margin), repr(r.post_margin), r.decision.value])
    return len(rows)


def above_diagonal_fraction(records: Sequence[QueryRecord]) -> float | None:
    rows = [r for r in records if not r.action.is_full and r.base_margin is not None
            and r.post_margin is not None]
    if not rows:
        return None
    return sum(r.post_margin > r.base_margin for r in rows) / len(rows)


def scatter_above_diagonal(path) -> float | None:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return None
    return sum(float(r["margin_after"]) > float(r["margin_before"]) for r in rows) / len(rows)


# ---------------------------------------------------------------------------
# ablation and area export


@dataclass
class AblationRun:
    mask: str
    report: MetricsReport
    params: PolicyParams
    records: list[QueryRecord]
    curve: TrainingCurve

    @property
    def above_diagonal(self) -> float | None:
        return above_diagonal_fraction(self.records)


def run_ablation(cfg: ExperimentConfig, episodes: Sequence[Episode] | None = None) -> list[AblationRun]:
    """Train and evaluate one policy per reward mask on identical seeds and streams."""
    if episodes is None:
        episodes = eval_episodes(cfg)
    runs = []
    for mask in cfg.ablation_masks:
        tcfg = dataclasses.replace(cfg.train, weights=cfg.train.weights.masked(mask))
        params, curve = train(train_stream(cfg), tcfg)
        report, records = evaluate(params, episodes, ks=cfg.eval_ks, cond_ks=cfg.cond_ks)
        runs.append(AblationRun(mask, report, params, records, curve))
        log.info("ablation %s: MRR %.4f", mask, report.mrr)
    return runs


def ablation_table(runs: Sequence[AblationRun]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("mask", "mrr", "above_diagonal"))
    for r in runs:
        ad = r.above_diagonal
        w.writerow((r.mask, repr(r.report.mrr), "" if ad is None else repr(ad)))
    return buf.getvalue()


def export_area_distribution(params: PolicyParams, episodes: Sequence[Episode], path) -> list[float]:
    """Write the area fractions of the policy's greedy REGION choices."""
    areas = []
    for x in episodes:
        i = greedy_index(distribution(params, x))
        if i != 0:
            areas.append(float(x.areas[i]))
    if not areas:
        warnings.warn("policy never chose REGION; area distribution is empty", UserWarning, stacklevel=2)
    write_area_distribution(areas, path)
    return areas


# ---------------------------------------------------------------------------
# reports


def _fmt_md(v) -> str:
    return "" if v is None else f"{v:.4f}"


def _fmt_csv(v) -> str:
    return "" if v is None else repr(float(v))


def report_rows(reports: Mapping[str, MetricsReport]) -> list[dict]:
    rows = []
    for method, rep in reports.items():
        row = {"method": method, **rep.as_row()}
        rows.append({c: row.get(c) for c in REPORT_COLUMNS})
    return rows


def render_report(reports: Mapping[str, MetricsReport], fmt: str) -> str:
    if not reports:
        raise EmptyDataset("no reports to emit")
    rows = report_rows(reports)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow([row["method"]] + [_fmt_csv(row[c]) for c in REPORT_COLUMNS[1:]])
        return buf.getvalue()
    if fmt == "md":
        lines = ["| " + " | ".join(REPORT_COLUMNS) + " |",
                 "|" + "|".join(["---"] + ["---:"] * (len(REPORT_COLUMNS) - 1)) + "|"]
        for row in rows:
            cells = [row["method"]] + [_fmt_md(row[c]) for c in REPORT_COLUMNS[1:]]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"
    if fmt == "jsonl":
        return "".join(json.dumps({"method": m, **rep.to_dict()}) + "\n" for m, rep in reports.items())
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(reports: Mapping[str, MetricsReport], fmt: str, path) -> Path:
    path = Path(path)
    path.write_text(render_report(reports, fmt))
    return path


def read_report_jsonl(path) -> dict[str, MetricsReport]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out[d.pop("method")] = MetricsReport.from_dict(d)
    return out
