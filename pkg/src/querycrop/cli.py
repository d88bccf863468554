"""Command-line driver.

All outputs land under ``--out`` (default: the config's ``output_dir``)::

    policy.txt             trained parameters
    curve.csv              training curve
    areas.txt              greedy REGION area fractions on the validation split
    metrics/<method>.jsonl one metrics report per method
    records/<method>.jsonl per-query decisions and ranks
    scatter/<method>.csv   margin before/after for REGION queries
    behavior.<fmt>         behavior analysis
    report.<fmt>           combined metrics table

A lock file keeps two runs from writing one directory at once.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from . import harness
from .config import ExperimentConfig
from .env import generate_instance, read_area_distribution
from .errors import QueryCropError
from .parser import parse_batch
from .policy import PolicyParams
from .rgrpo import QueryRecord, evaluate, train

log = logging.getLogger("querycrop")

LOCK_NAME = ".querycrop.lock"
FORMATS = ("csv", "md", "jsonl")
_METHOD_ORDER = ("full", "center", "random", "policy")


class LockHeld(QueryCropError):
    pass


@contextlib.contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockHeld(f"{lock} exists; another run owns {out} (remove the file if stale)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _write_metrics(out: Path, method: str, report) -> None:
    d = out / "metrics"
    d.mkdir(exist_ok=True)
    harness.emit_report({method: report}, "jsonl", d / f"{method}.jsonl")


def _write_records(out: Path, method: str, records) -> None:
    d = out / "records"
    d.mkdir(exist_ok=True)
    with open(d / f"{method}.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def _read_records(path) -> list[QueryRecord]:
    with open(path) as fh:
        return [QueryRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def _method_key(name: str):
    if name in _METHOD_ORDER:
        return (0, _METHOD_ORDER.index(name), name)
    return (1, 0, name)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(cfg: ExperimentConfig, args, out: Path) -> None:
    n = args.n if args.n is not None else (cfg.n_valid if args.split == "valid" else cfg.n_eval)
    anchors = harness.anchors_for(cfg)
    records = (harness.record_from_instance(generate_instance(cfg.env, s), anchors)
               for s in harness.split_seeds(args.split, n))
    path = out / f"dataset-{args.split}.jsonl"
    harness.write_pools(records, path)
    print(path)


def cmd_train(cfg: ExperimentConfig, args, out: Path) -> None:
    valid = harness.synthetic_episodes(cfg, "valid", cfg.n_valid) if cfg.n_valid else []
    params, curve = train(harness.train_stream(cfg), cfg.train, eval_episodes=valid)
    params.save(out / "policy.txt")
    (out / "curve.csv").write_text(curve.to_csv())
    if valid:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            harness.export_area_distribution(params, valid, out / "areas.txt")
    print(out / "policy.txt")


def _policy_path(args, out: Path) -> Path:
    return Path(args.policy) if args.policy else out / "policy.txt"


def cmd_eval(cfg: ExperimentConfig, args, out: Path) -> None:
    params = PolicyParams.load(_policy_path(args, out))
    episodes = harness.eval_episodes(cfg)
    report, records = evaluate(params, episodes, args.mode, seed=cfg.env.seed,
                               ks=cfg.eval_ks, cond_ks=cfg.cond_ks)
    _write_metrics(out, "policy", report)
    _write_records(out, "policy", records)
    print(f"policy MRR {report.mrr:.4f} over {report.n_queries} queries")


def cmd_baselines(cfg: ExperimentConfig, args, out: Path) -> None:
    areas = None
    if args.areas:
        areas = read_area_distribution(args.areas)
    reports = harness.run_baselines(cfg, harness.eval_episodes(cfg), areas)
    for name, rep in reports.items():
        _write_metrics(out, name, rep)
    sys.stdout.write(harness.render_report(reports, "md"))


def cmd_ablate(cfg: ExperimentConfig, args, out: Path) -> None:
    runs = harness.run_ablation(cfg)
    (out / "scatter").mkdir(exist_ok=True)
    for run in runs:
        name = f"ablate-{run.mask}"
        _write_metrics(out, name, run.report)
        _write_records(out, name, run.records)
        harness.margin_scatter(run.records, out / "scatter" / f"{name}.csv")
    table = harness.ablation_table(runs)
    (out / "ablation.csv").write_text(table)
    sys.stdout.write(table)


def _render_behavior(reports, fmt: str) -> str:
    cols = ("split", "rc_rate", "help", "hurt", "no_change", "n")
    rows = [r.to_dict() for r in reports if r is not None]
    if fmt == "jsonl":
        return "".join(json.dumps(r) + "\n" for r in rows)
    if fmt == "md":
        lines = ["| " + " | ".join(cols) + " |", "|---|" + "---:|" * (len(cols) - 1)]
        for r in rows:
            vals = [r["split"]] + [f"{r[c]:.4f}" for c in cols[1:-1]] + [str(r["n"])]
            lines.append("| " + " | ".join(vals) + " |")
        return "\n".join(lines) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([r["split"]] + [repr(r[c]) for c in cols[1:-1]] + [r["n"]])
    return buf.getvalue()


def cmd_analyze(cfg: ExperimentConfig, args, out: Path) -> None:
    src = Path(args.records) if args.records else out / "records" / "policy.jsonl"
    records = _read_records(src)
    method = src.stem
    reports = harness.behavior_analysis(records)
    path = out / f"behavior.{args.format}"
    path.write_text(_render_behavior(reports, args.format))
    (out / "scatter").mkdir(exist_ok=True)
    harness.margin_scatter(records, out / "scatter" / f"{method}.csv")
    sys.stdout.write(_render_behavior(reports, "md"))


def cmd_parse(cfg: ExperimentConfig, args, out: Path) -> None:
    with open(args.input) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    path = out / "parsed.jsonl"
    n_err = 0
    with open(path, "w") as fh:
        for res in parse_batch(rows):
            n_err += res["error"] is not None
            fh.write(json.dumps(res) + "\n")
    print(f"{len(rows)} outputs, {n_err} errors -> {path}")


def cmd_report(cfg: ExperimentConfig, args, out: Path) -> None:
    reports = {}
    for f in sorted((out / "metrics").glob("*.jsonl")):
        reports.update(harness.read_report_jsonl(f))
    if not reports:
        raise QueryCropError(f"no metrics under {out / 'metrics'}; run eval or baselines first")
    ordered = {k: reports[k] for k in sorted(reports, key=_method_key)}
    path = harness.emit_report(ordered, args.format, out / f"report.{args.format}")
    print(path)


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "baselines": cmd_baselines,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
    "parse": cmd_parse,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="overrides the environment and training seeds")
    common.add_argument("--out", help="output directory (default: config output_dir)")
    common.add_argument("--format", choices=FORMATS, default="csv")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="querycrop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", parents=[common], help="export a synthetic dataset as pool records")
    g.add_argument("--split", choices=sorted(harness.SPLIT_BASES), default="test")
    g.add_argument("-n", type=int, help="number of queries")
    sub.add_parser("train", parents=[common], help="train the cropping policy")
    e = sub.add_parser("eval", parents=[common], help="evaluate a trained policy")
    e.add_argument("--policy", help="policy file (default: <out>/policy.txt)")
    e.add_argument("--mode", choices=("greedy", "stochastic"), default="greedy")
    b = sub.add_parser("baselines", parents=[common], help="FULL, center-crop and random-crop baselines")
    b.add_argument("--areas", help="area-fraction file for the random crop")
    sub.add_parser("ablate", parents=[common], help="reward-ablation runs")
    a = sub.add_parser("analyze", parents=[common], help="behavior analysis and margin scatter")
    a.add_argument("--records", help="records file (default: <out>/records/policy.jsonl)")
    pp = sub.add_parser("parse", parents=[common], help="parse raw model outputs")
    pp.add_argument("input", help='JSONL rows of {"text", "width", "height"[, "id"]}')
    sub.add_parser("report", parents=[common], help="combine stored metrics into one table")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        missing = cfg.missing_paths()
        if missing:
            raise QueryCropError(f"configured paths do not exist: {missing}")
        out = Path(args.out or cfg.output_dir)
        with output_lock(out):
            COMMANDS[args.command](cfg, args, out)
    except (QueryCropError, ValueError, OSError) as exc:
        print(f"querycrop: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
