"""Command-line entry point: ``prunebench {train,run,curves,lint,aggregate,schema}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import harness, meta
from .models import save
from .seeds import SeedLineage
from .training import evaluate


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["master_seed"] = args.seed
    if getattr(args, "out", None):
        updates["output_dir"] = args.out
    return harness.ExperimentConfig.model_validate({**cfg.model_dump(), **updates}) if updates else cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    splits = harness.load_splits(cfg.dataset, cfg.precision, cfg.master_seed)
    seed = cfg.seeds[0]
    model, tlog = harness.pretrain(cfg, splits, seed)
    acc = evaluate(model, splits.test)
    out = Path(cfg.output_dir)
    save(model, out, {
        "seed_lineage": SeedLineage(cfg.master_seed, seed).as_dict(),
        "train_log": asdict(tlog),
        "test_top1": acc.top1,
        "test_top5": acc.top5,
        "pretrain": cfg.pretrain.model_dump(mode="json"),
        "dataset": cfg.dataset.model_dump(mode="json"),
    })
    print(f"trained {cfg.arch} for {tlog.epochs} epochs (best {tlog.best_epoch}); test top1 {acc.top1:.4f} top5 {acc.top5:.4f}")
    print(f"checkpoint written to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    records = harness.run(cfg, jobs=args.jobs)
    failed = [r for r in records if r.status != "ok"]
    print(f"{len(records)} runs, {len(failed)} failed; results in {cfg.output_dir}")
    for r in failed:
        print(f"  {r.strategy} x{r.target_compression:g} seed {r.seed}: {r.failure_cause}", file=sys.stderr)
    return 1 if failed else 0


def cmd_curves(args) -> int:
    points = harness.curves(args.results, args.x, args.y)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"curves_{args.x}_{args.y}.csv"
    harness.write_curves(path, points)
    print(f"{len(points)} curve points written to {path}")
    return 0


def cmd_lint(args) -> int:
    rows = []
    for p in args.results:
        rows.extend(harness.read_results(p))
    items = harness.lint(rows)
    print(harness.format_lint(items))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "lint.json").write_text(json.dumps([asdict(i) for i in items], indent=2), encoding="utf-8")
    return 0


def cmd_aggregate(args) -> int:
    summary = meta.aggregate(args.records, args.edges, args.out)
    print(", ".join(f"{k}={v}" for k, v in summary.items()))
    return 0


def cmd_schema(args) -> int:
    print(json.dumps(harness.config_schema(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prunebench", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model from a config and save it as a checkpoint")
    t.add_argument("--config")
    t.add_argument("--seed", type=int, help="master seed (u64)")
    t.add_argument("--out", help="checkpoint directory")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", help="execute every strategy x compression x seed cell")
    r.add_argument("--config")
    r.add_argument("--seed", type=int, help="master seed (u64)")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--out", help="output directory")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("curves", help="aggregate results into mean/std tradeoff curves")
    c.add_argument("results", nargs="+", help="results.csv files or run directories")
    c.add_argument("--x", choices=("compression", "speedup"), default="compression")
    c.add_argument("--y", choices=("top1", "delta_top1"), default="top1")
    c.add_argument("--out", default=".")
    c.set_defaults(func=cmd_curves)

    l = sub.add_parser("lint", help="check results against the evaluation checklist")
    l.add_argument("results", nargs="+")
    l.add_argument("--out")
    l.set_defaults(func=cmd_lint)

    a = sub.add_parser("aggregate", help="normalize literature-reported results")
    a.add_argument("--records", required=True)
    a.add_argument("--edges")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_aggregate)

    s = sub.add_parser("schema", help="print the experiment config JSON schema")
    s.set_defaults(func=cmd_schema)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)
