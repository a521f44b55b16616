"""Multi-seed experiment execution, results files, tradeoff curves and the checklist linter."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import multiprocessing
import platform
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import __version__
from . import data as D
from .metrics import MADDS_FORMULA, SIZE_FORMULA
from .models import build, load, save
from .pruning import STRATEGIES, PruneAction, RunRecord, prune_and_finetune
from .seeds import SeedLineage
from .tensor import Precision
from .training import OptimizerCfg, evaluate, init_weights, train_to_convergence

log = logging.getLogger(__name__)

RESULTS_VERSION = 1
RESULT_COLUMNS = (
    "fingerprint", "dataset", "arch", "strategy", "target_compression", "achieved_compression",
    "speedup", "seed", "top1_before", "top1_after", "top5_before", "top5_after",
    "epochs_finetuned", "iterations", "wall_seconds", "status",
)
CURVE_COLUMNS = (
    "source", "strategy", "target_compression", "x_metric", "x_mean", "x_std",
    "y_metric", "y_mean", "y_std", "n", "n_failed", "std_available",
)


class DatasetCfg(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: Literal["mnist", "cifar10", "synth_blobs"] = "synth_blobs"
    root: Optional[str] = None
    train_limit: Optional[int] = Field(None, gt=0)
    validation_fraction: float = Field(0.1, gt=0, lt=1)
    normalize: bool = False
    # synth_blobs only
    class_count: int = Field(10, ge=2)
    n_per_class: int = Field(100, gt=0)
    test_per_class: int = Field(50, gt=0)
    dim: int = Field(32, gt=0)
    separation: float = Field(4.0, gt=0)


class ExperimentConfig(BaseModel):
    """Everything that determines a batch of runs.  Unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    dataset: DatasetCfg = DatasetCfg()
    arch: Literal["mlp_300_100", "lenet_conv", "cifar_tinyconv"] = "mlp_300_100"
    precision: Precision = Precision.BITS32
    initial_checkpoint: Optional[str] = None
    strategies: list[Literal[STRATEGIES]] = list(STRATEGIES)
    compressions: list[float] = [2.0, 4.0, 8.0, 16.0, 32.0]
    seeds: list[int] = [0, 1, 2]
    iterations: int = Field(1, ge=1)
    exclude_classifier: bool = True
    score_batch_size: int = Field(64, gt=0)
    pretrain: OptimizerCfg = OptimizerCfg()
    finetune: OptimizerCfg = OptimizerCfg()
    master_seed: int = Field(0, ge=0, lt=2**64)
    output_dir: str = "results"
    save_checkpoints: bool = True

    @field_validator("compressions")
    @classmethod
    def _compressions(cls, v):
        if not v or any(c <= 1 for c in v):
            raise ValueError("compressions must be non-empty and all > 1")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v or len(set(v)) != len(v):
            raise ValueError("seeds must be non-empty and distinct")
        return v

    @field_validator("strategies")
    @classmethod
    def _strategies(cls, v):
        if not v or len(set(v)) != len(v):
            raise ValueError("strategies must be non-empty and distinct")
        return v


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    return ExperimentConfig.model_validate_json(text)


def config_schema() -> dict:
    return ExperimentConfig.model_json_schema()


def environment() -> dict:
    return {
        "prunebench": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def checkpoint_id(path) -> str:
    return hashlib.sha256((Path(path) / "manifest.json").read_bytes()).hexdigest()


def fingerprint(config: ExperimentConfig, strategy: str, compression: float, seed: int) -> str:
    """Hash of the resolved config, the run cell and the software versions.

    The output directory is excluded; the initial checkpoint enters by
    content hash rather than path.
    """
    resolved = config.model_dump(mode="json", exclude={"output_dir", "save_checkpoints"})
    if config.initial_checkpoint:
        resolved["initial_checkpoint"] = checkpoint_id(config.initial_checkpoint)
    payload = {
        "config": resolved,
        "cell": {"strategy": strategy, "target_compression": compression, "seed": seed},
        "augmentation": "none",
        "lr_schedule": "fixed",
        "environment": environment(),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]


# -- data -------------------------------------------------------------------

@dataclass(frozen=True)
class Splits:
    train: D.Dataset
    val: D.Dataset
    test: D.Dataset


def load_splits(cfg: DatasetCfg, precision: Precision = Precision.BITS32, master_seed: int = 0) -> Splits:
    dtype = precision.dtype
    if cfg.name == "mnist":
        if not cfg.root:
            raise ValueError("dataset.root is required for mnist")
        full = D.load_mnist(cfg.root, "train", dtype)
        test = D.load_mnist(cfg.root, "test", dtype)
    elif cfg.name == "cifar10":
        if not cfg.root:
            raise ValueError("dataset.root is required for cifar10")
        root = Path(cfg.root)
        full = D.load_cifar10([D.find_file(root, f"data_batch_{i}.bin") for i in range(1, 6)], "train", dtype=dtype)
        test = D.load_cifar10([D.find_file(root, "test_batch.bin")], "test", dtype=dtype)
    else:
        lineage = SeedLineage(master_seed, 0)
        full = D.synth_blobs(cfg.class_count, cfg.n_per_class, cfg.dim, lineage.seed("data"), cfg.separation, "train", dtype)
        test = D.synth_blobs(
            cfg.class_count, cfg.test_per_class, cfg.dim, SeedLineage(master_seed, 1).seed("data"), cfg.separation, "test", dtype
        )
    if cfg.train_limit is not None:
        full = full.subset(slice(0, cfg.train_limit))
    train, val = D.split_validation(full, cfg.validation_fraction)
    if cfg.normalize:
        mean, std = D.channel_stats(train)
        train, val, test = (D.normalize(d, mean, std) for d in (train, val, test))
    return Splits(train, val, test)


# -- execution --------------------------------------------------------------

def pretrain(config: ExperimentConfig, splits: Splits, seed: int):
    lineage = SeedLineage(config.master_seed, seed)
    model = build(config.arch, splits.train.class_count, config.precision, splits.train.input_shape)
    init_weights(model, lineage.rng("init"))
    model, tlog = train_to_convergence(model, splits.train, splits.val, config.pretrain, lineage.seed("shuffle"))
    return model, tlog


def base_model(config: ExperimentConfig, splits: Splits, seed: int):
    if config.initial_checkpoint:
        model = load(config.initial_checkpoint)
        if model.name != config.arch or model.precision != config.precision:
            raise ValueError(f"checkpoint is {model.name}/{model.precision.value}, config wants {config.arch}/{config.precision.value}")
        if model.input_shape != splits.train.input_shape or model.class_count != splits.train.class_count:
            raise ValueError("checkpoint input shape / class count do not match the dataset")
        return model, None
    return pretrain(config, splits, seed)


_STATE: dict = {}


def _run_cell(cell) -> RunRecord:
    run_index, strategy, compression, seed = cell
    config: ExperimentConfig = _STATE["config"]
    splits: Splits = _STATE["splits"]
    base, control = _STATE["bases"][seed]
    started = time.perf_counter()
    fp = fingerprint(config, strategy, compression, seed)
    try:
        model = base.clone()
        action = PruneAction(strategy, compression, config.iterations, config.exclude_classifier, config.score_batch_size)
        rec = prune_and_finetune(model, action, splits.train, splits.val, splits.test, config.finetune, SeedLineage(config.master_seed, seed), control)
        if config.save_checkpoints:
            save(model, Path(config.output_dir) / "checkpoints" / f"run_{run_index:04d}", {
                "fingerprint": fp, "seed_lineage": SeedLineage(config.master_seed, seed).as_dict(), "strategy": strategy,
                "target_compression": compression,
            })
    except Exception as exc:  # one bad run must not sink the batch
        log.exception("run %d failed", run_index)
        rec = RunRecord(
            fingerprint=fp, dataset=splits.test.name, arch=config.arch, strategy=strategy, target_compression=compression,
            achieved_compression=math.nan, theoretical_speedup=math.nan, seed=seed, top1_before=control.top1,
            top1_after=math.nan, top5_before=control.top5, top5_after=math.nan, epochs_finetuned=0,
            iterations=config.iterations, wall_seconds=0.0, status="failed", failure_cause=f"{type(exc).__name__}: {exc}",
        )
    rec.fingerprint = fp
    rec.seed = seed
    rec.wall_seconds = time.perf_counter() - started
    log.info("run %d %s x%g seed %d: %s top1 %.4f -> %.4f", run_index, strategy, compression, seed, rec.status, rec.top1_before, rec.top1_after)
    return rec


def cells(config: ExperimentConfig) -> list[tuple[int, str, float, int]]:
    out = []
    for strategy in config.strategies:
        for c in config.compressions:
            for seed in config.seeds:
                out.append((len(out), strategy, float(c), seed))
    return out


def _pool(jobs: int):
    ctx = multiprocessing.get_context("fork")
    return ProcessPoolExecutor(max_workers=jobs, mp_context=ctx)


def run(config: ExperimentConfig, jobs: int = 1, splits: Optional[Splits] = None) -> list[RunRecord]:
    """Execute every (strategy, compression, seed) cell and write the results files.

    Records come back in run-index order whatever the completion order.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = splits or load_splits(config.dataset, config.precision, config.master_seed)

    pretrain_log = {}
    bases = {}
    for seed in config.seeds:
        model, tlog = base_model(config, splits, seed)
        control = evaluate(model, splits.test)
        bases[seed] = (model, control)
        pretrain_log[str(seed)] = {
            "control_top1": control.top1, "control_top5": control.top5,
            "train_log": asdict(tlog) if tlog else None,
        }
        if config.save_checkpoints and not config.initial_checkpoint:
            save(model, out / "checkpoints" / f"base_seed{seed}", {"seed_lineage": SeedLineage(config.master_seed, seed).as_dict(), "train_log": asdict(tlog)})

    _STATE.update(config=config, splits=splits, bases=bases)
    todo = cells(config)
    try:
        if jobs > 1:
            with _pool(jobs) as pool:
                records = list(pool.map(_run_cell, todo))
        else:
            records = [_run_cell(c) for c in todo]
    finally:
        _STATE.clear()

    write_results(out, config, records, pretrain_log)
    return records


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def results_rows(records: Sequence[RunRecord]) -> list[dict]:
    rows = []
    for r in records:
        rows.append({
            "fingerprint": r.fingerprint, "dataset": r.dataset, "arch": r.arch, "strategy": r.strategy,
            "target_compression": r.target_compression, "achieved_compression": r.achieved_compression,
            "speedup": r.theoretical_speedup, "seed": r.seed, "top1_before": r.top1_before, "top1_after": r.top1_after,
            "top5_before": r.top5_before, "top5_after": r.top5_after, "epochs_finetuned": r.epochs_finetuned,
            "iterations": r.iterations, "wall_seconds": r.wall_seconds,
            "status": r.status if r.status == "ok" else f"failed: {r.failure_cause}",
        })
    return rows


def write_results_csv(path, records: Sequence[RunRecord]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for row in results_rows(records):
        w.writerow([_fmt(row[c]) for c in RESULT_COLUMNS])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _json_safe(v):
    if isinstance(v, float):
        return None if not math.isfinite(v) else v
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    return v


def write_results(out: Path, config: ExperimentConfig, records: Sequence[RunRecord], pretrain_log: dict) -> None:
    write_results_csv(out / "results.csv", records)
    doc = {
        "results_version": RESULTS_VERSION,
        "columns": list(RESULT_COLUMNS),
        "config": config.model_dump(mode="json"),
        "metadata": {
            "madds_formula": MADDS_FORMULA,
            "size_formula": SIZE_FORMULA,
            "augmentation": "none",
            "normalization": "per-channel mean/std" if config.dataset.normalize else "none (pixels b/255)",
            "adam_constants": {"beta1": config.finetune.beta1, "beta2": config.finetune.beta2, "eps": config.finetune.eps},
            "environment": environment(),
            "initial_checkpoint_id": checkpoint_id(config.initial_checkpoint) if config.initial_checkpoint else None,
        },
        "pretrain": pretrain_log,
        "records": [_json_safe(r.as_dict()) for r in records],
    }
    (out / "results.json").write_text(json.dumps(doc, indent=2, allow_nan=False), encoding="utf-8")


# -- reading results --------------------------------------------------------

def _num(s: str) -> float:
    return float(s) if s not in ("", None) else math.nan


def read_results(path) -> list[dict]:
    """Rows of a results.csv (given the file or its directory), numbers parsed."""
    path = Path(path)
    if path.is_dir():
        path = path / "results.csv"
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for raw in reader:
            row = dict(raw)
            for c in ("target_compression", "achieved_compression", "speedup", "top1_before", "top1_after",
                      "top5_before", "top5_after", "wall_seconds"):
                row[c] = _num(raw[c])
            for c in ("seed", "epochs_finetuned", "iterations"):
                row[c] = int(raw[c])
            rows.append(row)
    return rows


def source_label(path) -> str:
    path = Path(path)
    return path.name if path.is_dir() else path.parent.name or path.stem


# -- curves -----------------------------------------------------------------

@dataclass(frozen=True)
class CurvePoint:
    source: str
    strategy: str
    target_compression: float
    x_metric: str
    x_mean: float
    x_std: float
    y_metric: str
    y_mean: float
    y_std: float
    n: int
    n_failed: int = 0

    @property
    def std_available(self) -> bool:
        return self.n >= 2


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (NaN when fewer than two values)."""
    m = statistics.fmean(values)
    return m, (statistics.stdev(values) if len(values) >= 2 else math.nan)


def _y(row: dict, y_metric: str) -> float:
    if y_metric == "top1":
        return row["top1_after"]
    if y_metric == "delta_top1":
        return row["top1_after"] - row["top1_before"]
    raise ValueError(f"unknown y metric {y_metric!r}")


def curve_points(rows: Iterable[dict], x_metric: str = "compression", y_metric: str = "top1", source: str = "") -> list[CurvePoint]:
    if x_metric not in ("compression", "speedup"):
        raise ValueError(f"unknown x metric {x_metric!r}")
    xcol = "achieved_compression" if x_metric == "compression" else "speedup"
    groups: dict[tuple[str, float], list[dict]] = {}
    for row in rows:
        groups.setdefault((row["strategy"], row["target_compression"]), []).append(row)
    points = []
    for (strategy, target), members in sorted(groups.items()):
        ok = [r for r in members if r["status"] == "ok"]
        if ok:
            xm, xs = mean_std([r[xcol] for r in ok])
            ym, ys = mean_std([_y(r, y_metric) for r in ok])
        else:
            xm = xs = ym = ys = math.nan
        points.append(CurvePoint(source, strategy, target, x_metric, xm, xs, y_metric, ym, ys, len(ok), len(members) - len(ok)))
    return points


def curves(paths: Sequence, x_metric: str = "compression", y_metric: str = "top1") -> list[CurvePoint]:
    """Aggregate one or more results files into per-(source, strategy) series."""
    points = []
    for p in paths:
        points.extend(curve_points(read_results(p), x_metric, y_metric, source_label(p)))
    if not points:
        raise ValueError("no records selected")
    return points


def write_curves(path, points: Sequence[CurvePoint]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for p in points:
        w.writerow([
            p.source, p.strategy, _fmt(p.target_compression), p.x_metric, _fmt(p.x_mean), _fmt(p.x_std),
            p.y_metric, _fmt(p.y_mean), _fmt(p.y_std), p.n, p.n_failed, "yes" if p.std_available else "no (n<2)",
        ])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def ordering(points: Sequence[CurvePoint], target: float) -> list[str]:
    """Strategies at one target compression, sorted by their x position (ascending)."""
    at = [p for p in points if p.target_compression == target]
    return [p.strategy for p in sorted(at, key=lambda p: (p.x_mean, p.strategy))]


# -- checklist --------------------------------------------------------------

@dataclass(frozen=True)
class LintItem:
    key: str
    checklist_text: str
    passed: bool
    detail: str


def lint(rows: Sequence[dict]) -> list[LintItem]:
    """Machine-check the automatable evaluation-checklist items on a set of records."""
    items = []
    strategies = sorted({r["strategy"] for r in rows})
    ok = [r for r in rows if r["status"] == "ok"]

    points = {s: sorted({r["target_compression"] for r in rows if r["strategy"] == s}) for s in strategies}
    min_points = min((len(v) for v in points.values()), default=0)
    items.append(LintItem(
        "operating_points", "at least five operating points per strategy",
        min_points >= 5, f"fewest operating points for a strategy: {min_points}",
    ))
    top = max((r["target_compression"] for r in rows), default=0.0)
    items.append(LintItem(
        "extreme_compression", "largest target compression is 16x or more",
        top >= 16, f"max target compression {top:g}",
    ))

    groups: dict[tuple, set] = {}
    ok_groups: dict[tuple, int] = {}
    for r in rows:
        groups.setdefault((r["strategy"], r["target_compression"]), set()).add(r["seed"])
    for r in ok:
        key = (r["strategy"], r["target_compression"])
        ok_groups[key] = ok_groups.get(key, 0) + 1
    min_seeds = min((len(s) for s in groups.values()), default=0)
    items.append(LintItem(
        "multiple_runs", "three or more independently seeded runs per operating point",
        min_seeds >= 3, f"fewest seeds in a group: {min_seeds} over {len(groups)} groups",
    ))
    min_ok = min((ok_groups.get(k, 0) for k in groups), default=0)
    items.append(LintItem(
        "error_bars", "enough successful runs per point for a mean and sample std",
        min_ok >= 2, f"fewest successful runs in a group: {min_ok}",
    ))

    def _finite(v):
        return isinstance(v, float) and math.isfinite(v)

    missing_acc = sum(not _finite(r["top1_after"]) for r in ok)
    items.append(LintItem(
        "raw_accuracy", "absolute top-1 accuracy recorded for every successful run",
        bool(ok) and missing_acc == 0, f"{missing_acc} of {len(ok)} successful records lack top-1 accuracy",
    ))
    missing_flops = sum(not (_finite(r["speedup"]) and r["speedup"] > 0) for r in ok)
    items.append(LintItem(
        "flop_counts", "multiply-add based speedup recorded for every successful run",
        bool(ok) and missing_flops == 0, f"{missing_flops} of {len(ok)} successful records lack a speedup",
    ))
    missing_ctrl = sum(not _finite(r["top1_before"]) for r in rows)
    items.append(LintItem(
        "control_metrics", "unpruned control accuracy recorded alongside each run",
        bool(rows) and missing_ctrl == 0, f"{missing_ctrl} of {len(rows)} records lack control accuracy",
    ))
    items.append(LintItem(
        "random_baseline", "random pruning included as a baseline",
        "random" in strategies, f"strategies: {', '.join(strategies) or 'none'}",
    ))
    mag = [s for s in strategies if s.endswith("_magnitude")]
    items.append(LintItem(
        "magnitude_baseline", "magnitude pruning included as a baseline",
        bool(mag), f"magnitude strategies: {', '.join(mag) or 'none'}",
    ))
    return items


def format_lint(items: Sequence[LintItem]) -> str:
    lines = [f"{'PASS' if i.passed else 'FAIL'}  {i.key:<20} {i.checklist_text}  [{i.detail}]" for i in items]
    lines.append(f"{sum(i.passed for i in items)}/{len(items)} automatable items pass")
    return "\n".join(lines)
