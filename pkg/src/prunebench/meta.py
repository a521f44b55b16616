"""Literature results: metric conversion, baseline standardization, fragmentation and comparison statistics."""

from __future__ import annotations

import csv
import io
import math
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

X_KINDS = (
    "fraction_params_remaining", "fraction_params_pruned", "compression_ratio",
    "fraction_flops_remaining", "flops_absolute",
)
Y_KINDS = ("top1_acc", "top1_err", "top5_acc", "top5_err", "delta_top1", "delta_top5")
Y_UNITS = ("percent", "fraction")
SIZE_KINDS = X_KINDS[:3]
FLOP_KINDS = X_KINDS[3:]

RECORD_COLUMNS = (
    "paper_id", "year", "peer_reviewed", "dataset", "architecture", "method",
    "x_kind", "x_value", "y_kind", "y_value", "y_unit", "baseline_size", "baseline_flops",
)


class RecordError(ValueError):
    pass


@dataclass(frozen=True)
class ReportedResult:
    paper_id: str
    year: int
    peer_reviewed: bool
    dataset: str
    architecture: str
    method: str
    x_kind: str
    x_value: float
    y_kind: str
    y_value: float
    y_unit: str
    baseline_size: Optional[float] = None
    baseline_flops: Optional[float] = None

    def __post_init__(self):
        if self.x_kind not in X_KINDS:
            raise RecordError(f"{self.paper_id}: unknown x_kind {self.x_kind!r}")
        if self.y_kind not in Y_KINDS:
            raise RecordError(f"{self.paper_id}: unknown y_kind {self.y_kind!r}")
        if self.y_unit not in Y_UNITS:
            raise RecordError(f"{self.paper_id}: unresolvable unit {self.y_unit!r}; declare 'percent' or 'fraction'")
        if not self.x_value > 0:
            raise RecordError(f"{self.paper_id}: x_value must be > 0, got {self.x_value}")
        hi = 100.0 if self.y_unit == "percent" else 1.0
        lo = -hi if self.y_kind.startswith("delta") else 0.0
        if not lo <= self.y_value <= hi:
            raise RecordError(f"{self.paper_id}: y_value {self.y_value} outside [{lo}, {hi}] for unit {self.y_unit}")


@dataclass(frozen=True)
class NormalizedResult:
    source: ReportedResult
    compression_ratio: Optional[float] = None
    speedup: Optional[float] = None
    top1_acc: Optional[float] = None
    top5_acc: Optional[float] = None
    delta_top1: Optional[float] = None
    delta_top5: Optional[float] = None

    @property
    def size_fraction_remaining(self) -> Optional[float]:
        return None if self.compression_ratio is None else 1.0 / self.compression_ratio

    @property
    def flops_fraction_remaining(self) -> Optional[float]:
        return None if self.speedup is None else 1.0 / self.speedup


@dataclass(frozen=True)
class StandardizedResult:
    result: NormalizedResult
    standard_size: Optional[float]
    standard_flops: Optional[float]
    absolute_size: Optional[float]
    absolute_flops: Optional[float]
    normalizable: bool


def normalize_metrics(record: ReportedResult) -> NormalizedResult:
    """Canonical compression ratio / speedup and accuracies as fractions."""
    x, kind = record.x_value, record.x_kind
    compression = speedup = None
    if kind == "fraction_params_pruned":
        if x >= 1:
            raise RecordError(f"{record.paper_id}: fraction pruned {x} >= 1")
        compression = 1.0 / (1.0 - x)
    elif kind == "fraction_params_remaining":
        compression = 1.0 / x
    elif kind == "compression_ratio":
        compression = x
    elif kind == "fraction_flops_remaining":
        speedup = 1.0 / x
    elif kind == "flops_absolute" and record.baseline_flops:
        speedup = record.baseline_flops / x

    y = record.y_value / 100.0 if record.y_unit == "percent" else record.y_value
    acc = {}
    if record.y_kind.endswith("_err"):
        acc[record.y_kind.replace("_err", "_acc")] = 1.0 - y
    else:
        acc[record.y_kind] = y
    return NormalizedResult(record, compression, speedup, **acc)


def _median_over_papers(pairs: Iterable[tuple[str, float]]) -> Optional[float]:
    per_paper: dict[str, list[float]] = defaultdict(list)
    for paper, value in pairs:
        if value is not None and not (isinstance(value, float) and math.isnan(value)):
            per_paper[paper].append(value)
    if not per_paper:
        return None
    return statistics.median(statistics.median(v) for v in per_paper.values())


def standardize_baselines(results: Sequence[NormalizedResult]) -> list[StandardizedResult]:
    """Place results for one architecture on a common absolute size / FLOP scale.

    The standard initial value is the median (over papers) of reported
    baselines; each result's absolute value is its remaining fraction times
    that standard.
    """
    archs = {r.source.architecture for r in results}
    if len(archs) > 1:
        raise RecordError(f"standardize_baselines takes one architecture, got {sorted(archs)}")
    std_size = _median_over_papers((r.source.paper_id, r.source.baseline_size) for r in results)
    std_flops = _median_over_papers((r.source.paper_id, r.source.baseline_flops) for r in results)
    out = []
    for r in results:
        size = flops = None
        if std_size is not None and r.size_fraction_remaining is not None:
            size = r.size_fraction_remaining * std_size
        if std_flops is not None and r.flops_fraction_remaining is not None:
            flops = r.flops_fraction_remaining * std_flops
        out.append(StandardizedResult(r, std_size, std_flops, size, flops, size is not None or flops is not None))
    return out


def standardize_all(results: Sequence[NormalizedResult]) -> list[StandardizedResult]:
    by_arch: dict[str, list[NormalizedResult]] = defaultdict(list)
    for r in results:
        by_arch[r.source.architecture].append(r)
    out = []
    for arch in sorted(by_arch):
        out.extend(standardize_baselines(by_arch[arch]))
    return out


@dataclass(frozen=True)
class FragmentationStats:
    pairs: list[tuple[str, str, int]]
    pairs_per_paper: dict[int, int]
    points_per_curve: dict[int, int]


def fragmentation_stats(records: Sequence[ReportedResult]) -> FragmentationStats:
    """(dataset, architecture) usage counts and per-paper / per-curve histograms."""
    papers_by_pair: dict[tuple[str, str], set[str]] = defaultdict(set)
    pairs_by_paper: dict[str, set] = defaultdict(set)
    curve_points: Counter = Counter()
    for r in records:
        papers_by_pair[(r.dataset, r.architecture)].add(r.paper_id)
        pairs_by_paper[r.paper_id].add((r.dataset, r.architecture))
        curve_points[(r.paper_id, r.method, r.dataset, r.architecture)] += 1
    pairs = sorted(((d, a, len(p)) for (d, a), p in papers_by_pair.items()), key=lambda t: (-t[2], t[0], t[1]))
    return FragmentationStats(
        pairs=pairs,
        pairs_per_paper=dict(sorted(Counter(len(v) for v in pairs_by_paper.values()).items())),
        points_per_curve=dict(sorted(Counter(curve_points.values()).items())),
    )


@dataclass(frozen=True)
class ComparisonEdge:
    from_paper: str
    to_paper: str

    def __post_init__(self):
        if self.from_paper == self.to_paper:
            raise RecordError(f"self-comparison edge for {self.from_paper}")


@dataclass(frozen=True)
class ComparisonStats:
    in_degree: dict[str, int]
    out_degree: dict[str, int]
    in_histogram: dict[int, int]
    out_histogram: dict[int, int]
    never_compared_to: list[str]
    compares_to_none: list[str]

    @property
    def fraction_comparing_to_none(self) -> float:
        return len(self.compares_to_none) / len(self.out_degree) if self.out_degree else math.nan


def comparison_stats(edges: Iterable[ComparisonEdge], papers: Iterable[str] = ()) -> ComparisonStats:
    """In/out-degree histograms of the directed "compares to" graph (cycles allowed)."""
    edges = set(edges)
    nodes = set(papers)
    for e in edges:
        nodes.update((e.from_paper, e.to_paper))
    indeg = {p: 0 for p in sorted(nodes)}
    outdeg = {p: 0 for p in sorted(nodes)}
    for e in edges:
        indeg[e.to_paper] += 1
        outdeg[e.from_paper] += 1
    return ComparisonStats(
        in_degree=indeg,
        out_degree=outdeg,
        in_histogram=dict(sorted(Counter(indeg.values()).items())),
        out_histogram=dict(sorted(Counter(outdeg.values()).items())),
        never_compared_to=[p for p, d in indeg.items() if d == 0],
        compares_to_none=[p for p, d in outdeg.items() if d == 0],
    )


# -- file I/O ---------------------------------------------------------------

def _opt_float(s: str) -> Optional[float]:
    s = (s or "").strip()
    return float(s) if s else None


def _bool(s: str) -> bool:
    v = (s or "").strip().lower()
    if v in ("1", "true", "yes", "y"):
        return True
    if v in ("0", "false", "no", "n"):
        return False
    raise RecordError(f"not a boolean: {s!r}")


def parse_record(row: dict) -> ReportedResult:
    unit = (row.get("y_unit") or "").strip()
    if not unit:
        raise RecordError(f"{row.get('paper_id')}: row has no y_unit; percent vs fraction must be declared")
    try:
        return ReportedResult(
            paper_id=row["paper_id"].strip(),
            year=int(row["year"]),
            peer_reviewed=_bool(row["peer_reviewed"]),
            dataset=row["dataset"].strip(),
            architecture=row["architecture"].strip(),
            method=row["method"].strip(),
            x_kind=row["x_kind"].strip(),
            x_value=float(row["x_value"]),
            y_kind=row["y_kind"].strip(),
            y_value=float(row["y_value"]),
            y_unit=unit,
            baseline_size=_opt_float(row.get("baseline_size")),
            baseline_flops=_opt_float(row.get("baseline_flops")),
        )
    except (KeyError, ValueError) as exc:
        if isinstance(exc, RecordError):
            raise
        raise RecordError(f"{row.get('paper_id')}: malformed row ({exc})") from None


def read_records(path) -> list[ReportedResult]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RECORD_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise RecordError(f"{path}: missing columns {sorted(missing)}")
        return [parse_record(row) for row in reader]


def read_edges(path) -> list[ComparisonEdge]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if not {"from_paper", "to_paper"} <= set(reader.fieldnames or ()):
            raise RecordError(f"{path}: edges need from_paper,to_paper columns")
        return [ComparisonEdge(r["from_paper"].strip(), r["to_paper"].strip()) for r in reader]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _write(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


NORMALIZED_COLUMNS = RECORD_COLUMNS + (
    "compression_ratio", "speedup", "top1_acc", "top5_acc", "delta_top1", "delta_top5",
    "standard_size", "standard_flops", "absolute_size", "absolute_flops", "normalizable",
)


def aggregate(records_path, edges_path, out_dir) -> dict:
    """Run the whole pipeline and write normalized.csv, pairs.csv, comparisons.csv, curves.csv."""
    from .harness import CurvePoint, write_curves

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = read_records(records_path)
    edges = read_edges(edges_path) if edges_path else []
    normalized = [normalize_metrics(r) for r in records]
    standardized = standardize_all(normalized)

    _write(out / "normalized.csv", NORMALIZED_COLUMNS, [
        [getattr(s.result.source, c) for c in RECORD_COLUMNS]
        + [s.result.compression_ratio, s.result.speedup, s.result.top1_acc, s.result.top5_acc,
           s.result.delta_top1, s.result.delta_top5, s.standard_size, s.standard_flops,
           s.absolute_size, s.absolute_flops, s.normalizable]
        for s in standardized
    ])
    frag = fragmentation_stats(records)
    _write(out / "pairs.csv", ("dataset", "architecture", "papers"), frag.pairs)
    comp = comparison_stats(edges, papers=[r.paper_id for r in records])
    _write(out / "comparisons.csv", ("paper_id", "compared_to_by", "compares_to"),
           [(p, comp.in_degree[p], comp.out_degree[p]) for p in comp.in_degree])

    points = []
    for n in sorted(normalized, key=lambda n: (n.source.dataset, n.source.architecture, n.source.paper_id, n.source.method, n.source.x_value)):
        y_metric, y = ("top1", n.top1_acc) if n.top1_acc is not None else ("delta_top1", n.delta_top1)
        if y is None:
            continue
        for x_metric, x in (("compression", n.compression_ratio), ("speedup", n.speedup)):
            if x is not None:
                points.append(CurvePoint(
                    f"{n.source.dataset}/{n.source.architecture}", f"{n.source.paper_id}:{n.source.method}", x,
                    x_metric, x, math.nan, y_metric, y, math.nan, 1,
                ))
    write_curves(out / "curves.csv", points)
    return {"records": len(records), "edges": len(edges), "pairs": len(frag.pairs), "curve_points": len(points)}
