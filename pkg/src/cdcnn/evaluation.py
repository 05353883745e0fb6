"""Metrics, ablation and sweep harness, calibration tables, reports."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .cnc import TrainConfig, UnlabeledPool, cotrain, finetune, pretrain, train_full
from .datagen import Dataset, GenConfig, Residents, gen_dataset, stratified_indices, _stream
from .model import ModelConfig, Network

VARIANTS = ("CD-CNN", "LN", "CN", "NoBal", "NoCo")
COLUMNS = ("variant", "seed", "days", "label_size", "precision", "recall", "f1", "wall_clock_s")
BIN_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def compute_metrics(predictions, labels, threshold: float = 0.5) -> Metrics:
    """Confusion-matrix metrics with migrant (1) as the positive class.

    Precision is 0 when nothing is predicted positive.
    """
    y = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(labels).ravel()
    if y.size == 0:
        raise ValueError("cannot compute metrics on an empty prediction set")
    if y.size != t.size:
        raise ValueError(f"{y.size} predictions for {t.size} labels")
    pred = y >= threshold
    truth = t == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(y.size - tp - fp - fn)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return Metrics(p, r, f1, tp, fp, tn, fn)


def majority_f1(labels) -> float:
    """Best F1 of a constant classifier, ``2p / (1 + p)``.

    All-negative scores 0, so the all-positive rule is the stronger
    constant. It is also the ceiling for any predictor that ignores the
    features: guessing positive with probability q gives 2pq / (p + q).
    """
    t = np.asarray(labels).ravel()
    if t.size == 0:
        raise ValueError("baseline needs labels")
    p = float(np.mean(t == 1))
    return 2 * p / (1 + p)


# ----------------------------------------------------------------------------
# calibration
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationTable:
    edges: tuple[float, ...]
    counts: tuple[int, ...]
    leavers: tuple[int, ...]

    @property
    def rates(self) -> tuple[float | None, ...]:
        return tuple(l / c if c else None for l, c in zip(self.leavers, self.counts))

    @property
    def total(self) -> int:
        return sum(self.counts)

    def merge(self, other: "CalibrationTable") -> "CalibrationTable":
        if self.edges != other.edges:
            raise ValueError("cannot merge tables with different bins")
        return CalibrationTable(self.edges, tuple(a + b for a, b in zip(self.counts, other.counts)),
                                tuple(a + b for a, b in zip(self.leavers, other.leavers)))

    def is_monotone(self) -> bool:
        """Leaving rates weakly increase across the non-empty bins."""
        rates = [r for r in self.rates if r is not None]
        return all(b >= a for a, b in zip(rates, rates[1:]))

    def to_dict(self) -> dict:
        return {"edges": list(self.edges), "counts": list(self.counts), "leavers": list(self.leavers)}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationTable":
        return cls(tuple(d["edges"]), tuple(d["counts"]), tuple(d["leavers"]))


def calibration_table(outputs, leaving, edges=BIN_EDGES) -> CalibrationTable:
    """Leaving rate per sigmoid-output bin; the last bin is closed at 1."""
    y = np.asarray(outputs, dtype=np.float64).ravel()
    leave = np.asarray(leaving, dtype=bool).ravel()
    if y.size == 0:
        raise ValueError("calibration needs a nonempty population")
    if y.size != leave.size:
        raise ValueError(f"{y.size} outputs for {leave.size} leaving flags")
    inner = np.asarray(edges[1:-1])
    idx = np.searchsorted(inner, y, side="right")
    k = len(edges) - 1
    counts = np.bincount(idx, minlength=k)
    leavers = np.bincount(idx, weights=leave.astype(np.float64), minlength=k)
    return CalibrationTable(tuple(float(e) for e in edges), tuple(int(c) for c in counts),
                            tuple(int(round(v)) for v in leavers))


def model_calibration(network: Network, params, residents: Residents, leaving) -> CalibrationTable:
    return calibration_table(network.predict(params, residents.R, residents.U), leaving)


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Record:
    variant: str
    seed: int
    days: int
    label_size: int
    precision: float
    recall: float
    f1: float
    wall_clock_s: float | None = None

    @classmethod
    def of(cls, variant, seed, days, label_size, m: Metrics, wall_clock_s=None) -> "Record":
        return cls(variant, int(seed), int(days), int(label_size), m.precision, m.recall, m.f1, wall_clock_s)


@dataclass
class AblationReport:
    records: list[Record] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    # per-seed CD-CNN calibration on the validation split
    calibration: dict[int, CalibrationTable] = field(default_factory=dict)

    def select(self, variant=None, days=None, label_size=None) -> list[Record]:
        return [r for r in self.records
                if (variant is None or r.variant == variant)
                and (days is None or r.days == days)
                and (label_size is None or r.label_size == label_size)]

    def mean_f1(self, variant, **where) -> float:
        values = [r.f1 for r in self.select(variant, **where)]
        if not values:
            raise KeyError(f"no records for {variant!r} {where}")
        return float(np.mean(values))

    def summary(self) -> dict[tuple, dict[str, float]]:
        """Mean and standard deviation per (variant, days, label_size)."""
        groups: dict[tuple, list[Record]] = {}
        for r in self.records:
            groups.setdefault((r.variant, r.days, r.label_size), []).append(r)
        out = {}
        for key, rs in groups.items():
            stats = {"n": len(rs)}
            for name in ("precision", "recall", "f1"):
                v = np.array([getattr(r, name) for r in rs])
                stats[f"{name}_mean"] = float(v.mean())
                stats[f"{name}_sd"] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
            out[key] = stats
        return out

    def pooled_calibration(self) -> CalibrationTable | None:
        tables = [self.calibration[s] for s in sorted(self.calibration)]
        if not tables:
            return None
        total = tables[0]
        for t in tables[1:]:
            total = total.merge(t)
        return total


def write_report(report: AblationReport, path, fmt: str = "csv") -> Path:
    """Deterministic CSV or JSON-lines dump; returns the path written."""
    path = Path(path)
    if fmt == "csv":
        text = _report_csv(report)
    elif fmt in ("json-lines", "jsonl"):
        text = _report_jsonl(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}; use csv or json-lines")
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror or exc}") from exc
    return path


def _meta(report: AblationReport) -> dict:
    meta = {}
    if report.config:
        meta["config"] = report.config
    if report.seeds:
        meta["seeds"] = list(report.seeds)
    if report.calibration:
        meta["calibration"] = {str(s): report.calibration[s].to_dict() for s in sorted(report.calibration)}
    return meta


def _report_csv(report: AblationReport) -> str:
    buf = io.StringIO()
    for key, value in _meta(report).items():
        buf.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in report.records:
        row = asdict(r)
        w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in COLUMNS])
    return buf.getvalue()


def _report_jsonl(report: AblationReport) -> str:
    lines = [json.dumps({"type": "meta", **_meta(report)}, sort_keys=True)]
    lines += [json.dumps({"type": "record", **asdict(r)}, sort_keys=True) for r in report.records]
    return "\n".join(lines) + "\n"


def read_report(path) -> AblationReport:
    """Parse a report written by :func:`write_report` (format from content)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read report {path}: {exc.strerror or exc}") from exc
    if text.startswith("{"):
        return _parse_jsonl(text)
    return _parse_csv(text, path)


def _apply_meta(report: AblationReport, meta: dict):
    report.config = meta.get("config", {})
    report.seeds = list(meta.get("seeds", []))
    report.calibration = {int(s): CalibrationTable.from_dict(t) for s, t in meta.get("calibration", {}).items()}


def _parse_csv(text: str, path) -> AblationReport:
    report = AblationReport()
    meta, body = {}, []
    for line in text.splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition(": ")
            meta[key] = json.loads(value)
        else:
            body.append(line)
    _apply_meta(report, meta)
    rows = list(csv.reader(body))
    if not rows or tuple(rows[0]) != COLUMNS:
        raise ValueError(f"{path}: header must be {','.join(COLUMNS)}")
    for row in rows[1:]:
        d = dict(zip(COLUMNS, row))
        report.records.append(Record(
            d["variant"], int(d["seed"]), int(d["days"]), int(d["label_size"]),
            float(d["precision"]), float(d["recall"]), float(d["f1"]),
            float(d["wall_clock_s"]) if d["wall_clock_s"] else None))
    return report


def _parse_jsonl(text: str) -> AblationReport:
    report = AblationReport()
    names = {f.name for f in fields(Record)}
    for line in text.splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        kind = entry.pop("type", "record")
        if kind == "meta":
            _apply_meta(report, entry)
        else:
            report.records.append(Record(**{k: v for k, v in entry.items() if k in names}))
    return report


# ----------------------------------------------------------------------------
# experiment cells
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Experiment:
    """Everything a cell needs; picklable so cells can run in workers."""

    gen: GenConfig
    model: ModelConfig
    train: TrainConfig
    timing: bool = False
    threshold: float = 0.5


def _dataset_for(exp: Experiment, seed: int, days: int | None = None, dataset: Dataset | None = None) -> Dataset:
    if dataset is not None:
        return dataset
    gen = replace(exp.gen, seed=int(seed), days=int(days) if days is not None else exp.gen.days)
    return gen_dataset(gen)


def _subsample(dataset: Dataset, size: int | None, seed: int) -> tuple[Residents, np.ndarray]:
    n = len(dataset.labeled)
    if size is None or size == n:
        return dataset.labeled, dataset.labels
    if size > n:
        raise ValueError(f"label size {size} exceeds the {n} labeled residents available")
    idx = stratified_indices(dataset.labels, size, _stream(seed, 7, size))
    return dataset.labeled.subset(idx), dataset.labels[idx]


class _Clock:
    def __init__(self, on: bool):
        self.on = on
        self.t = time.perf_counter()

    def lap(self) -> float | None:
        if not self.on:
            return None
        now = time.perf_counter()
        out, self.t = now - self.t, now
        return out


def _balanced_cell(exp: Experiment, seed: int, dataset: Dataset | None, variants,
                   label_size: int | None = None, days: int | None = None):
    ds = _dataset_for(exp, seed, days, dataset)
    labeled, labels = _subsample(ds, label_size, seed)
    tc = replace(exp.train, seed=int(seed))
    mc = exp.model
    yv = ds.truth("validation").label
    d, n = ds.config.days, len(labeled)
    clock = _Clock(exp.timing)
    records: list[Record] = []

    def score(kind, params):
        return compute_metrics(Network(mc, kind).predict(params, ds.validation.R, ds.validation.U), yv, exp.threshold)

    pre, _ = pretrain(labeled, labels, mc, tc)
    t_pre = clock.lap()
    if "LN" in variants:
        records.append(Record.of("LN", seed, d, n, score("ln", pre), t_pre))
    if "CN" in variants:
        records.append(Record.of("CN", seed, d, n, score("cn", pre), t_pre))
    if "NoCo" in variants:
        noco, _ = finetune(pre, labeled, labels, mc, tc)
        t = clock.lap()
        records.append(Record.of("NoCo", seed, d, n, score("cdcnn", noco), None if t is None else t + t_pre))
    calibration = None
    if "CD-CNN" in variants:
        clock.lap()
        params = pre
        if tc.max_rounds > 0 and len(ds.unlabeled):
            params, _ = cotrain(pre, UnlabeledPool(ds.unlabeled), mc, tc, class_prior=float(np.mean(labels == 1)))
        params, _ = finetune(params, labeled, labels, mc, tc)
        t = clock.lap()
        net = Network(mc, "cdcnn")
        records.append(Record.of("CD-CNN", seed, d, n, score("cdcnn", params), None if t is None else t + t_pre))
        calibration = model_calibration(net, params, ds.validation, ds.truth("validation").leaving)
    return records, calibration


def _nobal_cell(exp: Experiment, seed: int, dataset: Dataset | None,
                label_size: int | None = None, days: int | None = None):
    ds = _dataset_for(exp, seed, days, dataset)
    labeled, labels = _subsample(ds, label_size, seed)
    tc = replace(exp.train, seed=int(seed))
    clock = _Clock(exp.timing)
    params, _ = train_full(labeled, labels, ds.unlabeled, exp.model, tc, balanced=False)
    y = Network(exp.model, "cdcnn", balanced=False).predict(params, ds.validation.R, ds.validation.U)
    m = compute_metrics(y, ds.truth("validation").label, exp.threshold)
    return [Record.of("NoBal", seed, ds.config.days, len(labeled), m, clock.lap())], None


def _run_cell(cell):
    kind, args = cell
    if kind == "balanced":
        return _balanced_cell(*args)
    return _nobal_cell(*args)


def _execute(cells, jobs: int):
    """Run cells, returning results in cell order whatever ``jobs`` is."""
    if jobs <= 1 or len(cells) <= 1:
        return [_run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=min(jobs, len(cells))) as pool:
        return list(pool.map(_run_cell, cells))


def _order(records: list[Record]) -> list[Record]:
    rank = {v: i for i, v in enumerate(VARIANTS)}
    return sorted(records, key=lambda r: (-r.label_size, r.days, r.seed, rank.get(r.variant, len(rank))))


def _echo(exp: Experiment, **extra) -> dict:
    return {"gen": exp.gen.to_dict(), "model": asdict(exp.model), "train": asdict(exp.train), **extra}


def _check_seeds(seeds) -> list[int]:
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed is required")
    return seeds


def run_ablation(exp: Experiment, seeds, dataset: Dataset | None = None, jobs: int = 1,
                 variants=VARIANTS) -> AblationReport:
    """Five-way ablation. Each seed generates its own dataset (unless an
    explicit ``dataset`` is shared by all seeds); every variant of a seed is
    scored on that dataset's validation split."""
    seeds = _check_seeds(seeds)
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ValueError(f"unknown variants {sorted(unknown)}")
    shared = tuple(v for v in variants if v != "NoBal")
    cells = []
    for s in seeds:
        if shared:
            cells.append(("balanced", (exp, s, dataset, shared)))
        if "NoBal" in variants:
            cells.append(("nobal", (exp, s, dataset)))
    results = _execute(cells, jobs)
    report = AblationReport(config=_echo(exp, kind="ablation", variants=list(variants)), seeds=seeds)
    for (_, args), (records, calibration) in zip(cells, results):
        report.records.extend(records)
        if calibration is not None:
            report.calibration[args[1]] = calibration
    report.records = _order(report.records)
    return report


def sweep_labels(exp: Experiment, sizes, seeds, dataset: Dataset | None = None, jobs: int = 1) -> AblationReport:
    """CD-CNN and NoCo at each label size (descending), stratified subsets."""
    seeds = _check_seeds(seeds)
    sizes = [int(s) for s in sizes]
    if any(a < b for a, b in zip(sizes, sizes[1:])):
        raise ValueError("label sizes must be given in descending order")
    available = len(dataset.labeled) if dataset is not None else exp.gen.n_labeled
    for size in sizes:
        if size > available:
            raise ValueError(f"label size {size} exceeds the {available} labeled residents available")
        if size < 2:
            raise ValueError("label sizes must be >= 2")
    cells = [("balanced", (exp, s, dataset, ("CD-CNN", "NoCo"), size)) for size in sizes for s in seeds]
    report = AblationReport(config=_echo(exp, kind="sweep", axis="labels", points=sizes), seeds=seeds)
    for records, _ in _execute(cells, jobs):
        report.records.extend(records)
    report.records = _order(report.records)
    return report


def sweep_days(exp: Experiment, days_points, seeds, jobs: int = 1) -> AblationReport:
    """CD-CNN on datasets regenerated per collecting-days value."""
    seeds = _check_seeds(seeds)
    days_points = [int(d) for d in days_points]
    if any(d < 1 for d in days_points):
        raise ValueError("days must be >= 1")
    cells = [("balanced", (exp, s, None, ("CD-CNN",), None, d)) for d in days_points for s in seeds]
    report = AblationReport(config=_echo(exp, kind="sweep", axis="days", points=days_points), seeds=seeds)
    for records, _ in _execute(cells, jobs):
        report.records.extend(records)
    report.records = _order(report.records)
    return report


def spearman(x, y) -> float:
    """Rank correlation (average ranks for ties)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    rho = spearmanr(x, y).statistic
    return float(rho) if not math.isnan(rho) else 0.0
