"""Evaluation sweeps and report files.

A sweep perturbs a test set at ten levels per perturbation family, applies
each calibrator (plus the uncalibrated "Base" softmax) and records accuracy,
ECE, debiased ECE, NLL, Brier, entropy and mean confidence per level, plus a
pooled "micro" row per (calibrator, family).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .calibrators import DISPLAY_NAMES, FittedCalibrator, Identity, calibrator_to_dict, fit_calibrator
from .data import LabeledDataset, split_dataset
from .errors import ConfigError, InvalidInputError, ParseError
from .metrics import (
    DEFAULT_BINS,
    PredictionSet,
    bin_index,
    brier,
    debiased_ece,
    ece,
    nll,
    pool,
    predictive_entropy,
)
from .models import (
    BlobConfig,
    SoftmaxRegressionModel,
    generate_blobs,
    predict_logits,
    train_softmax_regression,
)
from .perturbations import (
    GEOMETRIC_KINDS,
    KINDS,
    NUM_LEVELS,
    LevelSchedule,
    builtin_schedule,
    perturb_dataset,
)
from .tuner import EpsilonSchedule, TunerConfig, calibrate_epsilons, tune_perturbed

CSV_COLUMNS = (
    "calibrator", "perturbation", "level", "param",
    "accuracy", "ece", "debiased_ece", "nll", "brier", "entropy", "mean_confidence",
)
METRICS = CSV_COLUMNS[4:]
BASE = "Base"
DECIMALS = 6


@dataclass(frozen=True)
class SweepSpec:
    schedules: tuple[LevelSchedule, ...]
    metrics: tuple[str, ...] = METRICS
    num_bins: int = DEFAULT_BINS
    seed: int = 0
    in_family: tuple[str, ...] = ("gaussian",)

    def __post_init__(self) -> None:
        if not self.schedules:
            raise ConfigError("a sweep needs at least one perturbation schedule")
        if not self.metrics:
            raise ConfigError("a sweep needs at least one metric")
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ConfigError(f"unknown metrics {sorted(unknown)}; choose from {list(METRICS)}")
        if self.num_bins < 1:
            raise ConfigError("num_bins must be >= 1")

    def to_dict(self) -> dict:
        return {
            "schedules": [{"kind": s.kind, "params": list(s.params)} for s in self.schedules],
            "metrics": list(self.metrics),
            "num_bins": self.num_bins,
            "seed": self.seed,
            "in_family": list(self.in_family),
        }


@dataclass(frozen=True)
class ReportRow:
    calibrator: str
    perturbation: str
    level: int | str  # "micro" for the pooled row
    param: float | None
    accuracy: float | None = None
    ece: float | None = None
    debiased_ece: float | None = None
    nll: float | None = None
    brier: float | None = None
    entropy: float | None = None
    mean_confidence: float | None = None


@dataclass
class EvaluationReport:
    rows: list[ReportRow]
    metadata: dict = field(default_factory=dict)

    def select(self, calibrator: str | None = None, perturbation: str | None = None,
               level: int | str | None = None) -> list[ReportRow]:
        return [
            r for r in self.rows
            if (calibrator is None or r.calibrator == calibrator)
            and (perturbation is None or r.perturbation == perturbation)
            and (level is None or r.level == level)
        ]

    def micro_ece(self, calibrator: str, perturbation: str) -> float:
        (row,) = self.select(calibrator, perturbation, "micro")
        return row.ece

    def mean_micro(self, calibrator: str, metric: str = "ece") -> float:
        rows = self.select(calibrator, level="micro")
        return float(np.mean([getattr(r, metric) for r in rows]))

    @property
    def calibrators(self) -> list[str]:
        return list(dict.fromkeys(r.calibrator for r in self.rows))

    @property
    def perturbations(self) -> list[str]:
        return list(dict.fromkeys(r.perturbation for r in self.rows))

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        try:
            rows = [ReportRow(**r) for r in d["rows"]]
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed report: {exc}") from None
        return cls(rows, dict(d.get("metadata", {})))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        for r in self.rows:
            out = [r.calibrator, r.perturbation, r.level, "" if r.param is None else _fmt(r.param)]
            out += ["" if getattr(r, m) is None else _fmt(getattr(r, m)) for m in METRICS]
            wr.writerow(out)
        return buf.getvalue()


def _fmt(x: float) -> str:
    return f"{x:.{DECIMALS}f}"


def _round(x: float | None) -> float | None:
    if x is None:
        return None
    return round(float(x), DECIMALS) + 0.0  # + 0.0 turns -0.0 into 0.0


def _metric_values(preds: PredictionSet, metrics: Sequence[str], num_bins: int) -> dict:
    funcs = {
        "accuracy": lambda: preds.accuracy,
        "ece": lambda: ece(preds, num_bins),
        "debiased_ece": lambda: debiased_ece(preds, num_bins),
        "nll": lambda: nll(preds.probs, preds.labels),
        "brier": lambda: brier(preds.probs, preds.labels),
        "entropy": lambda: predictive_entropy(preds.probs),
        "mean_confidence": lambda: float(preds.confidences.mean()),
    }
    return {m: _round(funcs[m]()) for m in metrics}


def _config_hash(spec: SweepSpec, calibrators: Mapping[str, FittedCalibrator]) -> str:
    doc = {
        "spec": spec.to_dict(),
        "calibrators": {k: calibrator_to_dict(v) for k, v in calibrators.items()},
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def run_sweep(
    model: SoftmaxRegressionModel,
    calibrators: Mapping[str, FittedCalibrator],
    testset: LabeledDataset,
    spec: SweepSpec,
) -> EvaluationReport:
    """Evaluate every calibrator at every level of every schedule.

    The uncalibrated softmax is always included as ``"Base"`` (first).
    Stochastic perturbations draw noise from ``(spec.seed, family, level)``.
    """
    cals: dict[str, FittedCalibrator] = {BASE: Identity()}
    for name, cal in calibrators.items():
        if name == BASE:
            continue
        cals[name] = cal
    per_cal: dict[tuple[str, str], list[PredictionSet]] = {}
    for sched in spec.schedules:
        fam = KINDS.index(sched.kind)
        for level, param in enumerate(sched.params):
            perturbed = perturb_dataset(testset, sched.kind, param, seed=(spec.seed, fam, level))
            logits = predict_logits(model, perturbed)
            for name, cal in cals.items():
                probs = cal.apply(logits.logits)
                per_cal.setdefault((name, sched.kind), []).append(
                    PredictionSet.from_probs(probs, logits.labels)
                )
    rows = []
    for name in cals:
        for sched in spec.schedules:
            levels = per_cal[(name, sched.kind)]
            for level, (param, preds) in enumerate(zip(sched.params, levels)):
                vals = _metric_values(preds, spec.metrics, spec.num_bins)
                rows.append(ReportRow(name, sched.kind, level, _round(param), **vals))
            vals = _metric_values(pool(levels), spec.metrics, spec.num_bins)
            rows.append(ReportRow(name, sched.kind, "micro", None, **vals))
    metadata = {
        "seed": spec.seed,
        "num_bins": spec.num_bins,
        "num_test_samples": len(testset),
        "entropy_unit": "nat",
        "debiased_ece": "variance-corrected l2 estimator, equal-width bins",
        "brier": "multiclass sum of squares",
        "in_family": [s.kind for s in spec.schedules if s.kind in spec.in_family],
        "schedules": spec.to_dict()["schedules"],
        "config_hash": _config_hash(spec, cals),
    }
    return EvaluationReport(rows, metadata)


def gaussian_levels(schedule: EpsilonSchedule, scale: float = 1.0) -> tuple[float, ...]:
    """Ten test levels from a tuned variance schedule: ascending, level 0 = no noise."""
    eps = np.sort(np.asarray(schedule.epsilons, dtype=np.float64))
    if eps.size != NUM_LEVELS:
        eps = np.interp(np.linspace(0, eps.size - 1, NUM_LEVELS), np.arange(eps.size), eps)
    eps[0] = 0.0
    return tuple(float(v) * scale for v in eps)


def default_schedules(
    testset: LabeledDataset,
    schedule: EpsilonSchedule | None = None,
    kinds: Sequence[str] | None = None,
    speckle_scale: float = 4.0,
) -> tuple[LevelSchedule, ...]:
    """Gaussian levels from the tuned schedule, speckle at ``speckle_scale`` times
    those variances, and every builtin affine schedule the grid shape admits."""
    h, w, _ = testset.grid_shape
    out = []
    if schedule is not None:
        g = gaussian_levels(schedule)
        out.append(LevelSchedule("gaussian", g))
        out.append(LevelSchedule("speckle", tuple(v * speckle_scale for v in g)))
    if h >= 2 and w >= 2:
        out.extend(builtin_schedule(k) for k in GEOMETRIC_KINDS)
    if kinds is not None:
        out = [s for s in out if s.kind in kinds]
        missing = [k for k in kinds if k not in {s.kind for s in out}]
        if missing:
            raise ConfigError(
                f"no schedule for {missing} on a {h}x{w} grid"
                + ("" if schedule is not None else " without a tuned epsilon schedule")
            )
    if not out:
        raise ConfigError("no perturbation schedule applies to this test set")
    return tuple(out)


def confidence_histogram(
    model: SoftmaxRegressionModel,
    calibrator: FittedCalibrator | None,
    dataset: LabeledDataset,
    bins: int = 10,
) -> np.ndarray:
    """Counts of max-confidence values in ``bins`` equal-width buckets over [0, 1]."""
    logits = predict_logits(model, dataset).logits
    probs = (calibrator or Identity()).apply(logits)
    idx = bin_index(probs.max(axis=1), bins)
    return np.bincount(idx, minlength=bins)


def subsample_indices(n: int, size: int, seed: int) -> np.ndarray:
    """First ``size`` entries of one seeded permutation (so smaller sets nest in larger ones)."""
    if size > n:
        raise InvalidInputError(f"requested {size} samples from a set of {n}")
    if size < 1:
        raise InvalidInputError("sizes must be >= 1")
    if size == n:
        return np.arange(n)
    return np.sort(np.random.default_rng([seed, 104729]).permutation(n)[:size])


@dataclass(frozen=True)
class ValsizeRow:
    size: int
    calibrator: str
    mean_micro_ece: float
    mean_accuracy: float


def tune_both(
    kinds: Sequence[str],
    model: SoftmaxRegressionModel,
    val: LabeledDataset,
    tuner: TunerConfig | None = None,
    num_bins: int = DEFAULT_BINS,
) -> tuple[dict[str, FittedCalibrator], EpsilonSchedule]:
    """Standard and "-P" variants of each calibrator kind, keyed by display name."""
    logits = predict_logits(model, val)
    cals = {DISPLAY_NAMES[k]: fit_calibrator(k, logits, num_bins) for k in kinds}
    p_cals, schedule = tune_perturbed(kinds, model, val, tuner, num_bins)
    cals.update({DISPLAY_NAMES[k] + "-P": c for k, c in p_cals.items()})
    return cals, schedule


def valsize_sweep(
    model: SoftmaxRegressionModel,
    val: LabeledDataset,
    testset: LabeledDataset,
    sizes: Sequence[int],
    kinds: Sequence[str],
    spec: SweepSpec | None = None,
    tuner: TunerConfig | None = None,
) -> list[ValsizeRow]:
    """Tune on nested validation subsets of each size and summarize the test sweep.

    When ``spec`` is None the test schedules come from the full-set tuned
    Gaussian levels (plus speckle), so every size is scored on the same
    perturbations.
    """
    tuner = tuner or TunerConfig()
    for s in sizes:
        if s > len(val):
            raise InvalidInputError(f"validation size {s} exceeds the {len(val)} available samples")
    if spec is None:
        spec = SweepSpec(default_schedules(testset, calibrate_epsilons(model, val, tuner), ("gaussian", "speckle")))
    rows = []
    for size in sizes:
        sub = val.subset(subsample_indices(len(val), size, spec.seed))
        cals, _ = tune_both(kinds, model, sub, tuner, spec.num_bins)
        report = run_sweep(model, cals, testset, spec)
        for name in report.calibrators:
            rows.append(ValsizeRow(
                size, name,
                _round(report.mean_micro(name, "ece")),
                _round(report.mean_micro(name, "accuracy")),
            ))
    return rows


def valsize_to_csv(rows: Sequence[ValsizeRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["size", "calibrator", "mean_micro_ece", "mean_accuracy"])
    for r in rows:
        wr.writerow([r.size, r.calibrator, _fmt(r.mean_micro_ece), _fmt(r.mean_accuracy)])
    return buf.getvalue()


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_report(report: EvaluationReport, format: str, path: str | Path) -> None:
    if format == "csv":
        text = report.to_csv()
    elif format == "json":
        text = json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n"
    else:
        raise ConfigError(f"unknown report format {format!r}")
    _atomic_write(Path(path), text)


def load_report(path: str | Path) -> EvaluationReport:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        try:
            return EvaluationReport.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None
    return _report_from_csv(path, text)


def _report_from_csv(path: Path, text: str) -> EvaluationReport:
    rd = csv.reader(io.StringIO(text))
    header = next(rd, None)
    if header is None or tuple(header) != CSV_COLUMNS:
        raise ParseError(f"{path}: unexpected report header")
    rows = []
    for lineno, rec in enumerate(rd, start=2):
        if len(rec) != len(CSV_COLUMNS):
            raise ParseError(f"{path}: line {lineno}: expected {len(CSV_COLUMNS)} fields")
        try:
            level: int | str = rec[2] if rec[2] == "micro" else int(rec[2])
            param = float(rec[3]) if rec[3] else None
            vals = {m: (float(v) if v else None) for m, v in zip(METRICS, rec[4:])}
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from None
        rows.append(ReportRow(rec[0], rec[1], level, param, **vals))
    return EvaluationReport(rows)


def summary_table(report: EvaluationReport, metric: str = "ece") -> str:
    """Plain-text table of micro-averaged ``metric``: one row per family, one column per calibrator."""
    cals = report.calibrators
    fams = report.perturbations
    width = max(12, *(len(c) + 2 for c in cals))
    lines = ["perturbation".ljust(14) + "".join(c.rjust(width) for c in cals)]
    for fam in fams:
        cells = []
        for c in cals:
            (row,) = report.select(c, fam, "micro")
            v = getattr(row, metric)
            cells.append(("-" if v is None or math.isnan(v) else f"{v:.4f}").rjust(width))
        lines.append(fam.ljust(14) + "".join(cells))
    means = [report.mean_micro(c, metric) for c in cals]
    lines.append("mean".ljust(14) + "".join(f"{m:.4f}".rjust(width) for m in means))
    return "\n".join(lines)


@dataclass(frozen=True, eq=False)
class BlobTask:
    model: SoftmaxRegressionModel
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset


def make_blob_task(
    seed: int = 0,
    num_classes: int = 10,
    input_dim: int = 20,
    per_class: int = 500,
    stddev: float = 1.25,
    splits: Sequence[float] = (0.4, 0.3, 0.3),
    train_size: int | None = None,
    epochs: int = 2000,
    learning_rate: float = 5.0,
    l2: float = 1e-4,
) -> BlobTask:
    """Desk-scale stand-in for an image benchmark: blobs, a train/val/test split
    and a softmax-regression model trained on (optionally the first
    ``train_size`` samples of) the training split."""
    d = generate_blobs(BlobConfig(num_classes, input_dim, per_class, 1.0, stddev, seed))
    train, val, test = split_dataset(d, splits, seed)
    if train_size is not None:
        train = train.subset(np.arange(min(train_size, len(train))))
    model = train_softmax_regression(train, epochs, learning_rate, l2, seed)
    return BlobTask(model, train, val, test)
