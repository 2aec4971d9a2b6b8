"""Command-line interface.

Options can also come from a ``key = value`` config file (``--config``);
explicit flags win over the file, and ``DRIFT_CALIB_SEED`` overrides the
file's seed.  Exit codes: 0 success, 2 config error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable

from . import calibrators as cal_mod
from .data import LabeledDataset, LogitSet, load_dataset, load_logits, split_dataset, write_dataset
from .errors import ConfigError, DriftCalError, NumericalError, ParseError
from .harness import (
    SweepSpec,
    confidence_histogram,
    default_schedules,
    emit_report,
    load_report,
    run_sweep,
    summary_table,
    valsize_sweep,
    valsize_to_csv,
    _atomic_write,
)
from .models import (
    BlobConfig,
    accuracy,
    generate_blobs,
    load_model,
    predict_logits,
    save_model,
    train_softmax_regression,
)
from .perturbations import LevelSchedule, Perturbation, perturb_dataset
from .tuner import EpsilonSchedule, TunerConfig, calibrate_epsilons, tune_perturbed

log = logging.getLogger("driftcal")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "DRIFT_CALIB_SEED"


def read_config(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


class _Options:
    """Registers flags with a ``None`` default so explicit use can be detected."""

    def __init__(self, parser: argparse.ArgumentParser):
        self.parser = parser
        self.defaults: dict[str, tuple[Any, Callable | None]] = {}

    def add(self, flag: str, default: Any = None, type: Callable | None = str, help: str = "", **kw) -> None:
        dest = flag.lstrip("-").replace("-", "_")
        self.defaults[dest] = (default, type)
        extra = f" (default: {default})" if default is not None else ""
        self.parser.add_argument(flag, dest=dest, default=None, type=type, help=help + extra, **kw)


def _resolve(args: argparse.Namespace, defaults: dict, config: dict[str, str]) -> argparse.Namespace:
    out = argparse.Namespace(**vars(args))
    for dest, (default, typ) in defaults.items():
        if getattr(args, dest, None) is not None:
            continue
        value: Any = default
        if dest in config:
            try:
                value = typ(config[dest]) if typ else config[dest]
            except (TypeError, ValueError):
                raise ConfigError(f"config value for {dest!r} is invalid: {config[dest]!r}") from None
        if dest == "seed" and os.environ.get(SEED_ENV):
            try:
                value = int(os.environ[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer") from None
        setattr(out, dest, value)
    unknown = set(config) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys for this command: {sorted(unknown)}")
    return out


def _require(ns: argparse.Namespace, *names: str) -> None:
    missing = [n for n in names if getattr(ns, n, None) in (None, "")]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _fmt_from_path(path: str, explicit: str | None) -> str:
    if explicit:
        return explicit
    return "raw" if path.endswith((".bin", ".raw", ".dcal")) else "csv"


def _load_data(path: str, fmt: str | None, num_classes: int | None = None) -> LabeledDataset:
    return load_dataset(path, _fmt_from_path(path, fmt), num_classes)


def _tuner_config(ns: argparse.Namespace) -> TunerConfig:
    return TunerConfig(
        num_levels=ns.levels,
        eps_init=ns.eps_init,
        nm_max_iters=ns.nm_max_iters,
        nm_tolerance=ns.nm_tolerance,
        eval_seed=ns.seed,
        perturb_seed=ns.seed + 1,
        subsample_fraction=ns.subsample_fraction,
    )


def _add_tuner_options(o: _Options) -> None:
    o.add("--levels", 10, int, "number of accuracy targets / noise levels")
    o.add("--eps-init", 1.0, float, "initial noise variance for the hardest target")
    o.add("--nm-max-iters", 60, int, "Nelder-Mead iteration cap per target")
    o.add("--nm-tolerance", 0.005, float, "accepted |accuracy - target|")
    o.add("--subsample-fraction", 1.0, float, "fraction of the validation set kept per level")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(ns: argparse.Namespace) -> None:
    _require(ns, "out")
    grid = tuple(int(v) for v in ns.grid.lower().split("x")) if ns.grid else None
    cfg = BlobConfig(ns.classes, ns.dim, ns.per_class, ns.center_scale, ns.stddev, ns.seed, grid)
    d = generate_blobs(cfg)
    fmt = _fmt_from_path(ns.out, ns.format)
    if ns.split:
        fracs = [float(v) for v in _csv_list(ns.split)]
        names = ["train", "val", "test"][: len(fracs)] if len(fracs) <= 3 else [f"part{i}" for i in range(len(fracs))]
        out = Path(ns.out)
        for name, part in zip(names, split_dataset(d, fracs, ns.seed)):
            target = out.with_name(f"{out.stem}.{name}{out.suffix}")
            write_dataset(part, target, fmt)
            print(f"wrote {len(part)} samples to {target}")
    else:
        write_dataset(d, ns.out, fmt)
        print(f"wrote {len(d)} samples to {ns.out}")


def cmd_train(ns: argparse.Namespace) -> None:
    _require(ns, "data", "out")
    d = _load_data(ns.data, ns.format)
    model = train_softmax_regression(d, ns.epochs, ns.lr, ns.l2, ns.seed)
    save_model(model, ns.out)
    print(f"training accuracy {accuracy(model, d):.4f}; model written to {ns.out}")


def _val_logits(ns: argparse.Namespace) -> LogitSet:
    if ns.logits:
        return load_logits(ns.logits)
    _require(ns, "model", "val")
    model = load_model(ns.model)
    return predict_logits(model, _load_data(ns.val, ns.format, model.num_classes))


def cmd_tune(ns: argparse.Namespace) -> None:
    _require(ns, "kind", "out")
    logits = _val_logits(ns)
    cal = cal_mod.fit_calibrator(ns.kind, logits, ns.bins)
    cal_mod.save_calibrator(cal, ns.out)
    rep = getattr(cal, "report", None)
    extra = f" (objective {rep.objective:.6f}, converged={rep.converged})" if rep else ""
    print(f"fitted {ns.kind} on {len(logits)} validation records{extra}; wrote {ns.out}")


def cmd_tune_p(ns: argparse.Namespace) -> None:
    _require(ns, "model", "val", "kind", "out")
    model = load_model(ns.model)
    val = _load_data(ns.val, ns.format, model.num_classes)
    schedule = EpsilonSchedule.load(ns.schedule) if ns.schedule else None
    cals, schedule = tune_perturbed([ns.kind], model, val, _tuner_config(ns), ns.bins, schedule)
    cal_mod.save_calibrator(cals[ns.kind], ns.out)
    if ns.schedule_out:
        schedule.save(ns.schedule_out)
    for t, e, a in zip(schedule.targets, schedule.epsilons, schedule.achieved):
        print(f"target {t:.4f}  eps {e:.6g}  achieved {a:.4f}")
    for w in schedule.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {ns.kind}-P calibrator to {ns.out}")


def _parse_levels(items: list[str]) -> list[LevelSchedule]:
    out = []
    for item in items:
        kind, sep, params = item.partition(":")
        if not sep:
            raise ConfigError(f"--level-spec {item!r} must look like kind:p0,p1,...,p9")
        try:
            out.append(LevelSchedule(kind.strip(), tuple(float(v) for v in _csv_list(params))))
        except ValueError:
            raise ConfigError(f"bad level parameters in {item!r}") from None
    return out


def _load_cals(items: list[str]) -> dict[str, Any]:
    cals = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--cal {item!r} must look like NAME=path.json")
        cals[name] = cal_mod.load_calibrator(path)
    return cals


def _sweep_spec(ns: argparse.Namespace, test: LabeledDataset, schedule: EpsilonSchedule | None) -> SweepSpec:
    kinds = _csv_list(ns.perturbations) if ns.perturbations else None
    custom = _parse_levels(ns.level_spec or [])
    custom_kinds = {s.kind for s in custom}
    scheds: list[LevelSchedule] = []
    if kinds is None or set(kinds) - custom_kinds:
        wanted = None if kinds is None else [k for k in kinds if k not in custom_kinds]
        try:
            scheds = list(default_schedules(test, schedule, wanted))
        except ConfigError:
            if not custom:
                raise
    scheds = [s for s in scheds if s.kind not in custom_kinds] + custom
    return SweepSpec(tuple(scheds), num_bins=ns.bins, seed=ns.seed)


def _report_format(path: str, explicit: str | None) -> str:
    return explicit or ("json" if path.endswith(".json") else "csv")


def cmd_sweep(ns: argparse.Namespace) -> None:
    _require(ns, "model", "test", "out")
    model = load_model(ns.model)
    test = _load_data(ns.test, ns.format, model.num_classes)
    schedule = EpsilonSchedule.load(ns.schedule) if ns.schedule else None
    spec = _sweep_spec(ns, test, schedule)
    report = run_sweep(model, _load_cals(ns.cal or []), test, spec)
    emit_report(report, _report_format(ns.out, ns.report_format), ns.out)
    print(summary_table(report))
    print(f"wrote {len(report.rows)} rows to {ns.out}")


def cmd_valsize_sweep(ns: argparse.Namespace) -> None:
    _require(ns, "model", "val", "test", "sizes", "kinds", "out")
    model = load_model(ns.model)
    val = _load_data(ns.val, ns.format, model.num_classes)
    test = _load_data(ns.test, ns.format, model.num_classes)
    tuner = _tuner_config(ns)
    schedule = EpsilonSchedule.load(ns.schedule) if ns.schedule else calibrate_epsilons(model, val, tuner)
    ns.perturbations = ns.perturbations or "gaussian,speckle"
    spec = _sweep_spec(ns, test, schedule)
    rows = valsize_sweep(model, val, test, [int(s) for s in _csv_list(ns.sizes)], _csv_list(ns.kinds), spec, tuner)
    text = valsize_to_csv(rows)
    _atomic_write(Path(ns.out), text)
    print(text, end="")


def cmd_confidence_hist(ns: argparse.Namespace) -> None:
    _require(ns, "model", "data")
    model = load_model(ns.model)
    d = _load_data(ns.data, ns.format, model.num_classes)
    if ns.perturb:
        p = Perturbation.parse(ns.perturb)
        d = perturb_dataset(d, p.kind, p.param, seed=ns.seed)
    cal = cal_mod.load_calibrator(ns.cal) if ns.cal else None
    counts = confidence_histogram(model, cal, d, ns.bins)
    lines = ["bucket_lo,bucket_hi,count"]
    for i, c in enumerate(counts):
        lines.append(f"{i / ns.bins:.6f},{(i + 1) / ns.bins:.6f},{int(c)}")
    text = "\n".join(lines) + "\n"
    if ns.out:
        _atomic_write(Path(ns.out), text)
    print(text, end="")


def cmd_report(ns: argparse.Namespace) -> None:
    _require(ns, "input")
    report = load_report(ns.input)
    fmt = ns.report_format or "table"
    if fmt == "table":
        text = summary_table(report, ns.metric) + "\n"
        if ns.out:
            _atomic_write(Path(ns.out), text)
        print(text, end="")
    else:
        _require(ns, "out")
        emit_report(report, fmt, ns.out)
        print(f"wrote {ns.out}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, dict]]:
    parser = argparse.ArgumentParser(
        prog="driftcal",
        description="Post-hoc calibration tuned on perturbed validation sets.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    defaults: dict[str, dict] = {}

    def command(name: str, func: Callable, help: str) -> _Options:
        p = sub.add_parser(name, help=help, description=help)
        p.set_defaults(func=func)
        p.add_argument("--config", help="key = value config file")
        o = _Options(p)
        o.add("--seed", 0, int, "random seed")
        defaults[name] = o.defaults
        return o

    o = command("gen-data", cmd_gen_data, "generate a seeded Gaussian-blob dataset")
    o.add("--classes", 10, int)
    o.add("--dim", 20, int, "feature dimension D")
    o.add("--per-class", 500, int, "samples per class")
    o.add("--center-scale", 1.0, float, "stddev of class centres")
    o.add("--stddev", 1.25, float, "within-class stddev")
    o.add("--grid", None, str, "HxWxK layout of the D features, e.g. 4x5x1")
    o.add("--split", None, str, "comma-separated fractions, e.g. 0.4,0.3,0.3 -> .train/.val/.test files")
    o.add("--format", None, str, "csv or raw (default: from extension)")
    o.add("--out", None, str, "output path")

    o = command("train", cmd_train, "train a softmax-regression model")
    o.add("--data", None, str, "training dataset")
    o.add("--format", None, str, "csv or raw")
    o.add("--epochs", 2000, int)
    o.add("--lr", 5.0, float, "learning rate")
    o.add("--l2", 1e-4, float, "weight decay on W")
    o.add("--out", None, str, "model JSON path")

    for name, func, help in (
        ("tune", cmd_tune, "fit a calibrator on the plain validation set"),
        ("tune-p", cmd_tune_p, "fit a calibrator on the perturbed validation set"),
    ):
        o = command(name, func, help)
        o.add("--model", None, str, "model JSON")
        o.add("--val", None, str, "validation dataset")
        o.add("--format", None, str, "csv or raw")
        o.add("--kind", None, str, "calibrator: " + ", ".join(cal_mod.FITTERS))
        o.add("--bins", 15, int, "bins for hb/pbmc")
        o.add("--out", None, str, "calibrator JSON path")
        if name == "tune":
            o.add("--logits", None, str, "logit CSV to fit on instead of --model/--val")
        else:
            _add_tuner_options(o)
            o.add("--schedule", None, str, "reuse an epsilon schedule JSON")
            o.add("--schedule-out", None, str, "write the tuned epsilon schedule JSON")

    for name, func, help in (
        ("sweep", cmd_sweep, "evaluate calibrators over perturbation levels"),
        ("valsize-sweep", cmd_valsize_sweep, "repeat tuning on validation subsets of several sizes"),
    ):
        o = command(name, func, help)
        o.add("--model", None, str, "model JSON")
        o.add("--test", None, str, "test dataset")
        o.add("--format", None, str, "csv or raw")
        o.add("--schedule", None, str, "epsilon schedule JSON (provides the gaussian/speckle levels)")
        o.add("--perturbations", None, str, "comma-separated families (default: all applicable)")
        o.add("--bins", 15, int, "ECE bins")
        o.add("--out", None, str, "output path")
        o.parser.add_argument("--level-spec", action="append", metavar="KIND:P0,...,P9",
                              help="explicit ten-level schedule; repeatable")
        if name == "sweep":
            o.parser.add_argument("--cal", action="append", metavar="NAME=PATH",
                                  help="calibrator JSON to evaluate; repeatable")
            o.add("--report-format", None, str, "csv or json (default: from extension)")
        else:
            o.add("--val", None, str, "validation dataset")
            o.add("--sizes", None, str, "comma-separated validation sizes")
            o.add("--kinds", "ts,ir", str, "comma-separated calibrator kinds")
            _add_tuner_options(o)

    o = command("confidence-hist", cmd_confidence_hist, "histogram of max confidences")
    o.add("--model", None, str, "model JSON")
    o.add("--data", None, str, "dataset")
    o.add("--format", None, str, "csv or raw")
    o.add("--cal", None, str, "calibrator JSON (default: uncalibrated)")
    o.add("--perturb", None, str, "optional kind:param applied first, e.g. gaussian:0.04")
    o.add("--bins", 10, int)
    o.add("--out", None, str, "optional CSV output")

    o = command("report", cmd_report, "summarize or convert a sweep report")
    o.add("--input", None, str, "report CSV or JSON")
    o.add("--report-format", None, str, "table, csv or json (default: table)")
    o.add("--metric", "ece", str, "metric for the summary table")
    o.add("--out", None, str, "output path")

    return parser, defaults


def main(argv: list[str] | None = None) -> int:
    parser, defaults = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = read_config(args.config) if args.config else {}
        ns = _resolve(args, defaults[args.command], config)
        args.func(ns)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, DriftCalError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
