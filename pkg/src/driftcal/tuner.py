"""Perturbed-validation-set tuning.

Noise variances are searched so that model accuracy falls on evenly spaced
targets between chance (``1/C``) and the clean validation accuracy.  The
validation set is then perturbed at every tuned level, and a calibrator is
fitted on the union of the perturbed copies.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .calibrators import FittedCalibrator, fit_calibrator
from .data import LabeledDataset, concat_datasets
from .errors import ConfigError, InvalidInputError, NumericalError, ParseError
from .metrics import DEFAULT_BINS
from .models import SoftmaxRegressionModel, accuracy, predict_logits
from .perturbations import perturb_dataset, standard_normal_field

log = logging.getLogger(__name__)

# reflection, expansion, contraction, shrink
NM_COEFFS = (1.0, 2.0, 0.5, 0.5)
MIN_STEP = 0.00025


@dataclass(frozen=True)
class TunerConfig:
    num_levels: int = 10
    eps_init: float = 1.0
    nm_max_iters: int = 60
    nm_tolerance: float = 0.005
    nm_initial_step: float = 0.5
    nm_restarts: int = 4
    eval_seed: int = 0
    perturb_seed: int = 1
    subsample_fraction: float = 1.0

    def __post_init__(self) -> None:
        if self.num_levels < 2:
            raise ConfigError("num_levels must be >= 2")
        if not self.eps_init > 0:
            raise ConfigError("eps_init must be > 0")
        if self.nm_restarts < 0:
            raise ConfigError("nm_restarts must be >= 0")
        if self.nm_max_iters < 1 or not self.nm_tolerance > 0 or not self.nm_initial_step > 0:
            raise ConfigError("Nelder-Mead iteration cap, tolerance and step must be positive")
        if not 0 < self.subsample_fraction <= 1:
            raise ConfigError("subsample_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class EpsilonSchedule:
    """Tuned noise variances; ``epsilons[i]`` targets accuracy ``targets[i]``."""

    targets: tuple[float, ...]
    epsilons: tuple[float, ...]
    achieved: tuple[float, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        if not (len(self.targets) == len(self.epsilons) == len(self.achieved)):
            raise InvalidInputError("targets, epsilons and achieved must align")
        if any(e < 0 for e in self.epsilons):
            raise InvalidInputError("epsilons must be >= 0")

    @property
    def N(self) -> int:
        return len(self.targets)

    def to_dict(self) -> dict:
        return {
            "targets": list(self.targets),
            "epsilons": list(self.epsilons),
            "achieved": list(self.achieved),
            "N": self.N,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpsilonSchedule":
        try:
            sched = cls(
                tuple(float(v) for v in d["targets"]),
                tuple(float(v) for v in d["epsilons"]),
                tuple(float(v) for v in d["achieved"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed epsilon schedule: {exc}") from None
        if int(d.get("N", sched.N)) != sched.N:
            raise ParseError("epsilon schedule N does not match its lists")
        return sched

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "EpsilonSchedule":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None


def accuracy_targets(num_classes: int, acc_max: float, n: int = 10) -> list[float]:
    """``n`` evenly spaced accuracies from chance ``1/C`` up to ``acc_max``."""
    if n < 2:
        raise ConfigError("need at least two accuracy levels")
    acc_min = 1.0 / num_classes
    if not acc_max > acc_min:
        raise InvalidInputError(
            f"model accuracy {acc_max:.4f} is not above chance {acc_min:.4f}; nothing to tune"
        )
    step = (acc_max - acc_min) / (n - 1)
    out = [acc_min + i * step for i in range(n)]
    out[-1] = acc_max
    return out


@dataclass(frozen=True)
class NelderMeadResult:
    x: float
    fun: float
    iterations: int
    converged: bool


def nelder_mead_1d(
    objective: Callable[[float], float],
    x0: float,
    max_iters: int = 200,
    xtol: float = 1e-8,
    ftol: float | None = None,
    initial_step: float = 0.05,
) -> NelderMeadResult:
    """Two-vertex Nelder-Mead restricted to ``x >= 0``.

    Negative candidates are reflected to ``|x|``.  Stops when the simplex is
    narrower than ``xtol``, when the best value drops to ``ftol`` or below,
    or after ``max_iters`` iterations.
    """
    alpha, gamma, rho, sigma = NM_COEFFS
    last_good = abs(float(x0))

    def f(x: float) -> float:
        nonlocal last_good
        v = float(objective(x))
        if not math.isfinite(v):
            raise NumericalError(f"objective is not finite at x={x!r} (last valid iterate {last_good!r})")
        last_good = x
        return v

    xb = abs(float(x0))
    # relative first step, floored so that a start at or near 0 can still move
    xw = xb + max(xb * initial_step, MIN_STEP)
    fb, fw = f(xb), f(xw)
    it = 0
    converged = False
    while it < max_iters:
        if fw < fb:
            xb, xw, fb, fw = xw, xb, fw, fb
        if abs(xw - xb) < xtol or (ftol is not None and fb <= ftol):
            converged = True
            break
        it += 1
        # moves are computed from the unreflected point so that a candidate
        # folded back onto xb does not collapse the simplex away from x = 0
        xr_raw = xb + alpha * (xb - xw)
        xr = abs(xr_raw)
        if abs(xr - xb) <= 1e-9 * max(1.0, xb):
            # the fold landed on xb itself; contract toward the boundary instead
            xc = abs(xb + rho * (xr_raw - xb))
            fc = f(xc)
            if fc < fw:
                xw, fw = xc, fc
            else:
                xw = xb + sigma * (xw - xb)
                fw = f(xw)
            continue
        fr = f(xr)
        if fr < fb:
            xe = abs(xb + gamma * (xr_raw - xb))
            fe = f(xe)
            xw, fw = (xe, fe) if fe < fr else (xr, fr)
            continue
        if fr < fw:
            xc = abs(xb + rho * (xr_raw - xb))
            fc = f(xc)
            if fc <= fr:
                xw, fw = xc, fc
                continue
        else:
            xc = abs(xb + rho * (xw - xb))
            fc = f(xc)
            if fc < fw:
                xw, fw = xc, fc
                continue
        xw = xb + sigma * (xw - xb)
        fw = f(xw)
    if fw < fb:
        xb, fb = xw, fw
    if not converged:
        converged = ftol is not None and fb <= ftol
    return NelderMeadResult(xb, fb, it, converged)


class _NoisyAccuracy:
    """Accuracy under Gaussian noise of variance ``eps`` with frozen noise draws."""

    def __init__(self, model: SoftmaxRegressionModel, valset: LabeledDataset, seed: int):
        self.model = model
        self.x = valset.flat()
        self.y = valset.labels
        z = standard_normal_field(seed, len(valset), valset.grid_shape)
        self.z = z.reshape(len(valset), -1)
        self.evaluations = 0

    def __call__(self, eps: float) -> float:
        self.evaluations += 1
        if eps == 0:
            x = self.x
        else:
            x = np.clip(self.x + math.sqrt(eps) * self.z, 0.0, 1.0)
        return float(np.mean(np.argmax(self.model.logits(x), axis=1) == self.y))


def _search(objective: Callable[[float], float], x0: float, config: TunerConfig) -> NelderMeadResult:
    return nelder_mead_1d(
        objective,
        x0,
        max_iters=config.nm_max_iters,
        xtol=1e-12,
        ftol=config.nm_tolerance,
        initial_step=config.nm_initial_step,
    )


def restart_points(eps_init: float, count: int) -> list[float]:
    """``eps_init * 10**k`` for k = 1, -1, 2, -2, ... (``count`` points)."""
    out = []
    for i in range(count):
        k = i // 2 + 1
        out.append(eps_init * 10.0 ** (k if i % 2 == 0 else -k))
    return out


def calibrate_epsilons(
    model: SoftmaxRegressionModel, valset: LabeledDataset, config: TunerConfig | None = None
) -> EpsilonSchedule:
    """Find one noise variance per accuracy target.

    Targets are visited from chance upward; each search is warm-started at
    the previous solution.  Every objective evaluation reuses the same noise
    draws (seeded by ``config.eval_seed``), which makes accuracy a
    deterministic function of the variance.
    """
    config = config or TunerConfig()
    acc_max = accuracy(model, valset)
    targets = accuracy_targets(valset.num_classes, acc_max, config.num_levels)
    acc_of = _NoisyAccuracy(model, valset, config.eval_seed)
    eps = config.eps_init
    epsilons, achieved, notes = [], [], []
    for target in targets:
        def objective(e: float) -> float:
            return abs(acc_of(e) - target)

        best = _search(objective, eps, config)
        # a warm start can land on a flat stretch of the accuracy curve
        # (e.g. the slow approach to chance at large variance); retry from a
        # ladder of fresh starting points, alternately above and below eps_init
        for x0 in restart_points(config.eps_init, config.nm_restarts):
            if best.fun <= config.nm_tolerance:
                break
            res = _search(objective, x0, config)
            if res.fun < best.fun:
                best = res
        eps = best.x
        got = acc_of(eps)
        if abs(got - target) > 5 * config.nm_tolerance:
            msg = f"target {target:.4f} missed: accuracy {got:.4f} at eps={eps:.6g}"
            log.warning(msg)
            notes.append(msg)
        epsilons.append(eps)
        achieved.append(got)
    return EpsilonSchedule(tuple(targets), tuple(epsilons), tuple(achieved), tuple(notes))


def _level_indices(n: int, num_levels: int, fraction: float, seed: int) -> list[np.ndarray]:
    k = math.ceil(fraction * n)
    if k >= n:
        return [np.arange(n)] * num_levels
    perm = np.random.default_rng([seed, 7919]).permutation(n)
    return [np.sort(perm[(i * k + np.arange(k)) % n]) for i in range(num_levels)]


def build_perturbed_valset(
    valset: LabeledDataset,
    schedule: EpsilonSchedule | Sequence[float],
    seed: int = 1,
    subsample_fraction: float = 1.0,
) -> LabeledDataset:
    """Union of one freshly noised copy of the validation set per tuned level.

    With ``subsample_fraction < 1`` each level keeps ``ceil(fraction * n)``
    samples; consecutive levels take consecutive slices of one seeded
    permutation, so the slices are disjoint while they fit.
    """
    epsilons = schedule.epsilons if isinstance(schedule, EpsilonSchedule) else tuple(schedule)
    if not 0 < subsample_fraction <= 1:
        raise ConfigError("subsample_fraction must lie in (0, 1]")
    parts = []
    for i, (eps, idx) in enumerate(zip(epsilons, _level_indices(len(valset), len(epsilons), subsample_fraction, seed))):
        sub = valset if len(idx) == len(valset) else valset.subset(idx)
        parts.append(perturb_dataset(sub, "gaussian", float(eps), seed=(seed, i)))
    return concat_datasets(parts)


def tune_perturbed(
    kinds: Sequence[str],
    model: SoftmaxRegressionModel,
    valset: LabeledDataset,
    config: TunerConfig | None = None,
    num_bins: int = DEFAULT_BINS,
    schedule: EpsilonSchedule | None = None,
) -> tuple[dict[str, FittedCalibrator], EpsilonSchedule]:
    """Fit several "-P" calibrators on one shared perturbed validation set."""
    config = config or TunerConfig()
    if schedule is None:
        schedule = calibrate_epsilons(model, valset, config)
    perturbed = build_perturbed_valset(valset, schedule, config.perturb_seed, config.subsample_fraction)
    logits = predict_logits(model, perturbed)
    return {k: fit_calibrator(k, logits, num_bins) for k in kinds}, schedule


def tune_calibrator_perturbed(
    kind: str,
    model: SoftmaxRegressionModel,
    valset: LabeledDataset,
    config: TunerConfig | None = None,
    num_bins: int = DEFAULT_BINS,
    schedule: EpsilonSchedule | None = None,
) -> FittedCalibrator:
    cals, _ = tune_perturbed([kind], model, valset, config, num_bins, schedule)
    return cals[kind]
