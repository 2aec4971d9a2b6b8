"""Post-hoc calibrators: fit on validation logits, map logits to probabilities.

Every calibrator is an immutable dataclass with an ``apply(logits)`` method
that accepts a single logit vector or an ``(n, C)`` batch and returns
probability vectors of the same shape.  ``fit_*`` functions attach a
:class:`FitReport` that is excluded from equality and serialization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .data import LogitSet, softmax
from .errors import InvalidInputError, ParseError, VersionError
from .metrics import DEFAULT_BINS, bin_index

CAL_FORMAT = "drift-calib-cal-v1"
T_MIN, T_MAX = 0.05, 50.0
# strictly increasing tie-breaker added to the shared IRM map
IRM_TIE_BREAK = 1e-7


@dataclass(frozen=True)
class FitReport:
    objective: float
    iterations: int
    converged: bool


def _batch(z) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return z[None, :], True
    if z.ndim != 2:
        raise InvalidInputError(f"logits must be 1-D or 2-D, got shape {z.shape}")
    return z, False


def _unbatch(p: np.ndarray, single: bool) -> np.ndarray:
    return p[0] if single else p


def _renormalize(q: np.ndarray) -> np.ndarray:
    s = q.sum(axis=1, keepdims=True)
    uniform = np.full_like(q, 1.0 / q.shape[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(s > 0, q / np.where(s > 0, s, 1.0), uniform)
    return out


def top_label_margin(z: np.ndarray) -> np.ndarray:
    """Top-label log-odds ``z_max - logsumexp(z_others)``; ``sigmoid`` of it is the max softmax."""
    z, _ = _batch(z)
    k = np.argmax(z, axis=1)
    rows = np.arange(z.shape[0])
    others = z.copy()
    others[rows, k] = -np.inf
    return z[rows, k] - logsumexp(others, axis=1)


def replace_top_confidence(probs: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Set the top class to ``q`` and share ``1 - q`` over the rest in proportion to ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    n, c = probs.shape
    rows = np.arange(n)
    k = np.argmax(probs, axis=1)
    rest = probs.copy()
    rest[rows, k] = 0.0
    rest_sum = rest.sum(axis=1, keepdims=True)
    share = np.where(rest_sum > 0, rest / np.where(rest_sum > 0, rest_sum, 1.0), 1.0 / (c - 1))
    share[rows, k] = 0.0
    out = share * (1.0 - q)[:, None]
    out[rows, k] = q
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _mean_nll(probs: np.ndarray, labels: np.ndarray) -> float:
    py = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(py, 1e-12))))


# ---------------------------------------------------------------------------
# Isotonic primitives
# ---------------------------------------------------------------------------

def pava(values, weights=None) -> np.ndarray:
    """Weighted least-squares non-decreasing fit (pool adjacent violators)."""
    y = np.asarray(values, dtype=np.float64).ravel()
    if y.size == 0:
        raise InvalidInputError("pava needs at least one value")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    if w.shape != y.shape:
        raise InvalidInputError("values and weights must have equal length")
    if np.any(~(w > 0)):
        raise InvalidInputError("pava weights must be positive")
    # stack of blocks: mean, weight, length
    means: list[float] = []
    wts: list[float] = []
    lens: list[int] = []
    for yi, wi in zip(y, w):
        means.append(float(yi))
        wts.append(float(wi))
        lens.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, l2 = means.pop(), wts.pop(), lens.pop()
            tot = wts[-1] + w2
            means[-1] = (means[-1] * wts[-1] + m2 * w2) / tot
            wts[-1] = tot
            lens[-1] += l2
    return np.repeat(means, lens)


@dataclass(frozen=True)
class StepMap:
    """Non-decreasing piecewise-constant map.

    ``f(s) = values[k]`` for ``breakpoints[k] <= s < breakpoints[k+1]``;
    clamped to the first/last value outside the fitted range.
    """

    breakpoints: tuple[float, ...]
    values: tuple[float, ...]

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        x = np.asarray(self.breakpoints)
        v = np.asarray(self.values)
        idx = np.clip(np.searchsorted(x, s, side="right") - 1, 0, len(v) - 1)
        return v[idx]

    @classmethod
    def fit(cls, scores: np.ndarray, targets: np.ndarray) -> "StepMap":
        scores = np.asarray(scores, dtype=np.float64).ravel()
        targets = np.asarray(targets, dtype=np.float64).ravel()
        # equal scores are pooled first so the map is a function of the score
        xs, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
        sums = np.bincount(inverse, weights=targets, minlength=xs.size)
        fitted = pava(sums / counts, counts.astype(np.float64))
        # keep only the left edge of each constant run
        keep = np.ones(xs.size, dtype=bool)
        keep[1:] = fitted[1:] != fitted[:-1]
        return cls(tuple(xs[keep].tolist()), tuple(np.clip(fitted[keep], 0.0, 1.0).tolist()))


# ---------------------------------------------------------------------------
# Calibrator types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Temperature:
    T: float
    report: FitReport | None = field(default=None, compare=False, repr=False)
    kind = "ts"

    def apply(self, z) -> np.ndarray:
        zb, single = _batch(z)
        return _unbatch(softmax(zb / self.T), single)


@dataclass(frozen=True)
class ETS:
    T: float
    weights: tuple[float, float, float]
    report: FitReport | None = field(default=None, compare=False, repr=False)
    kind = "ets"

    def apply(self, z) -> np.ndarray:
        zb, single = _batch(z)
        w1, w2, w3 = self.weights
        p = w1 * softmax(zb / self.T) + w2 * softmax(zb) + w3 / zb.shape[1]
        return _unbatch(p, single)


@dataclass(frozen=True)
class Platt:
    a: float
    b: float
    report: FitReport | None = field(default=None, compare=False, repr=False)
    kind = "platt"

    def confidence(self, z) -> np.ndarray:
        return _sigmoid(self.a * top_label_margin(z) + self.b)

    def apply(self, z) -> np.ndarray:
        zb, single = _batch(z)
        return _unbatch(replace_top_confidence(softmax(zb), self.confidence(zb)), single)


@dataclass(frozen=True)
class HistogramBins:
    values: tuple[float, ...]
    report: FitReport | None = field(default=None, compare=False, repr=False)
    kind = "hb"

    @property
    def num_bins(self) -> int:
        return len(self.values)

    def lookup(self, conf) -> np.ndarray:
        return np.asarray(self.values)[bin_index(conf, self.num_bins)]

    def apply(self, z) -> np.ndarray:
        zb, single = _batch(z)
        p = softmax(zb)
        return _unbatch(replace_top_confidence(p, self.lookup(p.max(axis=1))), single)


@dataclass(frozen=True)
class Isotonic:
    maps: tuple[StepMap, ...]
    report: FitReport | None = field(default=None, compare=False, repr=False)
    kind = "ir"

    def apply_probs(self, p: np.ndarray) -> np.ndarray:
        if p.shape[1] != len(self.maps):
            raise InvalidInputError(f"calibrator fitted for C={len(self.maps)}, got C={p.shape[1]}")
        q = np.column_stack([f(p[:, c]) for c, f in enumerate(self.maps)])
        return _renormalize(q)

    def apply(self, z) -> np.ndarray:
        zb, single = _batch(z)
        return _unbatch(self.apply_probs(softmax(zb)), single)


@dataclass(frozen=True)
class IRM:
    map: StepMap
    report: FitReport | None = field(default=None, compare=False, repr=False)
    kind = "irm"

    def apply(self, z) -> np.ndarray:
        zb, single = _batch(z)
        p = softmax(zb)
        return _unbatch(_renormalize(self.map(p) + IRM_TIE_BREAK * p), single)


@dataclass(frozen=True)
class TSIR:
    temperature: Temperature
    isotonic: Isotonic
    report: FitReport | None = field(default=None, compare=False, repr=False)
    kind = "ts-ir"

    def apply(self, z) -> np.ndarray:
        zb, single = _batch(z)
        return _unbatch(self.isotonic.apply_probs(self.temperature.apply(zb)), single)


@dataclass(frozen=True)
class PBMC:
    platt: Platt
    bins: HistogramBins
    report: FitReport | None = field(default=None, compare=False, repr=False)
    kind = "pbmc"

    def apply(self, z) -> np.ndarray:
        zb, single = _batch(z)
        q = self.bins.lookup(self.platt.confidence(zb))
        return _unbatch(replace_top_confidence(softmax(zb), q), single)


@dataclass(frozen=True)
class Identity:
    """Uncalibrated softmax (the "Base" row of reports)."""

    kind = "base"

    def apply(self, z) -> np.ndarray:
        zb, single = _batch(z)
        return _unbatch(softmax(zb), single)


FittedCalibrator = Temperature | ETS | Platt | HistogramBins | Isotonic | IRM | TSIR | PBMC | Identity


def apply(cal: FittedCalibrator, z) -> np.ndarray:
    return cal.apply(z)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def _as_arrays(val) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(val, LogitSet):
        return val.logits, val.labels
    if isinstance(val, tuple) and len(val) == 2:
        ls = LogitSet(*val)
        return ls.logits, ls.labels
    return _as_arrays(LogitSet.from_records(val))


def temperature_nll(logits: np.ndarray, labels: np.ndarray, T: float) -> float:
    """Mean NLL of ``softmax(z / T)``."""
    z = np.asarray(logits, dtype=np.float64) / T
    return float(np.mean(logsumexp(z, axis=1) - z[np.arange(len(labels)), labels]))


def fit_temperature(val, t_min: float = T_MIN, t_max: float = T_MAX) -> Temperature:
    """Minimize validation NLL over ``T in [t_min, t_max]``.

    The NLL is convex in the inverse temperature, so the minimizer is found
    by bisection on its derivative; a boundary is returned when the
    derivative does not change sign.
    """
    z, y = _as_arrays(val)
    if np.all(np.ptp(z, axis=1) == 0):
        return Temperature(1.0, FitReport(temperature_nll(z, y, 1.0), 0, False))
    rows = np.arange(len(y))
    zy = z[rows, y]

    def slope(beta: float) -> float:
        p = softmax(beta * z)
        return float(np.mean((p * z).sum(axis=1) - zy))

    lo, hi = 1.0 / t_max, 1.0 / t_min
    it = 0
    if slope(lo) >= 0:
        beta = lo
    elif slope(hi) <= 0:
        beta = hi
    else:
        while hi - lo > 1e-13 * hi and it < 200:
            mid = 0.5 * (lo + hi)
            if slope(mid) > 0:
                hi = mid
            else:
                lo = mid
            it += 1
        beta = 0.5 * (lo + hi)
    T = float(min(max(1.0 / beta, t_min), t_max))
    return Temperature(T, FitReport(temperature_nll(z, y, T), it, True))


def fit_ets(val, temperature: Temperature | None = None) -> ETS:
    """Ensemble temperature scaling with simplex weights fitted by Nelder-Mead.

    Weights are parameterized as ``softmax(u)`` for unconstrained ``u``.
    The pure temperature-scaling endpoint ``(1, 0, 0)`` is kept whenever the
    search cannot beat it.
    """
    z, y = _as_arrays(val)
    ts = temperature or fit_temperature((z, y))
    rows = np.arange(len(y))
    comp = np.column_stack([
        softmax(z / ts.T)[rows, y],
        softmax(z)[rows, y],
        np.full(len(y), 1.0 / z.shape[1]),
    ])
    if ts.report is not None and not ts.report.converged:
        return ETS(ts.T, (1.0, 0.0, 0.0), FitReport(temperature_nll(z, y, ts.T), 0, False))

    def objective(w: np.ndarray) -> float:
        return float(-np.mean(np.log(np.maximum(comp @ w, 1e-300))))

    def reparam(u: np.ndarray) -> np.ndarray:
        return softmax(u)

    res = minimize(
        lambda u: objective(reparam(u)),
        np.array([2.0, 0.0, 0.0]),
        method="Nelder-Mead",
        options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 4000, "maxfev": 8000},
    )
    w = reparam(res.x)
    endpoint = np.array([1.0, 0.0, 0.0])
    if objective(endpoint) <= objective(w):
        w = endpoint
    w = w / w.sum()
    return ETS(ts.T, tuple(float(v) for v in w), FitReport(objective(w), int(res.nit), bool(res.success)))


def platt_nll(margins: np.ndarray, targets: np.ndarray, a: float, b: float) -> float:
    s = a * margins + b
    # -[t log sig(s) + (1-t) log(1 - sig(s))] = logaddexp(0, s) - t s
    return float(np.mean(np.logaddexp(0.0, s) - targets * s))


def _fit_logistic_1d(m: np.ndarray, t: np.ndarray, max_iter: int = 100) -> tuple[float, float, FitReport]:
    """Newton's method with backtracking for ``min_{a,b} NLL(sigmoid(a m + b), t)``."""
    t = t.astype(np.float64)
    if np.all(t == t[0]):
        # separable in the trivial sense: constant target
        frac = np.clip(t.mean(), 1e-6, 1 - 1e-6)
        b = float(np.log(frac / (1 - frac)))
        return 0.0, b, FitReport(platt_nll(m, t, 0.0, b), 0, False)
    a, b = 1.0, 0.0
    f = platt_nll(m, t, a, b)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = _sigmoid(a * m + b)
        r = p - t
        g = np.array([np.mean(r * m), np.mean(r)])
        wgt = p * (1 - p)
        h = np.array([[np.mean(wgt * m * m), np.mean(wgt * m)], [np.mean(wgt * m), np.mean(wgt)]])
        h += 1e-12 * np.eye(2)
        try:
            step = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            step = g
        lr = 1.0
        while lr > 1e-10:
            a_new, b_new = a - lr * step[0], b - lr * step[1]
            f_new = platt_nll(m, t, a_new, b_new)
            if f_new <= f:
                break
            lr *= 0.5
        else:
            converged = np.max(np.abs(g)) < 1e-8
            break
        a, b, f_prev, f = a_new, b_new, f, f_new
        if np.max(np.abs(g)) < 1e-10 or abs(f_prev - f) < 1e-15:
            converged = True
            break
    return float(a), float(b), FitReport(f, it, bool(converged))


def fit_platt(val) -> Platt:
    """Logistic fit of correctness on the top-label log-odds margin."""
    z, y = _as_arrays(val)
    m = top_label_margin(z)
    correct = (np.argmax(z, axis=1) == y).astype(np.float64)
    a, b, rep = _fit_logistic_1d(m, correct)
    return Platt(a, b, rep)


def _histogram_values(conf: np.ndarray, targets: np.ndarray, num_bins: int) -> tuple[float, ...]:
    idx = bin_index(conf, num_bins)
    counts = np.bincount(idx, minlength=num_bins)
    sums = np.bincount(idx, weights=targets, minlength=num_bins)
    mids = (np.arange(num_bins) + 0.5) / num_bins
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.where(counts > 0, sums / np.maximum(counts, 1), mids)
    return tuple(float(v) for v in vals)


def fit_histogram_binning(val, num_bins: int = DEFAULT_BINS) -> HistogramBins:
    """Equal-width bins on max-softmax confidence; each bin maps to its accuracy."""
    if num_bins < 1:
        raise InvalidInputError("num_bins must be >= 1")
    z, y = _as_arrays(val)
    p = softmax(z)
    correct = (np.argmax(p, axis=1) == y).astype(np.float64)
    vals = _histogram_values(p.max(axis=1), correct, num_bins)
    sq = float(np.mean((np.asarray(vals)[bin_index(p.max(axis=1), num_bins)] - correct) ** 2))
    return HistogramBins(vals, FitReport(sq, 1, True))


def _fit_isotonic_probs(p: np.ndarray, y: np.ndarray) -> Isotonic:
    maps = []
    sq = 0.0
    for c in range(p.shape[1]):
        target = (y == c).astype(np.float64)
        f = StepMap.fit(p[:, c], target)
        sq += float(np.sum((f(p[:, c]) - target) ** 2))
        maps.append(f)
    return Isotonic(tuple(maps), FitReport(sq / p.size, 1, True))


def fit_isotonic(val) -> Isotonic:
    """One-vs-rest isotonic maps, one per class, on softmax scores."""
    z, y = _as_arrays(val)
    return _fit_isotonic_probs(softmax(z), y)


def fit_irm(val) -> IRM:
    """One isotonic map shared by all classes, fitted on the pooled (score, indicator) pairs."""
    z, y = _as_arrays(val)
    p = softmax(z)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y] = 1.0
    g = StepMap.fit(p.ravel(), onehot.ravel())
    sq = float(np.mean((g(p.ravel()) - onehot.ravel()) ** 2))
    return IRM(g, FitReport(sq, 1, True))


def fit_ts_ir(val, temperature: Temperature | None = None) -> TSIR:
    z, y = _as_arrays(val)
    ts = temperature or fit_temperature((z, y))
    iso = _fit_isotonic_probs(ts.apply(z), y)
    return TSIR(ts, iso, iso.report)


def fit_pbmc(val, num_bins: int = DEFAULT_BINS) -> PBMC:
    """Platt scaling followed by binning of the scaled confidences (scaling-binning).

    Each bin stores the mean stage-1 confidence of its members rather than
    their empirical accuracy.
    """
    if num_bins < 1:
        raise InvalidInputError("num_bins must be >= 1")
    platt = fit_platt(val)
    z, _ = _as_arrays(val)
    conf = platt.confidence(z)
    bins = HistogramBins(_histogram_values(conf, conf, num_bins))
    return PBMC(platt, bins, platt.report)


FITTERS: dict[str, Callable[..., Any]] = {
    "ts": fit_temperature,
    "ets": fit_ets,
    "platt": fit_platt,
    "hb": fit_histogram_binning,
    "ir": fit_isotonic,
    "irm": fit_irm,
    "ts-ir": fit_ts_ir,
    "pbmc": fit_pbmc,
}

DISPLAY_NAMES = {
    "base": "Base", "ts": "TS", "ets": "ETS", "platt": "PS", "hb": "HB",
    "ir": "IR", "irm": "IRM", "ts-ir": "TS-IR", "pbmc": "PBMC",
}


def fit_calibrator(kind: str, val, num_bins: int = DEFAULT_BINS) -> FittedCalibrator:
    kind = kind.lower()
    if kind in ("base", "none"):
        return Identity()
    if kind not in FITTERS:
        raise InvalidInputError(f"unknown calibrator kind {kind!r}; choose from {sorted(FITTERS)}")
    if kind in ("hb", "pbmc"):
        return FITTERS[kind](val, num_bins=num_bins)
    return FITTERS[kind](val)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _map_to_dict(f: StepMap) -> dict:
    return {"breakpoints": list(f.breakpoints), "values": list(f.values)}


def _map_from_dict(d: dict) -> StepMap:
    return StepMap(tuple(float(v) for v in d["breakpoints"]), tuple(float(v) for v in d["values"]))


def calibrator_to_dict(cal: FittedCalibrator) -> dict:
    out: dict[str, Any] = {"format": CAL_FORMAT, "kind": cal.kind}
    if isinstance(cal, Temperature):
        out["T"] = cal.T
    elif isinstance(cal, ETS):
        out.update(T=cal.T, weights=list(cal.weights))
    elif isinstance(cal, Platt):
        out.update(a=cal.a, b=cal.b)
    elif isinstance(cal, HistogramBins):
        out["values"] = list(cal.values)
    elif isinstance(cal, Isotonic):
        out["maps"] = [_map_to_dict(f) for f in cal.maps]
    elif isinstance(cal, IRM):
        out["map"] = _map_to_dict(cal.map)
    elif isinstance(cal, TSIR):
        out.update(T=cal.temperature.T, maps=[_map_to_dict(f) for f in cal.isotonic.maps])
    elif isinstance(cal, PBMC):
        out.update(a=cal.platt.a, b=cal.platt.b, values=list(cal.bins.values))
    elif not isinstance(cal, Identity):
        raise InvalidInputError(f"cannot serialize {type(cal).__name__}")
    return out


def calibrator_from_dict(d: dict) -> FittedCalibrator:
    if not isinstance(d, dict) or d.get("format") != CAL_FORMAT:
        raise VersionError(f"expected calibrator format {CAL_FORMAT!r}")
    kind = d.get("kind")
    try:
        if kind == "ts":
            return Temperature(float(d["T"]))
        if kind == "ets":
            return ETS(float(d["T"]), tuple(float(v) for v in d["weights"]))
        if kind == "platt":
            return Platt(float(d["a"]), float(d["b"]))
        if kind == "hb":
            return HistogramBins(tuple(float(v) for v in d["values"]))
        if kind == "ir":
            return Isotonic(tuple(_map_from_dict(m) for m in d["maps"]))
        if kind == "irm":
            return IRM(_map_from_dict(d["map"]))
        if kind == "ts-ir":
            return TSIR(Temperature(float(d["T"])), Isotonic(tuple(_map_from_dict(m) for m in d["maps"])))
        if kind == "pbmc":
            return PBMC(Platt(float(d["a"]), float(d["b"])), HistogramBins(tuple(float(v) for v in d["values"])))
        if kind == "base":
            return Identity()
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed {kind} calibrator: {exc}") from None
    raise ParseError(f"unknown calibrator kind {kind!r}")


def save_calibrator(cal: FittedCalibrator, path: str | Path) -> None:
    Path(path).write_text(json.dumps(calibrator_to_dict(cal)))


def load_calibrator(path: str | Path) -> FittedCalibrator:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return calibrator_from_dict(doc)
