"""Calibration and proper-scoring metrics.

Binning convention: with ``M`` equal-width bins, confidence ``p`` falls in
bin ``m`` (1-based) iff ``p`` lies in ``((m-1)/M, m/M]``; ``p = 0`` goes to
the first bin.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError

DEFAULT_BINS = 15
LOG_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class PredictionSet:
    confidences: np.ndarray
    correct: np.ndarray
    labels: np.ndarray | None = None
    probs: np.ndarray | None = None

    def __post_init__(self) -> None:
        conf = np.asarray(self.confidences, dtype=np.float64).ravel()
        corr = np.asarray(self.correct, dtype=bool).ravel()
        if conf.size == 0:
            raise InvalidInputError("empty PredictionSet")
        if corr.shape != conf.shape:
            raise InvalidInputError("confidences and correct must have the same length")
        if np.any(~np.isfinite(conf)) or conf.min() < 0.0 or conf.max() > 1.0:
            raise InvalidInputError("confidences must lie in [0, 1]")
        object.__setattr__(self, "confidences", conf)
        object.__setattr__(self, "correct", corr)
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.probs is not None:
            object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))

    @classmethod
    def from_probs(cls, probs: np.ndarray, labels: np.ndarray) -> "PredictionSet":
        """Top-label view of probability vectors (argmax ties -> lowest index)."""
        probs = np.asarray(probs, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        pred = np.argmax(probs, axis=1)
        conf = np.clip(probs[np.arange(len(pred)), pred], 0.0, 1.0)
        return cls(conf, pred == labels, labels, probs)

    def __len__(self) -> int:
        return self.confidences.size

    @property
    def accuracy(self) -> float:
        return float(self.correct.mean())


@dataclass(frozen=True, eq=False)
class ReliabilityBins:
    edges: np.ndarray
    counts: np.ndarray
    conf: np.ndarray  # NaN for empty bins
    acc: np.ndarray  # NaN for empty bins

    @property
    def num_bins(self) -> int:
        return self.counts.size

    @property
    def nonempty(self) -> np.ndarray:
        return self.counts > 0


def bin_index(confidences: np.ndarray, num_bins: int) -> np.ndarray:
    """0-based bin of each confidence under the right-closed convention."""
    if num_bins < 1:
        raise InvalidInputError("number of bins must be >= 1")
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    idx = np.searchsorted(edges, np.asarray(confidences, dtype=np.float64), side="left") - 1
    return np.clip(idx, 0, num_bins - 1)


def reliability_bins(preds: PredictionSet, num_bins: int = DEFAULT_BINS) -> ReliabilityBins:
    idx = bin_index(preds.confidences, num_bins)
    counts = np.bincount(idx, minlength=num_bins)
    conf_sum = np.bincount(idx, weights=preds.confidences, minlength=num_bins)
    acc_sum = np.bincount(idx, weights=preds.correct.astype(np.float64), minlength=num_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        conf = np.where(counts > 0, conf_sum / counts, np.nan)
        acc = np.where(counts > 0, acc_sum / counts, np.nan)
    return ReliabilityBins(np.linspace(0.0, 1.0, num_bins + 1), counts, conf, acc)


def ece(preds: PredictionSet, num_bins: int = DEFAULT_BINS) -> float:
    """Expected calibration error: count-weighted mean of ``|acc - conf|`` over bins."""
    bins = reliability_bins(preds, num_bins)
    m = bins.nonempty
    gaps = np.abs(bins.acc[m] - bins.conf[m])
    return float(np.sum(bins.counts[m] * gaps) / len(preds))


def plugin_l2_ece(preds: PredictionSet, num_bins: int = DEFAULT_BINS) -> float:
    """Root of the count-weighted squared bin gap (no variance correction)."""
    bins = reliability_bins(preds, num_bins)
    m = bins.nonempty
    sq = (bins.acc[m] - bins.conf[m]) ** 2
    return float(np.sqrt(np.sum(bins.counts[m] * sq) / len(preds)))


def debiased_ece(preds: PredictionSet, num_bins: int = DEFAULT_BINS) -> float:
    """Variance-corrected l2 calibration error.

    Each non-empty bin with at least two samples has its squared gap reduced
    by the sampling variance ``acc (1 - acc) / (n_m - 1)``; the weighted sum
    is clipped at zero before taking the root.
    """
    bins = reliability_bins(preds, num_bins)
    m = bins.nonempty
    n_m = bins.counts[m].astype(np.float64)
    acc, conf = bins.acc[m], bins.conf[m]
    correction = np.where(n_m >= 2, acc * (1.0 - acc) / np.maximum(n_m - 1.0, 1.0), 0.0)
    total = np.sum(n_m / len(preds) * ((acc - conf) ** 2 - correction))
    return float(np.sqrt(max(0.0, total)))


def _probs_labels(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise InvalidInputError("probs must be a non-empty (n, C) array")
    if y.shape != (p.shape[0],):
        raise InvalidInputError(f"length mismatch: {p.shape[0]} probability vectors, {y.size} labels")
    if y.min() < 0 or y.max() >= p.shape[1]:
        raise InvalidInputError("labels out of range")
    return p, y


def nll(probs: np.ndarray, labels: np.ndarray) -> float:
    p, y = _probs_labels(probs, labels)
    py = np.maximum(p[np.arange(len(y)), y], LOG_FLOOR)
    return float(-np.mean(np.log(py)))


def brier(probs: np.ndarray, labels: np.ndarray) -> float:
    """Multiclass Brier score, ``mean_i sum_c (p_ic - 1{y_i = c})^2``."""
    p, y = _probs_labels(probs, labels)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y] = 1.0
    return float(np.mean(np.sum((p - onehot) ** 2, axis=1)))


def predictive_entropy(probs: np.ndarray) -> float:
    """Mean Shannon entropy in nats, with ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise InvalidInputError("predictive_entropy needs a non-empty (n, C) array")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(np.mean(-terms.sum(axis=1)))


def pool(per_level: Sequence[PredictionSet]) -> PredictionSet:
    levels = [p for p in per_level if p is not None and len(p) > 0]
    if not levels:
        raise InvalidInputError("no non-empty levels to pool")
    has_probs = all(p.probs is not None for p in levels)
    has_labels = all(p.labels is not None for p in levels)
    return PredictionSet(
        np.concatenate([p.confidences for p in levels]),
        np.concatenate([p.correct for p in levels]),
        np.concatenate([p.labels for p in levels]) if has_labels else None,
        np.concatenate([p.probs for p in levels]) if has_probs else None,
    )


def micro_averaged_ece(per_level: Sequence[PredictionSet], num_bins: int = DEFAULT_BINS) -> float:
    """ECE over the union of all drift levels (pool first, then bin)."""
    return ece(pool(per_level), num_bins)
