"""Input perturbations: additive noise, affine warps and simple photometric shifts.

All operators work on ``(N, H, W, K)`` feature tensors and clip their output to
``[0, 1]``.  Geometric warps use nearest-neighbour sampling about the grid
centre with zero fill; angles are in degrees.  Identity parameters return the
input unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import LabeledDataset, SampleGrid
from .errors import ConfigError, InvalidInputError

NOISE_KINDS = ("gaussian", "speckle")
PHOTOMETRIC_KINDS = ("brightness", "contrast")
GEOMETRIC_KINDS = (
    "rot_left", "rot_right", "shear",
    "xshift", "yshift", "xyshift",
    "xzoom", "yzoom", "xyzoom",
)
KINDS = NOISE_KINDS + PHOTOMETRIC_KINDS + GEOMETRIC_KINDS
NUM_LEVELS = 10

_IDENTITY = {k: 0.0 for k in KINDS}
_IDENTITY.update(contrast=1.0, xzoom=1.0, yzoom=1.0, xyzoom=1.0)

_STEPS = tuple(float(v) for v in range(0, 100, 10))
_SHIFTS = tuple(float(v) for v in range(0, 20, 2))
_ZOOMS = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1)
_BUILTIN = {
    "rot_left": (0.0, 350.0, 340.0, 330.0, 320.0, 310.0, 300.0, 290.0, 280.0, 270.0),
    "rot_right": _STEPS,
    "shear": _STEPS,
    "xyshift": _SHIFTS,
    "xshift": _SHIFTS,
    "yshift": _SHIFTS,
    "xyzoom": _ZOOMS,
    "xzoom": _ZOOMS,
    "yzoom": _ZOOMS,
}


@dataclass(frozen=True)
class Perturbation:
    kind: str
    param: float

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown perturbation kind {self.kind!r}")
        if not np.isfinite(self.param):
            raise ConfigError("perturbation parameter must be finite")
        if self.kind in NOISE_KINDS and self.param < 0:
            raise InvalidInputError(f"{self.kind} variance must be >= 0")
        if self.kind in ("xzoom", "yzoom", "xyzoom", "contrast") and self.param <= 0:
            raise InvalidInputError(f"{self.kind} factor must be > 0")

    @classmethod
    def parse(cls, text: str) -> "Perturbation":
        """Parse ``kind:param``, e.g. ``gaussian:0.04`` or ``rot_right:30``."""
        kind, sep, value = text.strip().partition(":")
        if not sep:
            raise ConfigError(f"perturbation spec {text!r} must look like kind:param")
        try:
            param = float(value)
        except ValueError:
            raise ConfigError(f"bad perturbation parameter in {text!r}") from None
        return cls(kind.strip().lower(), param)

    def __str__(self) -> str:
        return f"{self.kind}:{self.param:g}"

    @property
    def is_identity(self) -> bool:
        return self.param == identity_param(self.kind)

    @property
    def stochastic(self) -> bool:
        return self.kind in NOISE_KINDS


def identity_param(kind: str) -> float:
    if kind not in _IDENTITY:
        raise ConfigError(f"unknown perturbation kind {kind!r}")
    return _IDENTITY[kind]


@dataclass(frozen=True)
class LevelSchedule:
    kind: str
    params: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.params) != NUM_LEVELS:
            raise ConfigError(f"a level schedule needs exactly {NUM_LEVELS} levels, got {len(self.params)}")
        if self.params[0] != identity_param(self.kind):
            raise ConfigError(f"level 0 of {self.kind} must be the identity parameter {identity_param(self.kind)}")
        for p in self.params:
            Perturbation(self.kind, p)

    def __iter__(self):
        return iter(self.params)


def builtin_schedule(kind: str) -> LevelSchedule:
    """The ten-level affine test schedules (level 0 is no perturbation)."""
    if kind not in _BUILTIN:
        raise ConfigError(f"no builtin schedule for {kind!r}; available: {sorted(_BUILTIN)}")
    return LevelSchedule(kind, _BUILTIN[kind])


# ---------------------------------------------------------------------------
# Noise fields
# ---------------------------------------------------------------------------

def _seed_words(seed: int | Sequence[int]) -> list[int]:
    return [int(s) for s in seed] if isinstance(seed, (list, tuple)) else [int(seed)]


def standard_normal_field(seed: int | Sequence[int], n: int, shape: tuple[int, ...]) -> np.ndarray:
    """``(n, *shape)`` standard normals where sample ``i`` comes from its own
    stream seeded by ``(seed..., i)``."""
    words = _seed_words(seed)
    out = np.empty((n,) + tuple(shape))
    for i in range(n):
        out[i] = np.random.default_rng(words + [i]).standard_normal(shape)
    return out


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------

def gaussian_perturb(x: SampleGrid, epsilon: float, rng: np.random.Generator) -> SampleGrid:
    """Add i.i.d. ``N(0, epsilon)`` noise (epsilon is the variance) and clip to [0, 1]."""
    if epsilon < 0:
        raise InvalidInputError("noise variance must be >= 0")
    if epsilon == 0:
        return x
    noise = np.sqrt(epsilon) * rng.standard_normal(x.values.shape)
    return SampleGrid(np.clip(x.values + noise, 0.0, 1.0), x.label)


def add_noise(features: np.ndarray, kind: str, variance: float, z: np.ndarray) -> np.ndarray:
    """Apply a noise kind given pre-drawn standard normals ``z`` (same shape as ``features``)."""
    if variance < 0:
        raise InvalidInputError("noise variance must be >= 0")
    if variance == 0:
        return features
    scaled = np.sqrt(variance) * z
    if kind == "gaussian":
        out = features + scaled
    elif kind == "speckle":
        out = features + features * scaled
    else:
        raise InvalidInputError(f"{kind!r} is not a noise kind")
    return np.clip(out, 0.0, 1.0)


def _warp(features: np.ndarray, inverse) -> np.ndarray:
    """Nearest-neighbour resampling; ``inverse(x, y)`` maps centred output
    coordinates (column, row) to centred source coordinates."""
    n, h, w, k = features.shape
    if h < 2 or w < 2:
        raise InvalidInputError(f"geometric perturbations need H, W >= 2, got {h}x{w}")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sx, sy = inverse(cols - cx, rows - cy)
    # rounding guard so exact multiples of 90 degrees land on exact pixels
    src_c = np.floor(np.round(sx + cx, 9) + 0.5).astype(np.int64)
    src_r = np.floor(np.round(sy + cy, 9) + 0.5).astype(np.int64)
    valid = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    out = np.zeros_like(features)
    out[:, valid, :] = features[:, src_r[valid], src_c[valid], :]
    return out


def _rotate_clockwise(features: np.ndarray, degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    return _warp(features, lambda x, y: (c * x + s * y, -s * x + c * y))


def affine_transform(features: np.ndarray, kind: str, param: float) -> np.ndarray:
    """Geometric warp of an ``(N, H, W, K)`` (or single ``(H, W, K)``) tensor.

    ``rot_right`` rotates clockwise by ``param`` degrees; ``rot_left`` takes
    the absolute angle convention where ``350`` means 10 degrees
    counter-clockwise.  ``shear`` is a counter-clockwise shear angle,
    shifts are whole pixels (positive = right/down) and zoom factors below 1
    magnify about the centre.
    """
    pert = Perturbation(kind, param)
    if kind not in GEOMETRIC_KINDS:
        raise InvalidInputError(f"{kind!r} is not a geometric perturbation")
    single = features.ndim == 3
    feats = features[None] if single else features
    if pert.is_identity:
        return features
    if kind == "rot_right":
        out = _rotate_clockwise(feats, param)
    elif kind == "rot_left":
        out = _rotate_clockwise(feats, -((360.0 - param) % 360.0))
    elif kind == "shear":
        t = np.deg2rad(param)
        out = _warp(feats, lambda x, y: (x - np.sin(t) * y, np.cos(t) * y))
    elif kind in ("xshift", "yshift", "xyshift"):
        dx = param if kind != "yshift" else 0.0
        dy = param if kind != "xshift" else 0.0
        out = _warp(feats, lambda x, y: (x - dx, y - dy))
    else:
        fx = param if kind != "yzoom" else 1.0
        fy = param if kind != "xzoom" else 1.0
        out = _warp(feats, lambda x, y: (fx * x, fy * y))
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


def photometric_transform(features: np.ndarray, kind: str, param: float) -> np.ndarray:
    if Perturbation(kind, param).is_identity:
        return features
    if kind == "brightness":
        out = features + param
    elif kind == "contrast":
        mean = features.mean(axis=(-3, -2), keepdims=True)
        out = (features - mean) * param + mean
    else:
        raise InvalidInputError(f"{kind!r} is not a photometric perturbation")
    return np.clip(out, 0.0, 1.0)


def perturb_features(
    features: np.ndarray, kind: str, param: float, seed: int | Sequence[int] = 0
) -> np.ndarray:
    pert = Perturbation(kind, param)
    if pert.is_identity:
        return features
    if pert.stochastic:
        z = standard_normal_field(seed, features.shape[0], features.shape[1:])
        return add_noise(features, kind, param, z)
    if kind in PHOTOMETRIC_KINDS:
        return photometric_transform(features, kind, param)
    return affine_transform(features, kind, param)


def perturb_dataset(
    d: LabeledDataset, kind: str, param: float, seed: int | Sequence[int] = 0
) -> LabeledDataset:
    """Perturb every sample; noise for sample ``i`` is drawn from the stream ``(seed, i)``."""
    out = perturb_features(d.features, kind, param, seed)
    if out is d.features:
        return d
    return d.with_features(out)
