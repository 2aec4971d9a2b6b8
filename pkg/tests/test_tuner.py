import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftcal.calibrators import fit_temperature, temperature_nll
from driftcal.data import LabeledDataset
from driftcal.errors import ConfigError, InvalidInputError, NumericalError, ParseError
from driftcal.models import accuracy, predict_logits
from driftcal.tuner import (
    EpsilonSchedule,
    TunerConfig,
    accuracy_targets,
    build_perturbed_valset,
    calibrate_epsilons,
    nelder_mead_1d,
    tune_calibrator_perturbed,
    tune_perturbed,
)

from .oracles import bisect_epsilon, temperature_grid_search

PROPS = settings(max_examples=250, deadline=None)


# ---------------------------------------------------------------------------
# Nelder-Mead
# ---------------------------------------------------------------------------

def test_nm_quadratic():
    res = nelder_mead_1d(lambda x: (x - 2.0) ** 2, 0.5)
    assert res.x == pytest.approx(2.0, abs=1e-4)


def test_nm_absolute_value():
    res = nelder_mead_1d(lambda x: abs(x - 0.3), 1.0)
    assert res.x == pytest.approx(0.3, abs=1e-3)


def test_nm_boundary():
    res = nelder_mead_1d(lambda x: (x + 1.0) ** 2, 1.0)
    assert res.x == pytest.approx(0.0, abs=1e-6)
    assert res.x >= 0


def test_nm_non_finite_objective_reports_last_iterate():
    def f(x):
        return (x - 5.0) ** 2 if x < 3.0 else math.nan

    with pytest.raises(NumericalError, match="last valid iterate"):
        nelder_mead_1d(f, 1.0)


def test_nm_ftol_stops_early():
    calls = []

    def f(x):
        calls.append(x)
        return abs(x - 1.0)

    res = nelder_mead_1d(f, 1.0, ftol=0.01)
    assert res.converged and res.iterations == 0 and len(calls) == 2


@PROPS
@given(st.floats(-5, 5), st.floats(0, 10), st.booleans())
def test_nm_never_negative(center, x0, use_abs):
    f = (lambda x: abs(x - center)) if use_abs else (lambda x: (x - center) ** 2)
    res = nelder_mead_1d(f, x0, max_iters=100)
    assert res.x >= 0
    if center >= 0 and x0 > 0:
        assert abs(res.x - center) <= 1e-3 * max(1.0, center)


# ---------------------------------------------------------------------------
# Targets and schedules
# ---------------------------------------------------------------------------

def test_targets_examples():
    np.testing.assert_allclose(accuracy_targets(10, 0.9, 9), np.arange(1, 10) / 10, atol=1e-12)
    np.testing.assert_allclose(accuracy_targets(10, 0.82, 10), 0.10 + 0.08 * np.arange(10), atol=1e-12)
    with pytest.raises(InvalidInputError):
        accuracy_targets(10, 0.1)
    with pytest.raises(ConfigError):
        accuracy_targets(10, 0.9, 1)


@PROPS
@given(st.integers(2, 1000), st.floats(0, 1), st.integers(2, 40))
def test_targets_strictly_increasing_with_exact_endpoints(c, u, n):
    acc_max = 1.0 / c + (1.0 - 1.0 / c) * max(u, 1e-3)
    t = accuracy_targets(c, acc_max, n)
    assert len(t) == n
    assert t[0] == 1.0 / c and t[-1] == acc_max
    assert all(b > a for a, b in zip(t, t[1:]))


def test_schedule_json(tmp_path):
    s = EpsilonSchedule((0.1, 0.5), (2.0, 0.0), (0.11, 0.5))
    s.save(tmp_path / "s.json")
    assert json.loads((tmp_path / "s.json").read_text()) == {
        "targets": [0.1, 0.5], "epsilons": [2.0, 0.0], "achieved": [0.11, 0.5], "N": 2,
    }
    assert EpsilonSchedule.load(tmp_path / "s.json") == s
    (tmp_path / "bad.json").write_text('{"targets": [0.1], "epsilons": [1.0], "achieved": [0.1], "N": 3}')
    with pytest.raises(ParseError):
        EpsilonSchedule.load(tmp_path / "bad.json")
    with pytest.raises(InvalidInputError):
        EpsilonSchedule((0.1,), (-1.0,), (0.1,))


@pytest.mark.parametrize(
    "kwargs",
    [{"num_levels": 1}, {"eps_init": 0}, {"nm_tolerance": 0}, {"subsample_fraction": 0}, {"subsample_fraction": 1.5}],
)
def test_tuner_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TunerConfig(**kwargs)


# ---------------------------------------------------------------------------
# Noise-level search on the blob task
# ---------------------------------------------------------------------------

def _oracle_accuracy(model, valset, seed):
    """Accuracy under fixed Gaussian draws, rebuilt directly from per-sample streams."""
    x = valset.flat()
    z = np.stack([np.random.default_rng([seed, i]).standard_normal(x.shape[1]) for i in range(len(x))])

    def acc(eps):
        noisy = np.clip(x + math.sqrt(eps) * z, 0, 1)
        return float(np.mean(np.argmax(noisy @ model.weights.T + model.bias, axis=1) == valset.labels))

    return acc


@pytest.fixture(scope="module")
def tuned(blob_task):
    return calibrate_epsilons(blob_task.model, blob_task.val, TunerConfig())


def test_schedule_tracks_targets(blob_task, tuned):
    assert tuned.N == 10
    assert tuned.targets[0] == 0.1
    assert tuned.targets[-1] == accuracy(blob_task.model, blob_task.val)
    assert max(abs(a - t) for a, t in zip(tuned.achieved, tuned.targets)) <= 0.03
    assert tuned.achieved[-1] == pytest.approx(tuned.targets[-1], abs=0.005)


def test_schedule_agrees_with_bisection_oracle(blob_task, tuned):
    acc_of = _oracle_accuracy(blob_task.model, blob_task.val, seed=0)
    for target, eps, achieved in zip(tuned.targets, tuned.epsilons, tuned.achieved):
        assert acc_of(eps) == achieved
        ref = bisect_epsilon(acc_of, target)
        assert abs(acc_of(ref) - target) <= 0.03
    # lower accuracy targets need more noise (loose check: plateaus allow slack)
    eps = np.array(tuned.epsilons)
    assert np.all(eps[1:] <= eps[:-1] * 1.25 + 1e-6)


def test_perturbed_valset_size_and_labels(blob_task, tuned):
    val = blob_task.val
    full = build_perturbed_valset(val, tuned, seed=1)
    assert len(full) == 10 * len(val)
    np.testing.assert_array_equal(full.labels, np.tile(val.labels, 10))


def test_subsampled_levels_are_disjoint():
    n = 500
    val = LabeledDataset.from_flat(np.arange(n, dtype=float)[:, None] / n, np.arange(n) % 2, 2)
    out = build_perturbed_valset(val, [0.0] * 10, seed=3, subsample_fraction=0.1)
    assert len(out) == 500
    keys = out.flat()[:, 0]
    assert len(np.unique(keys)) == 500  # each source sample used by exactly one level


@PROPS
@given(st.integers(1, 40), st.integers(1, 12), st.floats(0.01, 1.0), st.integers(0, 100))
def test_perturbed_valset_count(n, levels, fraction, seed):
    rng = np.random.default_rng(seed)
    val = LabeledDataset.from_flat(rng.random((n, 2)), rng.integers(0, 3, n), 3)
    eps = rng.uniform(0, 0.2, levels)
    out = build_perturbed_valset(val, list(eps), seed=seed, subsample_fraction=fraction)
    assert len(out) == levels * math.ceil(fraction * n)
    assert set(out.labels.tolist()) <= set(val.labels.tolist())


def test_zero_schedule_reduces_to_plain_fit(blob_task):
    zero = EpsilonSchedule(tuple(np.linspace(0.1, 0.9, 10)), (0.0,) * 10, (0.9,) * 10)
    cal = tune_calibrator_perturbed("ts", blob_task.model, blob_task.val, schedule=zero)
    plain = fit_temperature(predict_logits(blob_task.model, blob_task.val))
    assert cal.T == pytest.approx(plain.T, rel=1e-9)


def test_ts_p_is_softer_than_ts(blob_task, tuned):
    val_logits = predict_logits(blob_task.model, blob_task.val)
    cals, _ = tune_perturbed(["ts"], blob_task.model, blob_task.val, schedule=tuned)
    t_plain = fit_temperature(val_logits).T
    assert cals["ts"].T >= t_plain
    # the grid oracle sees the same ordering on both sets
    pert = predict_logits(blob_task.model, build_perturbed_valset(blob_task.val, tuned, seed=1))
    grid_plain, _ = temperature_grid_search(val_logits.logits, val_logits.labels)
    grid_pert, _ = temperature_grid_search(pert.logits, pert.labels)
    assert grid_pert >= grid_plain
    assert temperature_nll(pert.logits, pert.labels, cals["ts"].T) <= temperature_nll(pert.logits, pert.labels, grid_pert) + 1e-6


def test_pipeline_is_deterministic(blob_task):
    cfg = TunerConfig(subsample_fraction=0.2)
    val = blob_task.val.subset(np.arange(300))
    a, sa = tune_perturbed(["ts", "ir"], blob_task.model, val, cfg)
    b, sb = tune_perturbed(["ts", "ir"], blob_task.model, val, cfg)
    assert sa == sb and sa.epsilons == sb.epsilons
    assert a == b
