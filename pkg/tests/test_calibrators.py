import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from driftcal.calibrators import (
    ETS,
    FITTERS,
    IRM,
    HistogramBins,
    Identity,
    Platt,
    StepMap,
    Temperature,
    calibrator_from_dict,
    calibrator_to_dict,
    fit_calibrator,
    fit_ets,
    fit_histogram_binning,
    fit_irm,
    fit_isotonic,
    fit_pbmc,
    fit_platt,
    fit_temperature,
    fit_ts_ir,
    load_calibrator,
    pava,
    save_calibrator,
    temperature_nll,
    top_label_margin,
)
from driftcal.data import LogitSet, softmax
from driftcal.errors import InvalidInputError, ParseError, VersionError

from .oracles import (
    isotonic_bruteforce,
    isotonic_bruteforce_batch,
    platt_grid_newton,
    platt_objective,
    softmax_rows,
    temperature_grid_search,
    top_margin,
)

PROPS = settings(max_examples=250, deadline=None)


def random_valset(seed, n=200, c=5, sharpen=0.5):
    """Logits with labels drawn from a tempered softmax, so the model is miscalibrated."""
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=3.0, size=(n, c))
    p = softmax_rows(sharpen * z)
    y = np.array([rng.choice(c, p=row) for row in p])
    return LogitSet(z, y)


# ---------------------------------------------------------------------------
# PAVA and step maps
# ---------------------------------------------------------------------------

def test_pava_examples():
    np.testing.assert_allclose(pava([0.8, 0.2, 0.6]), [0.5, 0.5, 0.6])
    np.testing.assert_array_equal(pava([0.1, 0.2, 0.2, 0.9]), [0.1, 0.2, 0.2, 0.9])
    np.testing.assert_allclose(pava([3.0, 1.0], [1.0, 3.0]), [1.5, 1.5])
    with pytest.raises(InvalidInputError):
        pava([1.0, 2.0], [1.0, 0.0])


def test_pava_matches_bruteforce_on_small_grids():
    grid = [0.0, 0.25, 0.5, 0.75, 1.0]
    for n in range(1, 7):
        inputs = np.array(list(itertools.product(grid, repeat=n)))
        oracle = isotonic_bruteforce_batch(inputs)
        for ys, expected in zip(inputs, oracle):
            np.testing.assert_allclose(pava(ys), expected, atol=1e-8)


def test_batch_oracle_agrees_with_scalar_oracle(rng):
    ys = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], size=(40, 5))
    batch = isotonic_bruteforce_batch(ys)
    for row, expected in zip(ys, batch):
        np.testing.assert_allclose(isotonic_bruteforce(row), expected)


@PROPS
@given(
    st.lists(st.floats(-5, 5), min_size=1, max_size=30),
    st.lists(st.floats(0.1, 5), min_size=30, max_size=30),
)
def test_pava_monotone_and_idempotent(values, weights):
    w = weights[: len(values)]
    fit = pava(values, w)
    assert np.all(np.diff(fit) >= -1e-12)
    np.testing.assert_allclose(pava(fit, w), fit, atol=1e-12)
    # weighted means are preserved by pooling
    assert np.dot(fit, w) == pytest.approx(np.dot(values, w), abs=1e-8)


def test_step_map_is_left_constant_and_clamped():
    f = StepMap((0.2, 0.5), (0.1, 0.7))
    np.testing.assert_array_equal(f([0.0, 0.2, 0.49, 0.5, 0.9]), [0.1, 0.1, 0.1, 0.7, 0.7])


def test_step_map_fit_on_ordered_data_is_identity_up_to_pooling():
    f = StepMap.fit([0.1, 0.4, 0.6, 0.9], [0.0, 0.0, 1.0, 1.0])
    np.testing.assert_array_equal(f([0.1, 0.4, 0.6, 0.9]), [0.0, 0.0, 1.0, 1.0])
    g = StepMap.fit([0.3, 0.3, 0.3], [1.0, 0.0, 0.0])
    assert g(0.7) == pytest.approx(1 / 3)


# ---------------------------------------------------------------------------
# Temperature scaling
# ---------------------------------------------------------------------------

def test_temperature_matches_grid_oracle():
    for seed in range(20):
        val = random_valset(seed, n=150, c=4, sharpen=np.random.default_rng(seed).uniform(0.2, 2.0))
        cal = fit_temperature(val)
        _, grid_nll = temperature_grid_search(val.logits, val.labels, 0.05, 50.0, 2000)
        assert 0.05 <= cal.T <= 50.0
        assert temperature_nll(val.logits, val.labels, cal.T) <= grid_nll + 1e-6


def test_temperature_one_when_already_calibrated():
    # each logit vector appears with label frequencies equal to its softmax
    z = [[np.log(3.0), 0.0]] * 4 + [[0.0, np.log(4.0)]] * 5
    y = [0, 0, 0, 1] + [0, 1, 1, 1, 1]
    assert fit_temperature((np.array(z), np.array(y))).T == pytest.approx(1.0, abs=1e-3)


def test_temperature_clamps_when_all_correct():
    z = np.array([[10.0, 0.0, -3.0], [0.0, 12.0, 1.0]])
    assert fit_temperature((z, np.array([0, 1]))).T == 0.05


def test_temperature_degenerate_logits():
    cal = fit_temperature((np.zeros((4, 3)), np.array([0, 1, 2, 0])))
    assert cal.T == 1.0 and not cal.report.converged


def test_temperature_never_worse_than_identity():
    for seed in range(10):
        val = random_valset(seed)
        cal = fit_temperature(val)
        assert cal.report.objective <= temperature_nll(val.logits, val.labels, 1.0) + 1e-12


def test_temperature_apply():
    z = np.array([2.0, 0.0])
    np.testing.assert_array_equal(Temperature(1.0).apply(z), softmax(z))
    p = Temperature(50.0).apply(z)
    assert 0.5 < p[0] < 0.52


# ---------------------------------------------------------------------------
# ETS
# ---------------------------------------------------------------------------

def test_ets_endpoints():
    z = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_allclose(ETS(1.7, (1.0, 0.0, 0.0)).apply(z), Temperature(1.7).apply(z))
    np.testing.assert_allclose(ETS(1.7, (0.0, 0.0, 1.0)).apply(z), np.full((5, 4), 0.25))


def test_ets_not_worse_than_ts():
    for seed in range(10):
        val = random_valset(seed)
        ts, ets = fit_temperature(val), fit_ets(val)
        assert sum(ets.weights) == pytest.approx(1.0, abs=1e-12)
        assert min(ets.weights) >= 0
        ets_nll = -np.mean(np.log(ets.apply(val.logits)[np.arange(len(val)), val.labels]))
        assert ets_nll <= ts.report.objective + 1e-9


# ---------------------------------------------------------------------------
# Platt and binning
# ---------------------------------------------------------------------------

def test_platt_examples():
    z = np.array([[0.0, 0.0]])  # margin 0
    assert top_label_margin(z)[0] == 0.0
    assert Platt(1.0, 0.0).confidence(z)[0] == 0.5
    zs = np.random.default_rng(1).normal(size=(6, 3))
    np.testing.assert_allclose(Platt(0.0, 0.7).confidence(zs), 1 / (1 + np.exp(-0.7)))


def test_margin_matches_oracle(rng):
    z = rng.normal(scale=4, size=(50, 6))
    np.testing.assert_allclose(top_label_margin(z), top_margin(z), atol=1e-12)
    np.testing.assert_allclose(1 / (1 + np.exp(-top_label_margin(z))), softmax(z).max(axis=1), atol=1e-12)


def test_platt_matches_oracle():
    for seed in range(5):
        val = random_valset(seed, n=120)
        cal = fit_platt(val)
        m = top_margin(val.logits)
        t = (np.argmax(val.logits, axis=1) == val.labels).astype(float)
        _, _, best = platt_grid_newton(m, t)
        assert platt_objective(m, t, cal.a, cal.b) <= best + 1e-6


def test_platt_flags_separable_targets():
    z = np.array([[3.0, 0.0], [0.0, 2.0]])
    cal = fit_platt((z, np.array([0, 1])))
    assert not cal.report.converged
    assert np.all(cal.confidence(z) > 0.99)


def test_histogram_binning_examples():
    z = np.log(np.array([[0.6, 0.4]] * 4))
    hb = fit_histogram_binning((z, np.array([0, 0, 1, 1])), num_bins=2)
    assert hb.values == (0.25, 0.5)  # empty first bin -> midpoint
    hb1 = fit_histogram_binning((z, np.zeros(4, dtype=int)), num_bins=1)
    assert hb1.values == (1.0,)
    lookup = HistogramBins((0.2, 0.9))
    p = lookup.apply(np.log([0.7, 0.2, 0.1]))
    assert p[0] == 0.9
    np.testing.assert_allclose(p[1:], [0.1 * 2 / 3, 0.1 / 3])


def test_pbmc_matches_two_stage_oracle():
    val = random_valset(3, n=20, c=3)
    cal = fit_pbmc(val, num_bins=4)
    conf = 1 / (1 + np.exp(-(cal.platt.a * top_margin(val.logits) + cal.platt.b)))
    expected = []
    for m in range(4):
        lo, hi = m / 4, (m + 1) / 4
        members = [c for c in conf if lo < c <= hi or (m == 0 and c == 0)]
        expected.append(np.mean(members) if members else (m + 0.5) / 4)
    np.testing.assert_allclose(cal.bins.values, expected, atol=1e-12)
    out = cal.apply(val.logits).max(axis=1)
    assert len(set(out.round(12))) <= 4


def test_pbmc_single_bin_is_constant():
    val = random_valset(4)
    cal = fit_pbmc(val, num_bins=1)
    np.testing.assert_allclose(cal.bins.values[0], np.mean(cal.platt.confidence(val.logits)))


# ---------------------------------------------------------------------------
# Isotonic family
# ---------------------------------------------------------------------------

def test_isotonic_constant_scores_give_prevalence():
    z = np.zeros((4, 2))
    cal = fit_isotonic((z, np.array([0, 0, 0, 1])))
    np.testing.assert_allclose(cal.apply(z), [[0.75, 0.25]] * 4)


def test_irm_matches_pava_on_pooled_pairs():
    val = random_valset(5, n=40, c=3)
    p = softmax(val.logits)
    onehot = np.eye(3)[val.labels]
    s, t = p.ravel(), onehot.ravel()
    order = np.argsort(s, kind="stable")
    oracle = pava(t[order])
    cal = fit_irm(val)
    np.testing.assert_allclose(cal.map(s[order]), oracle, atol=1e-12)


def test_ts_ir_composition():
    val = random_valset(6)
    cal = fit_ts_ir(val)
    np.testing.assert_allclose(
        cal.apply(val.logits), cal.isotonic.apply_probs(cal.temperature.apply(val.logits))
    )
    forced = fit_ts_ir(val, temperature=Temperature(1.0))
    np.testing.assert_array_equal(forced.apply(val.logits), fit_isotonic(val).apply(val.logits))


def test_ts_ir_improves_validation_nll():
    val = random_valset(7, n=400)
    rows = np.arange(len(val))
    raw = -np.mean(np.log(softmax(val.logits)[rows, val.labels]))
    fitted = -np.mean(np.log(np.maximum(fit_ts_ir(val).apply(val.logits)[rows, val.labels], 1e-12)))
    assert fitted <= raw


def test_isotonic_class_mismatch():
    cal = fit_isotonic(random_valset(0, c=3))
    with pytest.raises(InvalidInputError):
        cal.apply(np.zeros((2, 4)))


# ---------------------------------------------------------------------------
# Shared contracts
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def fitted():
    val = random_valset(11, n=300, c=10)
    cals = {kind: fit_calibrator(kind, val) for kind in FITTERS}
    cals["base"] = Identity()
    return cals


@pytest.mark.parametrize("c", [2, 10])
def test_argmax_preserved_on_random_vectors(c):
    rng = np.random.default_rng(c)
    val = random_valset(20 + c, n=300, c=c)
    cals = [fit_temperature(val), fit_ets(val), fit_irm(val), Temperature(0.3), ETS(2.0, (0.2, 0.5, 0.3))]
    z = rng.normal(scale=rng.uniform(0.5, 5.0), size=(1000, c))
    for cal in cals:
        assert np.array_equal(np.argmax(cal.apply(z), axis=1), np.argmax(z, axis=1)), cal.kind


logit_vectors = st.integers(2, 10).flatmap(
    lambda c: arrays(np.float64, c, elements=st.floats(-30, 30, allow_nan=False))
)


@PROPS
@given(logit_vectors)
def test_argmax_invariance_property(z):
    ranked = np.sort(z)
    if ranked[-1] - ranked[-2] < 1e-6:
        return
    val = random_valset(0, n=50, c=len(z))
    for cal in (Temperature(0.05), Temperature(7.0), ETS(3.0, (0.3, 0.3, 0.4)), fit_irm(val)):
        assert np.argmax(cal.apply(z)) == np.argmax(z)


@PROPS
@given(arrays(np.float64, (3, 10), elements=st.floats(-50, 50, allow_nan=False)))
def test_every_apply_returns_prob_vectors(fitted, z):
    for kind, cal in fitted.items():
        p = cal.apply(z)
        assert p.shape == z.shape, kind
        assert np.all((p >= 0) & (p <= 1)), kind
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9, err_msg=kind)


def test_single_vector_apply(fitted):
    z = np.linspace(-1, 1, 10)
    for cal in fitted.values():
        np.testing.assert_array_equal(cal.apply(z), cal.apply(z[None])[0])


@pytest.mark.parametrize("kind", sorted(FITTERS))
def test_fitting_is_deterministic(kind):
    a = fit_calibrator(kind, random_valset(9))
    b = fit_calibrator(kind, random_valset(9))
    assert json.dumps(calibrator_to_dict(a)) == json.dumps(calibrator_to_dict(b))
    assert a == b


def test_json_roundtrip(fitted, tmp_path):
    z = np.random.default_rng(2).normal(size=(20, 10))
    for kind, cal in fitted.items():
        path = tmp_path / f"{kind}.json"
        save_calibrator(cal, path)
        back = load_calibrator(path)
        assert back == cal
        np.testing.assert_array_equal(back.apply(z), cal.apply(z))


def test_calibrator_file_errors(tmp_path):
    with pytest.raises(VersionError):
        calibrator_from_dict({"format": "other", "kind": "ts"})
    with pytest.raises(ParseError):
        calibrator_from_dict({"format": "drift-calib-cal-v1", "kind": "ts"})
    with pytest.raises(ParseError):
        calibrator_from_dict({"format": "drift-calib-cal-v1", "kind": "bbq"})
    (tmp_path / "x.json").write_text("{")
    with pytest.raises(ParseError):
        load_calibrator(tmp_path / "x.json")
    with pytest.raises(InvalidInputError):
        fit_calibrator("dirichlet", random_valset(0))


def test_fit_accepts_record_lists():
    val = random_valset(1, n=30)
    assert fit_temperature(list(val)) == fit_temperature(val)
    assert isinstance(fit_calibrator("irm", (val.logits, val.labels)), IRM)
