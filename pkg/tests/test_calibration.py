import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionrisk.calibration import (
    IDENTITY,
    Calibrator,
    FallbackScenario,
    apply_calibrator,
    fallback_predict,
    fallback_scenario_for,
    fallback_scores,
    fit_isotonic,
    fit_platt,
    fit_temperature,
    load_calibrators,
    pava,
    save_calibrators,
    select_calibrator,
)
from fusionrisk.data import select_split, to_arrays
from fusionrisk.fusion import fit_stacker
from fusionrisk.logistic import logistic, to_logit
from fusionrisk.metrics import auroc, ece_equal_frequency
from fusionrisk.pipeline import fit_branch_calibrators
from oracles import isotonic_exhaustive, isotonic_minmax


def calibrated_sample(n, seed, scale=1.0):
    """Calibrated probabilities p with Bernoulli(p) labels, and their logit-scaled distortion."""
    rng = np.random.default_rng(seed)
    p = logistic(rng.normal(-1.0, 1.5, n))
    y = (rng.random(n) < p).astype(int)
    return logistic(scale * to_logit(p)), y


# -- platt ------------------------------------------------------------------


@pytest.mark.slow
def test_platt_on_calibrated_and_distorted_input():
    s, y = calibrated_sample(100_000, 1)
    c = fit_platt(s, y)
    assert abs(c.params["a"] - 1) < 0.03 and abs(c.params["b"]) < 0.05
    s2, y2 = calibrated_sample(100_000, 1, scale=2.0)
    assert fit_platt(s2, y2).params["a"] == pytest.approx(0.5, abs=0.02)


def test_platt_preserves_auroc():
    s, y = calibrated_sample(3000, 2, scale=2.0)
    assert auroc(fit_platt(s, y).apply(s), y) == auroc(s, y)


def test_platt_single_class():
    with pytest.raises(ValueError):
        fit_platt([0.1, 0.3], [1, 1])


# -- temperature ------------------------------------------------------------


@pytest.mark.slow
def test_temperature_recovers_scale():
    s, y = calibrated_sample(100_000, 3)
    assert abs(fit_temperature(s, y).params["T"] - 1) < 0.05
    s2, y2 = calibrated_sample(100_000, 3, scale=2.0)
    assert fit_temperature(s2, y2).params["T"] == pytest.approx(2.0, abs=0.1)


def test_temperature_preserves_auroc_and_bounds():
    s, y = calibrated_sample(3000, 4, scale=0.5)
    cal = fit_temperature(s, y)
    assert 0.05 <= cal.params["T"] <= 20
    assert auroc(cal.apply(s), y) == auroc(s, y)
    with pytest.raises(ValueError):
        Calibrator("temperature", {"T": 25.0})


# -- isotonic / PAVA --------------------------------------------------------


def test_isotonic_examples():
    c = fit_isotonic([0.1, 0.2, 0.3, 0.4], [0, 0, 1, 1])
    assert c.apply(np.array([0.1, 0.2, 0.3, 0.4])).tolist() == [0, 0, 1, 1]
    c = fit_isotonic([0.1, 0.2], [1, 0])
    assert c.apply(np.array([0.1, 0.2])).tolist() == [0.5, 0.5]
    # (0, 0.5, 0.5) frozen from oracles.isotonic_minmax / isotonic_exhaustive
    c = fit_isotonic([0.1, 0.2, 0.3], [0, 1, 0])
    assert c.apply(np.array([0.1, 0.2, 0.3])).tolist() == [0.0, 0.5, 0.5]


def test_isotonic_clamps_and_interpolates():
    c = fit_isotonic([0.2, 0.4, 0.6, 0.8], [0, 0, 1, 1])
    assert c.apply(0.0) == 0.0
    assert c.apply(1.0) == 1.0
    assert c.apply(0.5) == pytest.approx(0.5)


def test_isotonic_pools_ties_first():
    c = fit_isotonic([0.3, 0.3, 0.3, 0.7], [0, 1, 1, 1])
    assert c.apply(0.3) == pytest.approx(2 / 3)


@settings(max_examples=300)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=9))
def test_pava_matches_exhaustive_partition_oracle(y):
    y = np.array(y, float)
    assert pava(y) == pytest.approx(isotonic_exhaustive(y), abs=1e-10)


@settings(max_examples=200)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.1, 10)), min_size=1, max_size=12))
def test_weighted_pava_matches_minmax_oracle(rows):
    y, w = map(np.array, zip(*rows))
    fit = pava(y, w)
    assert fit == pytest.approx(isotonic_minmax(y, w), abs=1e-10)
    assert np.all(np.diff(fit) >= 0)
    blocks = np.unique(fit)
    # KKT: distinct block means strictly increase
    assert np.all(np.diff(blocks) > 0)


def test_isotonic_only_turns_strict_pairs_into_ties():
    # A non-decreasing map can merge a discordant pair into a tie, which raises
    # AUROC, so the checkable property is on strict wins and strict losses.
    s, y = calibrated_sample(2000, 5, scale=2.0)
    post = fit_isotonic(s, y).apply(s)

    def strict_pairs(v):
        d = v[y == 1][:, None] - v[y == 0][None, :]
        return int((d > 0).sum()), int((d < 0).sum())

    wins_pre, losses_pre = strict_pairs(s)
    wins_post, losses_post = strict_pairs(post)
    assert wins_post <= wins_pre and losses_post <= losses_pre
    assert np.all(np.diff(post[np.argsort(s)]) >= 0)


def test_isotonic_knot_validation():
    with pytest.raises(ValueError):
        Calibrator("isotonic", {"x": [0.2, 0.1], "y": [0, 1]})
    with pytest.raises(ValueError):
        Calibrator("isotonic", {"x": [0.1, 0.2], "y": [1, 0]})


# -- apply ------------------------------------------------------------------


@given(st.floats(0, 1))
def test_identity_parameters(p):
    for cal in (Calibrator("platt", {"a": 1.0, "b": 0.0}), Calibrator("temperature", {"T": 1.0})):
        assert apply_calibrator(cal, p) == pytest.approx(min(max(p, 1e-6), 1 - 1e-6), rel=1e-9, abs=1e-15)


@given(st.floats(0, 1), st.floats(-5, 5), st.floats(-5, 5), st.floats(0.05, 20))
def test_outputs_are_probabilities(p, a, b, t):
    for cal in (Calibrator("platt", {"a": a, "b": b}), Calibrator("temperature", {"T": t})):
        assert 0.0 <= cal.apply(p) <= 1.0


def test_apply_rejects_bad_scores():
    with pytest.raises(ValueError):
        IDENTITY.apply([0.2, 1.2])


# -- selection --------------------------------------------------------------


def test_overconfident_branch_selection_reduces_ece():
    s, y = calibrated_sample(5000, 6, scale=2.0)
    sel = select_calibrator(s, y)
    assert set(sel.ece) == {"platt", "temperature", "isotonic"}
    assert sel.ece[sel.chosen.kind] < sel.raw_ece
    assert all(sel.ece[sel.chosen.kind] <= v for v in sel.ece.values())


def test_exact_tie_picks_platt_and_flags():
    s = np.full(40, 0.5)
    y = np.array([0, 1] * 20)
    sel = select_calibrator(s, y)
    assert sel.ece == {"platt": 0.0, "temperature": 0.0, "isotonic": 0.0}
    assert sel.chosen.kind == "platt" and sel.tie


def test_failed_candidates_are_recorded():
    # separable scores: platt hits the separation guard, the others still fit
    s = np.linspace(0.01, 0.99, 40)
    y = (s > 0.5).astype(int)
    sel = select_calibrator(s, y)
    assert "platt" in sel.failures
    assert sel.chosen.kind in ("temperature", "isotonic")


def test_all_candidates_fail():
    with pytest.raises(ValueError, match="every calibrator failed"):
        select_calibrator([0.2] * 30, [1] * 30)


def test_calibrator_file_round_trip(tmp_path):
    cals = {
        "ts": Calibrator("platt", {"a": 0.5, "b": -0.1}),
        "cn": fit_isotonic([0.1, 0.2, 0.3, 0.5], [0, 1, 0, 1]),
    }
    path = tmp_path / "cal.json"
    save_calibrators(cals, path)
    assert json.loads(path.read_text())["format_version"] == 1
    back = load_calibrators(path)
    x = np.linspace(0, 1, 11)
    for k in cals:
        assert np.array_equal(back[k].apply(x), cals[k].apply(x))


# -- fallback ---------------------------------------------------------------


@pytest.fixture(scope="module")
def fitted(small_cohort):
    model = fit_stacker(small_cohort)
    cals = {k: v.chosen for k, v in fit_branch_calibrators(small_cohort, ["ts", "cn"]).items()}
    _, P = to_arrays(select_split(small_cohort, "test"), ["ts", "cn"])
    return model, cals, P


def test_notes_absent_equals_calibrated_vitals(fitted):
    model, cals, P = fitted
    out = fallback_scores("notes_absent", model, cals, P)
    assert np.array_equal(out, cals["ts"].apply(P[:, 0]))


def test_both_present_passes_through(fitted):
    model, cals, P = fitted
    assert np.array_equal(fallback_scores(FallbackScenario.BOTH_PRESENT, model, cals, P), model.predict_proba(P))


def test_vitals_absent_with_identity(fitted):
    model, _, P = fitted
    out = fallback_scores("vitals_absent", model, {"cn": IDENTITY}, P)
    assert np.array_equal(out, P[:, 1])


def test_impute_mode_runs_stacker(fitted):
    model, cals, P = fitted
    out = fallback_scores("notes_absent", model, cals, P, mode="impute")
    filled = P.copy()
    filled[:, 1] = cals["ts"].apply(P[:, 0])
    assert np.array_equal(out, model.predict_proba(filled))


def test_single_record_fallback(fitted):
    model, cals, _ = fitted
    assert fallback_predict("notes_absent", model, cals, {"ts": 0.3}) == cals["ts"].apply(0.3)
    with pytest.raises(ValueError):
        fallback_predict("vitals_absent", model, cals, {"ts": 0.3})
    with pytest.raises(ValueError):
        fallback_predict("both_present", model, cals, {"ts": 0.3})


def test_scenario_routing():
    assert fallback_scenario_for({"ts": 0.1, "cn": 0.2}) is FallbackScenario.BOTH_PRESENT
    assert fallback_scenario_for({"ts": 0.1}) is FallbackScenario.NOTES_ABSENT
    assert fallback_scenario_for({"cn": 0.1}) is FallbackScenario.VITALS_ABSENT
    with pytest.raises(ValueError):
        fallback_scenario_for({})


def test_selection_is_fitted_on_validation_only(small_cohort):
    sel = fit_branch_calibrators(small_cohort, ["ts"])["ts"]
    y, P = to_arrays(select_split(small_cohort, "validation"), ["ts"])
    assert sel.raw_ece == ece_equal_frequency(P[:, 0], y)
