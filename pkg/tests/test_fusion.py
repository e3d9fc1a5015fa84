import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionrisk.data import PredictionRecord, select_split, to_arrays
from fusionrisk.fusion import (
    AverageModel,
    StackingModel,
    Standardizer,
    agreement_label,
    agreement_labels,
    average_fusion,
    explain_case,
    fit_meta_logreg,
    fit_stacker,
    fit_standardizer,
    global_weights,
    load_model,
    model_from_dict,
    modality_contributions,
    percent_half_up,
    predict_meta,
    save_model,
    shares_from_contributions,
)
from fusionrisk.logistic import logistic, to_logit
from fusionrisk.metrics import auprc, auroc


def rec(p_ts, p_cn, label=0, split="validation", eid="e"):
    return PredictionRecord(eid, split, label, {"ts": p_ts, "cn": p_cn})


def identity_model(w, b=0.0, names=("ts", "cn")):
    return StackingModel(tuple(names), np.asarray(w, float), b, Standardizer.identity(names))


def p_of(z):
    return float(logistic(z))


# -- standardizer -----------------------------------------------------------


def test_two_point_standardizer():
    std = fit_standardizer([rec(0.5, 0.5, eid="a"), rec(p_of(2.0), p_of(2.0), eid="b")], ["ts", "cn"])
    assert std.mean[0] == pytest.approx(1.0)
    assert std.scale[0] == pytest.approx(1.0)
    assert std.apply("ts", 2.0) == pytest.approx(1.0)
    assert std.apply("cn", std.mean[1]) == 0.0


def test_standardizer_rejects_constant_and_missing():
    with pytest.raises(ValueError, match="zero variance"):
        fit_standardizer([rec(0.3, 0.1, eid="a"), rec(0.3, 0.2, eid="b")], ["ts", "cn"])
    with pytest.raises(ValueError, match="missing"):
        fit_standardizer([rec(0.3, 0.1, eid="a"), PredictionRecord("b", "validation", 0, {"ts": 0.4})], ["ts", "cn"])
    with pytest.raises(ValueError, match="at least 2"):
        fit_standardizer([rec(0.3, 0.1, eid="a")], ["ts", "cn"])


# -- predict / average / weights --------------------------------------------


def test_zero_weights_predict_half():
    m = identity_model([0, 0])
    assert predict_meta(m, {"ts": 0.01, "cn": 0.99}) == 0.5


def test_closed_form_prediction():
    m = identity_model([1, 1])
    p = predict_meta(m, {"ts": p_of(2.0), "cn": p_of(-1.0)})
    assert p == pytest.approx(0.731059, abs=1e-6)


def test_predict_requires_every_specialist():
    with pytest.raises(KeyError):
        predict_meta(identity_model([1, 1]), {"ts": 0.3})


def test_single_branch_weight_reproduces_branch_ranking(small_cohort):
    y, P = to_arrays(select_split(small_cohort, "test"), ["ts", "cn"])
    s = identity_model([1, 0]).predict_proba(P)
    assert auroc(s, y) == auroc(P[:, 0], y)
    assert auprc(s, y) == auprc(P[:, 0], y)


@pytest.mark.parametrize("probs, expected", [((0.2, 0.4), 0.3), ((0.7,), 0.7), ((0.0, 1.0), 0.5)])
def test_average_fusion(probs, expected):
    assert average_fusion(probs) == pytest.approx(expected)


def test_average_fusion_empty():
    with pytest.raises(ValueError):
        average_fusion([])


def test_average_model():
    assert AverageModel(("ts", "cn")).predict_proba([[0.2, 0.4]])[0] == pytest.approx(0.3)


@pytest.mark.parametrize("w, expected", [((1, 1), (0.5, 0.5)), ((3, -1), (0.75, 0.25)), ((2, 0), (1.0, 0.0))])
def test_global_weights(w, expected):
    g = global_weights(identity_model(w))
    assert (g["ts"], g["cn"]) == pytest.approx(expected)


def test_global_weights_all_zero():
    with pytest.raises(ValueError):
        global_weights(identity_model([0, 0]))


@settings(max_examples=50)
@given(
    st.floats(0.01, 5), st.floats(-3, 3), st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 3)
)
def test_prediction_increases_with_positive_weight(w0, w1, b, z1, dz):
    m = identity_model([w0, w1], b)
    z0 = -2.0
    lo = m.decision_function([[p_of(z0), p_of(z1)]])[0]
    hi = m.decision_function([[p_of(z0 + dz), p_of(z1)]])[0]
    assert hi > lo


# -- fitting ----------------------------------------------------------------


def test_stacker_gradient_is_below_tolerance(small_cohort):
    m = fit_stacker(small_cohort)
    d = m.diagnostics
    assert d.converged and d.grad_norm <= 1e-8
    assert np.all(m.weights > 0)


def test_fit_meta_logreg_row_requirement():
    with pytest.raises(ValueError, match="at least 3 rows"):
        fit_meta_logreg(np.zeros((2, 2)), [0, 1])


def test_fit_stacker_without_validation():
    with pytest.raises(ValueError, match="no validation records"):
        fit_stacker([rec(0.2, 0.3, split="test")])


def test_ensemble_beats_branches_on_complementary_cohort(small_cohort):
    m = fit_stacker(small_cohort)
    y, P = to_arrays(select_split(small_cohort, "test"), ["ts", "cn"])
    ens = m.predict_proba(P)
    assert auprc(ens, y) > max(auprc(P[:, 0], y), auprc(P[:, 1], y))


# -- attribution ------------------------------------------------------------


def test_contributions_closed_form():
    a = modality_contributions(identity_model([1, 1]), {"ts": p_of(2.0), "cn": p_of(-1.0)})
    assert a.contributions == pytest.approx([2.0, -1.0])
    assert a.shares == pytest.approx([2 / 3, 1 / 3])
    assert a.dominant == "ts" and not a.tie


def test_zero_notes_logit_gives_full_vitals_share():
    a = modality_contributions(identity_model([1, 1]), {"ts": 0.8, "cn": 0.5})
    assert a.shares.tolist() == [1.0, 0.0]


def test_all_zero_contributions_are_uniform_and_flagged():
    a = modality_contributions(identity_model([1, 1]), {"ts": 0.5, "cn": 0.5})
    assert a.shares.tolist() == [0.5, 0.5]
    assert a.all_zero and a.tie and a.dominant == "cn"


def test_equal_shares_break_ties_by_name():
    a = modality_contributions(identity_model([1, 1]), {"ts": p_of(1.5), "cn": p_of(-1.5)})
    assert a.tie and a.dominant == "cn"


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=2), st.floats(1e-3, 1e3))
def test_shares_scale_invariant_and_sum_to_one(c, k):
    c = np.array(c)
    s = shares_from_contributions(c)
    assert abs(s.sum() - 1) < 1e-12
    assert shares_from_contributions(k * c) == pytest.approx(s, abs=1e-12)


# -- agreement --------------------------------------------------------------


@pytest.mark.parametrize(
    "probs, label",
    [((0.2, 0.1), "agree_low"), ((0.8, 0.9), "agree_high"), ((0.7, 0.3), "conflict"), ((0.5, 0.2), "agree_low"), ((0.5, 0.6), "conflict")],
)
def test_agreement_label(probs, label):
    assert agreement_label(*probs) == label
    assert agreement_labels(np.array([probs]))[0] == label


# -- explanation ------------------------------------------------------------


def test_explanation_structure_at_half():
    m = identity_model([1, 1])
    e = explain_case(m, rec(0.5, 0.5, split="test"))
    assert e.ensemble_probability == 0.5
    assert e.predicted_class == 1
    assert e.equation.startswith("logit(p) = b_eff + w_ts*z_ts + w_cn*z_cn = ")
    assert e.equation.split(" = ")[2].count("+") == 2


def test_explanation_is_self_consistent(small_cohort):
    m = fit_stacker(small_cohort)
    for r in select_split(small_cohort, "test")[:200]:
        e = explain_case(m, r)
        assert abs(e.equation_value() - to_logit(e.ensemble_probability)) < 1e-9 * max(1, abs(e.ensemble_logit))
        assert e.dominant_percent == f"{math.floor(1000 * e.attribution.shares.max() + 0.5) / 10:.1f}"
        assert e.agreement == agreement_label(*e.votes.values())
        assert f"({e.dominant_percent}% share)" in e.render()


def test_dominant_percent_rounds_half_up():
    # 100 * 0.6125 = 61.25 exactly in binary floating point
    assert percent_half_up(0.6125) == "61.3"
    assert percent_half_up(np.float64(0.6124)) == "61.2"
    assert percent_half_up(1.0) == "100.0"


def test_equation_renders_three_significant_digits():
    m = StackingModel(("ts", "cn"), np.array([1.23456, -0.5]), -2.34567, Standardizer.identity(("ts", "cn")))
    e = explain_case(m, rec(p_of(1.0), p_of(2.0), split="test"))
    assert e.equation == "logit(p) = b_eff + w_ts*z_ts + w_cn*z_cn = -2.35 + 1.23*1 + (-0.5)*2 = -2.11"


def test_explain_requires_every_specialist():
    with pytest.raises(KeyError):
        explain_case(identity_model([1, 1]), PredictionRecord("x", "test", 0, {"cn": 0.4}))


# -- persistence ------------------------------------------------------------


def test_model_json_round_trip(tmp_path, small_cohort):
    m = fit_stacker(small_cohort)
    path = tmp_path / "model.json"
    save_model(m, path)
    doc = json.loads(path.read_text())
    assert doc["format_version"] == 1
    assert set(doc) >= {"specialists", "standardizer", "weights", "intercept", "diagnostics"}
    back = load_model(path)
    _, P = to_arrays(select_split(small_cohort, "test"), ["ts", "cn"])
    assert np.array_equal(back.predict_proba(P), m.predict_proba(P))


def test_unknown_format_version():
    with pytest.raises(ValueError, match="format_version"):
        model_from_dict({"format_version": 2, "meta": "avg", "specialists": ["ts"]})
