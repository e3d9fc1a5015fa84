import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fusionrisk.logistic import (
    ConvergenceWarning,
    SeparationError,
    fit_logistic,
    logistic,
    logistic_gradient,
    to_logit,
)

# Frozen from tests/oracles.logistic_nelder_mead on the data built in _oracle_data().
ORACLE_L2_0 = (0.5526726897433274, 1.0509239787776845)
ORACLE_L2_01 = (0.4884921549546289, 0.6184378774510095)


def _oracle_data():
    rng = np.random.default_rng(20240611)
    x = rng.normal(size=200)
    y = (rng.random(200) < 1 / (1 + np.exp(-(0.4 + 1.3 * x)))).astype(int)
    return x, y


def test_to_logit_examples():
    assert to_logit(0.5) == 0.0
    assert to_logit(0.9) == pytest.approx(math.log(9), abs=1e-12)
    assert to_logit(0.0) == pytest.approx(-13.815510, abs=1e-6)
    assert to_logit(1.0) == pytest.approx(13.815510, abs=1e-6)


@pytest.mark.parametrize("bad", [float("nan"), -0.1, 1.5])
def test_to_logit_rejects(bad):
    with pytest.raises(ValueError):
        to_logit(bad)


@given(st.floats(-13, 13))
def test_to_logit_inverts_logistic(x):
    assert abs(to_logit(logistic(x)) - x) < 1e-9


@pytest.mark.parametrize("l2, expected", [(0.0, ORACLE_L2_0), (0.1, ORACLE_L2_01)])
def test_single_feature_matches_derivative_free_oracle(l2, expected):
    x, y = _oracle_data()
    fit = fit_logistic(x, y, l2=l2)
    assert fit.converged
    assert fit.intercept == pytest.approx(expected[0], abs=1e-4)
    assert fit.coef[0] == pytest.approx(expected[1], abs=1e-4)


def test_gradient_at_solution_is_below_tolerance():
    x, y = _oracle_data()
    X = np.column_stack([x, x**2])
    fit = fit_logistic(X, y, l2=0.05, tol=1e-9)
    g = logistic_gradient(fit.coef, fit.intercept, X, y, l2=0.05)
    assert np.linalg.norm(g) <= 1e-9


def test_no_information_limit():
    rng = np.random.default_rng(5)
    n = 10_000
    X = rng.normal(size=(n, 2))
    y = (rng.random(n) < 0.11).astype(int)
    fit = fit_logistic(X, y)
    assert np.all(np.abs(fit.coef) < 0.05)
    assert fit.intercept == pytest.approx(math.log(0.11 / 0.89), abs=0.05)


def test_duplicating_rows_leaves_fit_unchanged():
    x, y = _oracle_data()
    a = fit_logistic(x, y, l2=0.1)
    b = fit_logistic(np.r_[x, x], np.r_[y, y], l2=0.1)
    assert b.intercept == pytest.approx(a.intercept, abs=1e-9)
    assert b.coef == pytest.approx(a.coef, abs=1e-9)


def test_single_class_rejected():
    with pytest.raises(ValueError, match="single class"):
        fit_logistic(np.arange(5.0), np.ones(5))


def test_separable_data_hits_guard():
    x = np.linspace(-1, 1, 40)
    y = (x > 0).astype(int)
    with pytest.raises(SeparationError):
        fit_logistic(x, y)
    assert fit_logistic(x, y, l2=0.01).converged


def test_non_convergence_returns_partial_fit_with_flag():
    x, y = _oracle_data()
    with pytest.warns(ConvergenceWarning):
        fit = fit_logistic(x, y, max_iter=1)
    assert not fit.converged
    assert fit.n_iter == 1


def test_intercept_only_and_offset():
    y = np.array([0, 0, 0, 1])
    fit = fit_logistic(np.zeros((4, 0)), y)
    assert fit.intercept == pytest.approx(math.log(1 / 3))
    off = np.array([0.5, -0.5, 1.0, 2.0])
    fit = fit_logistic(np.zeros((4, 0)), y, offset=off)
    assert abs(np.mean(logistic(fit.intercept + off)) - 0.25) < 1e-8
