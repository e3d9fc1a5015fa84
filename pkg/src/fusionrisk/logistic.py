"""Logit helpers and a damped Newton (IRLS) solver for small logistic models.

The same solver backs the stacking meta-learner, Platt scaling and the
recalibration slope/intercept, so all three share one convergence contract:
the returned parameters have a gradient norm at or below ``tol``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

CLIP = 1e-6
SEPARATION_GUARD = 35.0


class SeparationError(ValueError):
    """Raised when an unpenalized fit runs away because the classes separate."""


class ConvergenceWarning(UserWarning):
    pass


def to_logit(p):
    """Clipped log-odds, ``ln(p'/(1-p'))`` with ``p'`` clamped to [1e-6, 1-1e-6].

    Accepts a scalar or an array; scalars come back as ``float``.
    """
    arr = np.asarray(p, dtype=float)
    if np.isnan(arr).any():
        raise ValueError("NaN probability")
    if ((arr < 0.0) | (arr > 1.0)).any():
        raise ValueError("probability outside [0,1]")
    clipped = np.clip(arr, CLIP, 1.0 - CLIP)
    out = np.log(clipped) - np.log1p(-clipped)
    if out.ndim == 0:
        return float(out)
    return out


def logistic(x):
    out = expit(np.asarray(x, dtype=float))
    if out.ndim == 0:
        return float(out)
    return out


def mean_log_loss(eta: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy of labels ``y`` under linear predictor ``eta``."""
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta))


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    intercept: float
    n_iter: int
    loss: float
    grad_norm: float
    converged: bool
    l2: float


def _objective(theta, X1, y, offset, l2, penalize):
    eta = X1 @ theta + offset
    loss = mean_log_loss(eta, y) + 0.5 * l2 * float(np.sum((theta * penalize) ** 2))
    p = expit(eta)
    grad = X1.T @ (p - y) / len(y) + l2 * theta * penalize
    return loss, grad, p


def fit_logistic(
    X,
    y,
    l2: float = 0.0,
    tol: float = 1e-8,
    max_iter: int = 100,
    offset=None,
    separation_guard: float = SEPARATION_GUARD,
) -> LogisticFit:
    """Minimize mean log-loss + (l2/2)*||w||^2 with an unpenalized intercept.

    Parameters
    ----------
    X : array-like, shape (n, k)
        Feature matrix; ``k`` may be zero (intercept-only model).
    y : array-like of {0, 1}
    offset : array-like, optional
        Fixed per-row addition to the linear predictor.

    Non-convergence returns the partial fit with ``converged=False`` and a
    :class:`ConvergenceWarning`. With ``l2 == 0`` a coefficient vector whose
    norm exceeds ``separation_guard`` raises :class:`SeparationError`.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if len(y) != n:
        raise ValueError(f"X has {n} rows but y has {len(y)} labels")
    if n == 0:
        raise ValueError("empty training set")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise ValueError("labels contain a single class")
    if l2 < 0:
        raise ValueError("l2 must be >= 0")
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)

    X1 = np.hstack([np.ones((n, 1)), X])
    penalize = np.r_[0.0, np.ones(k)]
    theta = np.zeros(k + 1)
    # start the intercept at the base rate so intercept-only fits converge at once
    prev = y.mean()
    theta[0] = math.log(prev / (1.0 - prev)) - float(np.mean(off))

    loss, grad, p = _objective(theta, X1, y, off, l2, penalize)
    gnorm = float(np.linalg.norm(grad))
    it = 0
    while gnorm > tol and it < max_iter:
        it += 1
        w = p * (1.0 - p)
        H = (X1 * w[:, None]).T @ X1 / n + l2 * np.diag(penalize)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        slope = float(grad @ step)
        for _ in range(60):
            cand = theta - t * step
            c_loss, c_grad, c_p = _objective(cand, X1, y, off, l2, penalize)
            c_gnorm = float(np.linalg.norm(c_grad))
            if c_loss <= loss - 1e-4 * t * slope:
                break
            # loss differences below rounding: judge progress by the gradient
            if c_loss - loss <= 1e-14 * max(1.0, abs(loss)) and c_gnorm < gnorm:
                break
            t *= 0.5
        else:
            break
        theta, loss, grad, p, gnorm = cand, c_loss, c_grad, c_p, c_gnorm
        if l2 == 0.0 and np.linalg.norm(theta[1:]) > separation_guard:
            raise SeparationError(
                f"coefficient norm exceeded {separation_guard:g} after {it} iterations; "
                "classes look separable, set l2 > 0"
            )

    converged = gnorm <= tol
    if not converged:
        warnings.warn(
            f"logistic fit stopped after {it} iterations with gradient norm {gnorm:.3g}",
            ConvergenceWarning,
            stacklevel=2,
        )
    return LogisticFit(
        coef=theta[1:].copy(),
        intercept=float(theta[0]),
        n_iter=it,
        loss=loss,
        grad_norm=gnorm,
        converged=converged,
        l2=float(l2),
    )


def logistic_gradient(coef, intercept, X, y, l2: float = 0.0, offset=None) -> np.ndarray:
    """Gradient of the penalized mean log-loss at given parameters (intercept first)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    X1 = np.hstack([np.ones((n, 1)), X])
    theta = np.r_[intercept, np.asarray(coef, dtype=float)]
    return _objective(theta, X1, y, off, l2, np.r_[0.0, np.ones(k)])[1]
