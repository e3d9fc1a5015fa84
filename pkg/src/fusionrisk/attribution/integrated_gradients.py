"""Integrated Gradients over any scorer exposing ``value`` and ``gradient``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy.special import expit

TS_STEPS = 20
TOKEN_STEPS = 25


class DifferentiableScorer(Protocol):
    def value(self, x: np.ndarray) -> float: ...

    def gradient(self, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class IGConfig:
    steps: int = TS_STEPS
    baseline: np.ndarray | None = None
    scheme: str = "right"

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")
        if self.scheme not in ("right", "midpoint"):
            raise ValueError("scheme must be 'right' or 'midpoint'")


def _alphas(steps: int, scheme: str) -> np.ndarray:
    s = np.arange(1, steps + 1, dtype=float)
    if scheme == "midpoint":
        s -= 0.5
    return s / steps


def integrated_gradients(scorer: DifferentiableScorer, x, cfg: IGConfig | None = None) -> np.ndarray:
    """Riemann approximation of the path integral from the baseline to ``x``.

    The default right-endpoint rule evaluates the gradient at
    ``x0 + (s/S)(x - x0)`` for ``s = 1..S``. Input of any shape is accepted;
    the scorer sees it unchanged and the attribution has the same shape.
    """
    cfg = cfg or IGConfig()
    x = np.asarray(x, dtype=float)
    x0 = np.zeros_like(x) if cfg.baseline is None else np.asarray(cfg.baseline, dtype=float)
    if x0.shape != x.shape:
        raise ValueError(f"baseline shape {x0.shape} does not match input shape {x.shape}")
    diff = x - x0
    total = np.zeros_like(x)
    for a in _alphas(int(cfg.steps), cfg.scheme):
        g = np.asarray(scorer.gradient(x0 + a * diff), dtype=float)
        if g.shape != x.shape:
            raise ValueError(f"gradient shape {g.shape} does not match input shape {x.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient along the integration path")
        total += g
    return diff * total / cfg.steps


def completeness_gap(scorer: DifferentiableScorer, x, cfg: IGConfig | None, attributions) -> float:
    """``|sum(IG) - (f(x) - f(x0))|``."""
    cfg = cfg or IGConfig()
    x = np.asarray(x, dtype=float)
    x0 = np.zeros_like(x) if cfg.baseline is None else np.asarray(cfg.baseline, dtype=float)
    return float(abs(np.sum(attributions) - (scorer.value(x) - scorer.value(x0))))


class LinearScorer:
    """``logistic(w . x + b)``, or the affine score itself when ``target='logit'``."""

    def __init__(self, w, b: float = 0.0, target: str = "probability"):
        self.w = np.asarray(w, dtype=float)
        self.b = float(b)
        if target not in ("probability", "logit"):
            raise ValueError("target must be 'probability' or 'logit'")
        if not (np.all(np.isfinite(self.w)) and np.isfinite(self.b)):
            raise ValueError("non-finite parameters")
        self.target = target

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != self.w.shape:
            raise ValueError(f"input shape {x.shape} does not match weights {self.w.shape}")
        return x

    def value(self, x) -> float:
        t = float(np.sum(self.w * self._check(x))) + self.b
        return t if self.target == "logit" else float(expit(t))

    def gradient(self, x) -> np.ndarray:
        x = self._check(x)
        if self.target == "logit":
            return self.w.copy()
        p = expit(float(np.sum(self.w * x)) + self.b)
        return p * (1.0 - p) * self.w


class MLPScorer:
    """One tanh hidden layer then a logistic output::

        h = tanh(W1 @ x + b1);  t = w2 @ h + b2;  value = logistic(t)

    ``x`` may have any shape; it is flattened against the columns of ``W1``.
    """

    def __init__(self, W1, b1, w2, b2: float = 0.0, target: str = "probability", input_shape=None):
        self.W1 = np.asarray(W1, dtype=float)
        self.b1 = np.asarray(b1, dtype=float)
        self.w2 = np.asarray(w2, dtype=float)
        self.b2 = float(b2)
        if self.W1.ndim != 2 or self.b1.shape != (self.W1.shape[0],) or self.w2.shape != (self.W1.shape[0],):
            raise ValueError("layer shapes disagree")
        if target not in ("probability", "logit"):
            raise ValueError("target must be 'probability' or 'logit'")
        for arr in (self.W1, self.b1, self.w2, np.array(self.b2)):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite parameters")
        self.target = target
        self.input_shape = tuple(input_shape) if input_shape is not None else (self.W1.shape[1],)

    @classmethod
    def random(cls, n_in: int, n_hidden: int, rng: np.random.Generator, scale: float = 1.0, **kw) -> "MLPScorer":
        return cls(
            rng.normal(0, scale / np.sqrt(n_in), (n_hidden, n_in)),
            rng.normal(0, scale, n_hidden),
            rng.normal(0, scale * 2.0 / np.sqrt(n_hidden), n_hidden),
            float(rng.normal(0, scale)),
            **kw,
        )

    def _flat(self, x):
        x = np.asarray(x, dtype=float)
        if x.size != self.W1.shape[1]:
            raise ValueError(f"input has {x.size} values, network expects {self.W1.shape[1]}")
        return x.reshape(-1)

    def _forward(self, x):
        h = np.tanh(self.W1 @ self._flat(x) + self.b1)
        return h, float(self.w2 @ h) + self.b2

    def value(self, x) -> float:
        _, t = self._forward(x)
        return t if self.target == "logit" else float(expit(t))

    def gradient(self, x) -> np.ndarray:
        shape = np.shape(x)
        h, t = self._forward(x)
        dt_dx = self.W1.T @ (self.w2 * (1.0 - h * h))
        if self.target == "probability":
            p = expit(t)
            dt_dx = p * (1.0 - p) * dt_dx
        return dt_dx.reshape(shape)


def builtin_linear_scorer(w, b: float = 0.0, target: str = "probability") -> LinearScorer:
    return LinearScorer(w, b, target)


def builtin_mlp_scorer(W1, b1, w2, b2: float = 0.0, target: str = "probability") -> MLPScorer:
    return MLPScorer(W1, b1, w2, b2, target)
