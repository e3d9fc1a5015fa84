"""Late fusion of specialist probabilities.

The stacker works on clipped specialist logits standardized with validation
statistics, and combines them linearly::

    logit(p_meta) = b_eff + sum_i w_i * z_i

Because the combination is linear, each episode's decision decomposes exactly
into per-specialist contributions ``c_i = w_i * z_i``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import PredictionRecord, select_split, to_arrays
from .logistic import SEPARATION_GUARD, fit_logistic, logistic, to_logit

FORMAT_VERSION = 1
AGREEMENT_LABELS = ("agree_low", "conflict", "agree_high")

__all__ = [
    "to_logit",
    "logistic",
    "Standardizer",
    "StackingModel",
    "AverageModel",
    "ModalityAttribution",
    "CaseExplanation",
    "fit_standardizer",
    "fit_meta_logreg",
    "fit_stacker",
    "predict_meta",
    "average_fusion",
    "global_weights",
    "modality_contributions",
    "agreement_label",
    "explain_case",
    "save_model",
    "load_model",
]


@dataclass(frozen=True)
class Standardizer:
    specialists: tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray

    def transform(self, logits) -> np.ndarray:
        """Standardize a logit vector or an (n, k) logit matrix."""
        return (np.asarray(logits, dtype=float) - self.mean) / self.scale

    def apply(self, name: str, z: float) -> float:
        j = self.specialists.index(name)
        return float((z - self.mean[j]) / self.scale[j])

    @classmethod
    def identity(cls, specialists: Sequence[str]) -> "Standardizer":
        k = len(specialists)
        return cls(tuple(specialists), np.zeros(k), np.ones(k))


def _fit_standardizer_logits(L: np.ndarray, specialists: Sequence[str]) -> Standardizer:
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[1] != len(specialists):
        raise ValueError("logit matrix must be (n, n_specialists)")
    if np.isnan(L).any():
        raise ValueError("missing specialist values in standardization data")
    if L.shape[0] < 2:
        raise ValueError("standardization needs at least 2 records")
    mean = L.mean(axis=0)
    # population (divide-by-n) convention
    scale = L.std(axis=0)
    bad = [s for s, sd in zip(specialists, scale) if not sd > 0]
    if bad:
        raise ValueError(f"zero variance in logits of {', '.join(bad)}")
    return Standardizer(tuple(specialists), mean, scale)


def fit_standardizer(records: Sequence[PredictionRecord], specialists: Sequence[str]) -> Standardizer:
    """Per-specialist mean and population std of clipped logits over ``records``."""
    _, P = to_arrays(records, specialists)
    if np.isnan(P).any():
        missing = [s for j, s in enumerate(specialists) if np.isnan(P[:, j]).any()]
        raise ValueError(f"missing specialist values for {', '.join(missing)}")
    return _fit_standardizer_logits(to_logit(P), specialists)


@dataclass(frozen=True)
class FitDiagnostics:
    n_iter: int
    loss: float
    grad_norm: float
    converged: bool
    l2: float
    n: int

    def to_dict(self):
        return {
            "n_iter": self.n_iter,
            "loss": self.loss,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "l2": self.l2,
            "n": self.n,
        }


@dataclass(frozen=True)
class StackingModel:
    specialists: tuple[str, ...]
    weights: np.ndarray
    intercept: float
    standardizer: Standardizer
    diagnostics: FitDiagnostics | None = None
    meta: str = field(default="logreg", init=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if w.shape != (len(self.specialists),):
            raise ValueError("one weight per specialist is required")
        if not (np.all(np.isfinite(w)) and np.isfinite(self.intercept)):
            raise ValueError("non-finite stacking parameters")

    def standardized(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        if np.isnan(P).any():
            raise ValueError("missing specialist probability; route the record to the fallback")
        return self.standardizer.transform(to_logit(P))

    def decision_function(self, P) -> np.ndarray:
        """Ensemble logit for an (n, k) probability matrix."""
        return self.intercept + self.standardized(P) @ self.weights

    def predict_proba(self, P) -> np.ndarray:
        return logistic(self.decision_function(P))

    def contributions(self, P) -> np.ndarray:
        """Per-episode ``w_i * z_i`` matrix, shape (n, k)."""
        return self.standardized(P) * self.weights


@dataclass(frozen=True)
class AverageModel:
    """Equal-weight mean of raw specialist probabilities."""

    specialists: tuple[str, ...]
    meta: str = field(default="avg", init=False)

    def predict_proba(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        if np.isnan(P).any():
            raise ValueError("missing specialist probability")
        return P.mean(axis=1)


def fit_meta_logreg(
    Z,
    y,
    specialists: Sequence[str] | None = None,
    standardizer: Standardizer | None = None,
    l2: float = 0.0,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> StackingModel:
    """Fit the logistic meta-learner on standardized validation logits ``Z``.

    Minimizes mean log-loss + (l2/2)*||w||^2 (intercept unpenalized) by damped
    Newton. With ``l2 == 0`` a weight norm above 35 aborts with
    :class:`~fusionrisk.logistic.SeparationError`.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    y = np.asarray(y)
    n, k = Z.shape
    if specialists is None:
        specialists = standardizer.specialists if standardizer else tuple(f"x{j}" for j in range(k))
    if len(specialists) != k:
        raise ValueError("specialist names do not match the number of columns")
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} rows to fit {k} weights and an intercept")
    fit = fit_logistic(Z, y, l2=l2, tol=tol, max_iter=max_iter, separation_guard=SEPARATION_GUARD)
    return StackingModel(
        specialists=tuple(specialists),
        weights=fit.coef,
        intercept=fit.intercept,
        standardizer=standardizer or Standardizer.identity(specialists),
        diagnostics=FitDiagnostics(fit.n_iter, fit.loss, fit.grad_norm, fit.converged, fit.l2, n),
    )


def fit_stacker(
    records: Sequence[PredictionRecord],
    specialists: Sequence[str] = ("ts", "cn"),
    l2: float = 0.0,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> StackingModel:
    """Standardize and fit on the validation split of ``records``."""
    val = select_split(records, "validation")
    if not val:
        raise ValueError("no validation records")
    std = fit_standardizer(val, specialists)
    y, P = to_arrays(val, specialists)
    return fit_meta_logreg(std.transform(to_logit(P)), y, specialists, std, l2=l2, tol=tol, max_iter=max_iter)


def _prob_vector(model, probs: Mapping[str, float]) -> np.ndarray:
    missing = [s for s in model.specialists if probs.get(s) is None]
    if missing:
        raise KeyError(f"record lacks specialist(s) {', '.join(missing)}; use the fallback route")
    return np.array([[probs[s] for s in model.specialists]], dtype=float)


def predict_meta(model: StackingModel | AverageModel, probs: Mapping[str, float]) -> float:
    """Ensemble probability for one record's specialist probabilities."""
    return float(model.predict_proba(_prob_vector(model, probs))[0])


def average_fusion(probs) -> float:
    """Arithmetic mean of the available probabilities."""
    values = list(probs.values()) if isinstance(probs, Mapping) else list(probs)
    if not values:
        raise ValueError("average_fusion needs at least one probability")
    return float(np.mean(values))


def global_weights(model: StackingModel | AverageModel) -> dict[str, float]:
    """Weights normalized by the sum of their absolute values."""
    if isinstance(model, AverageModel):
        k = len(model.specialists)
        return {s: 1.0 / k for s in model.specialists}
    a = np.abs(model.weights)
    total = a.sum()
    if total == 0:
        raise ValueError("all meta weights are zero")
    return {s: float(v / total) for s, v in zip(model.specialists, a)}


@dataclass(frozen=True)
class ModalityAttribution:
    specialists: tuple[str, ...]
    contributions: np.ndarray
    shares: np.ndarray
    dominant: str
    tie: bool = False
    all_zero: bool = False

    def to_dict(self):
        return {
            "contributions": dict(zip(self.specialists, map(float, self.contributions))),
            "shares": dict(zip(self.specialists, map(float, self.shares))),
            "dominant": self.dominant,
            "tie": self.tie,
            "all_zero": self.all_zero,
        }


def shares_from_contributions(C) -> np.ndarray:
    """Row-wise ``|c_i| / sum_j |c_j|``; rows of all zeros become uniform."""
    C = np.asarray(C, dtype=float)
    A = np.abs(C)
    tot = A.sum(axis=-1, keepdims=True)
    k = C.shape[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        S = np.where(tot > 0, A / np.where(tot > 0, tot, 1.0), 1.0 / k)
    return S


def _attribution(specialists, c) -> ModalityAttribution:
    shares = shares_from_contributions(c)
    all_zero = bool(np.all(c == 0))
    top = shares.max()
    leaders = sorted(s for s, v in zip(specialists, shares) if v == top)
    return ModalityAttribution(
        specialists=tuple(specialists),
        contributions=c,
        shares=shares,
        dominant=leaders[0],
        tie=len(leaders) > 1,
        all_zero=all_zero,
    )


def modality_contributions(model: StackingModel, probs: Mapping[str, float]) -> ModalityAttribution:
    c = model.contributions(_prob_vector(model, probs))[0]
    return _attribution(model.specialists, c)


def agreement_label(*probs: float) -> str:
    """Sign pattern of the raw clipped specialist logits.

    All logits <= 0 is ``agree_low`` (p = 0.5 counts as low), all > 0 is
    ``agree_high``, anything mixed is ``conflict``.
    """
    if len(probs) == 1 and not np.isscalar(probs[0]):
        probs = tuple(probs[0])
    if len(probs) < 2:
        raise ValueError("agreement needs at least two branch probabilities")
    z = np.asarray(to_logit(np.asarray(probs, dtype=float)))
    if np.all(z <= 0):
        return "agree_low"
    if np.all(z > 0):
        return "agree_high"
    return "conflict"


def agreement_labels(P) -> np.ndarray:
    """Vectorized :func:`agreement_label` over the rows of an (n, k) matrix."""
    Z = to_logit(np.asarray(P, dtype=float))
    out = np.full(Z.shape[0], "conflict", dtype=object)
    out[np.all(Z <= 0, axis=1)] = "agree_low"
    out[np.all(Z > 0, axis=1)] = "agree_high"
    return out


def _g3(x: float) -> str:
    return f"{x:.3g}"


def _paren(x: float) -> str:
    s = _g3(x)
    return f"({s})" if s.startswith("-") else s


def percent_half_up(share: float) -> str:
    """``100*share`` rounded half-up to one decimal, as text."""
    return str(Decimal(repr(float(100.0 * share))).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class CaseExplanation:
    episode_id: str
    votes: dict[str, float]
    ensemble_probability: float
    ensemble_logit: float
    predicted_class: int
    threshold: float
    intercept: float
    weights: dict[str, float]
    z: dict[str, float]
    attribution: ModalityAttribution
    agreement: str
    equation: str

    @property
    def dominant_percent(self) -> str:
        return percent_half_up(float(self.attribution.shares.max()))

    def equation_value(self) -> float:
        return self.intercept + float(np.sum(self.attribution.contributions))

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "votes": self.votes,
            "ensemble_probability": self.ensemble_probability,
            "ensemble_logit": self.ensemble_logit,
            "predicted_class": self.predicted_class,
            "threshold": self.threshold,
            "intercept": self.intercept,
            "weights": self.weights,
            "z": self.z,
            "attribution": self.attribution.to_dict(),
            "dominant_percent": self.dominant_percent,
            "agreement": self.agreement,
            "equation": self.equation,
        }

    def render(self) -> str:
        a = self.attribution
        lines = [f"Episode {self.episode_id}"]
        lines.append("Branch votes: " + ", ".join(f"{s}={p:.3f}" for s, p in self.votes.items()))
        lines.append(
            f"Ensemble probability: {self.ensemble_probability:.3f} -> class {self.predicted_class} "
            f"(threshold {self.threshold:g})"
        )
        lines.append(f"Decision: {self.equation}")
        lines.append(
            "Contributions: "
            + ", ".join(f"{s}={_g3(c)} ({percent_half_up(sh)}%)" for s, c, sh in zip(a.specialists, a.contributions, a.shares))
        )
        tie = " [tie]" if a.tie else ""
        zero = " [all contributions zero]" if a.all_zero else ""
        lines.append(f"Dominant modality: {a.dominant} ({self.dominant_percent}% share){tie}{zero}")
        lines.append(f"Agreement: {self.agreement}")
        return "\n".join(lines)


def explain_case(model: StackingModel, record: PredictionRecord, threshold: float = 0.5) -> CaseExplanation:
    P = _prob_vector(model, record.probs)
    z = model.standardized(P)[0]
    c = z * model.weights
    logit = float(model.decision_function(P)[0])
    prob = logistic(logit)
    names = model.specialists
    symbolic = " + ".join(["b_eff"] + [f"w_{s}*z_{s}" for s in names])
    numeric = " + ".join([_g3(model.intercept)] + [f"{_paren(w)}*{_paren(zi)}" for w, zi in zip(model.weights, z)])
    equation = f"logit(p) = {symbolic} = {numeric} = {_g3(logit)}"
    return CaseExplanation(
        episode_id=record.episode_id,
        votes={s: float(record.probs[s]) for s in names},
        ensemble_probability=prob,
        ensemble_logit=logit,
        predicted_class=int(prob >= threshold),
        threshold=threshold,
        intercept=float(model.intercept),
        weights=dict(zip(names, map(float, model.weights))),
        z=dict(zip(names, map(float, z))),
        attribution=_attribution(names, c),
        agreement=agreement_label(*P[0]),
        equation=equation,
    )


# -- persistence ------------------------------------------------------------


def model_to_dict(model: StackingModel | AverageModel) -> dict:
    if isinstance(model, AverageModel):
        return {"format_version": FORMAT_VERSION, "meta": "avg", "specialists": list(model.specialists)}
    return {
        "format_version": FORMAT_VERSION,
        "meta": "logreg",
        "specialists": list(model.specialists),
        "standardizer": {
            "mean": model.standardizer.mean.tolist(),
            "scale": model.standardizer.scale.tolist(),
        },
        "weights": model.weights.tolist(),
        "intercept": model.intercept,
        "diagnostics": model.diagnostics.to_dict() if model.diagnostics else None,
    }


def model_from_dict(d: Mapping) -> StackingModel | AverageModel:
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {version!r}")
    names = tuple(d["specialists"])
    if d["meta"] == "avg":
        return AverageModel(names)
    if d["meta"] != "logreg":
        raise ValueError(f"unknown meta-learner {d['meta']!r}")
    std = Standardizer(names, np.asarray(d["standardizer"]["mean"], float), np.asarray(d["standardizer"]["scale"], float))
    diag = FitDiagnostics(**d["diagnostics"]) if d.get("diagnostics") else None
    return StackingModel(names, np.asarray(d["weights"], float), float(d["intercept"]), std, diag)


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n", encoding="utf-8")


def load_model(path) -> StackingModel | AverageModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
