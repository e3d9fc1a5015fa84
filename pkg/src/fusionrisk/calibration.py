"""Post-hoc calibration maps, validation-ECE selection and missing-modality fallback."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .logistic import fit_logistic, logistic, mean_log_loss, to_logit
from .metrics import ece_equal_frequency

KINDS = ("platt", "temperature", "isotonic")
T_MIN, T_MAX = 0.05, 20.0
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Calibrator:
    """A fitted monotone map from raw to calibrated probabilities.

    ``params`` holds ``a``/``b`` for platt, ``T`` for temperature and
    ``x``/``y`` knot arrays for isotonic.
    """

    kind: str
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS + ("identity",):
            raise ValueError(f"unknown calibrator kind {self.kind!r}")
        if self.kind == "temperature" and not T_MIN <= self.params["T"] <= T_MAX:
            raise ValueError(f"temperature must lie in [{T_MIN}, {T_MAX}]")
        if self.kind == "isotonic":
            x = np.asarray(self.params["x"], float)
            y = np.asarray(self.params["y"], float)
            if len(x) == 0 or x.shape != y.shape:
                raise ValueError("isotonic knots must be non-empty arrays of equal length")
            if np.any(np.diff(x) <= 0):
                raise ValueError("isotonic knot abscissae must be strictly increasing")
            if np.any(np.diff(y) < 0):
                raise ValueError("isotonic ordinates must be non-decreasing")
            object.__setattr__(self, "params", {"x": x, "y": y})

    def apply(self, scores):
        s = np.asarray(scores, dtype=float)
        if np.isnan(s).any() or ((s < 0) | (s > 1)).any():
            raise ValueError("scores must be probabilities in [0,1]")
        if self.kind == "platt":
            out = logistic(self.params["a"] * to_logit(s) + self.params["b"])
        elif self.kind == "temperature":
            out = logistic(to_logit(s) / self.params["T"])
        elif self.kind == "isotonic":
            # np.interp clamps to the end ordinates outside the knot range
            out = np.interp(s, self.params["x"], self.params["y"])
        else:
            out = s.copy() if s.ndim else s
        if np.ndim(out) == 0:
            return float(out)
        return out

    def to_dict(self) -> dict:
        params = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()}
        return {"format_version": FORMAT_VERSION, "kind": self.kind, "params": params}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Calibrator":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported calibrator format_version {d.get('format_version')!r}")
        return cls(d["kind"], dict(d["params"]))


IDENTITY = Calibrator("identity")


def apply_calibrator(cal: Calibrator, score):
    return cal.apply(score)


def _binary(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if len(y) == 0 or y.min() == y.max():
        raise ValueError("calibration needs both classes")
    return s, y.astype(float)


def fit_platt(scores, labels, l2: float = 0.0) -> Calibrator:
    """Logistic regression of labels on the clipped score logit."""
    s, y = _binary(scores, labels)
    fit = fit_logistic(to_logit(s)[:, None], y, l2=l2)
    return Calibrator("platt", {"a": float(fit.coef[0]), "b": fit.intercept})


def _golden_section(f, lo: float, hi: float, xtol: float) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > xtol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def fit_temperature(scores, labels, xtol: float = 1e-4) -> Calibrator:
    """Single temperature ``T`` in [0.05, 20] minimizing log-loss of ``logistic(z / T)``.

    The loss is convex in 1/T, hence unimodal in T, so golden-section search
    brackets the minimizer to ``xtol``.
    """
    s, y = _binary(scores, labels)
    z = to_logit(s)
    T = _golden_section(lambda t: mean_log_loss(z / t, y), T_MIN, T_MAX, xtol)
    return Calibrator("temperature", {"T": float(T)})


def pava(y, w=None) -> np.ndarray:
    """Weighted least-squares non-decreasing fit of ``y`` (pool adjacent violators).

    Adjacent blocks are pooled until block means are strictly increasing.
    """
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    means, weights, sizes = [], [], []
    for yi, wi in zip(y, w):
        means.append(yi)
        weights.append(wi)
        sizes.append(1)
        while len(means) > 1 and means[-2] >= means[-1]:
            m2, w2, n2 = means.pop(), weights.pop(), sizes.pop()
            m1, w1, n1 = means.pop(), weights.pop(), sizes.pop()
            wt = w1 + w2
            means.append((w1 * m1 + w2 * m2) / wt)
            weights.append(wt)
            sizes.append(n1 + n2)
    return np.repeat(means, sizes)


def fit_isotonic(scores, labels) -> Calibrator:
    """Isotonic calibration; tied scores are pooled into one weighted point first.

    Knots keep both ends of every pooled block, so linear interpolation is flat
    inside blocks and linear between them.
    """
    s, y = _binary(scores, labels)
    if len(s) < 2:
        raise ValueError("isotonic calibration needs at least 2 points")
    xs, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    sums = np.bincount(inv, weights=y)
    fitted = pava(sums / counts, counts)
    keep = np.ones(len(xs), dtype=bool)
    # interior points of a constant run carry no information for interpolation
    same_prev = np.r_[False, fitted[1:] == fitted[:-1]]
    same_next = np.r_[fitted[:-1] == fitted[1:], False]
    keep &= ~(same_prev & same_next)
    return Calibrator("isotonic", {"x": xs[keep], "y": fitted[keep]})


_FITTERS = {"platt": fit_platt, "temperature": fit_temperature, "isotonic": fit_isotonic}


@dataclass(frozen=True)
class CalibratorSelection:
    chosen: Calibrator
    ece: dict[str, float]
    raw_ece: float
    tie: bool
    failures: dict[str, str]
    candidates: dict[str, Calibrator]

    def to_dict(self) -> dict:
        return {
            "chosen": self.chosen.kind,
            "calibrator": self.chosen.to_dict(),
            "validation_ece": self.ece,
            "raw_validation_ece": self.raw_ece,
            "tie": self.tie,
            "failures": self.failures,
        }


def select_calibrator(
    val_scores,
    val_labels,
    candidates: Sequence[str] = KINDS,
    bins: int = 20,
) -> CalibratorSelection:
    """Fit each candidate on validation data and keep the lowest validation ECE.

    Exact ties resolve in the order platt < temperature < isotonic and set
    ``tie``. Candidates that fail to fit are recorded in ``failures``.
    """
    unknown = [c for c in candidates if c not in KINDS]
    if unknown:
        raise ValueError(f"unknown calibrator kind(s): {unknown}")
    fitted, eces, failures = {}, {}, {}
    for kind in sorted(candidates, key=KINDS.index):
        try:
            cal = _FITTERS[kind](val_scores, val_labels)
        except (ValueError, ArithmeticError) as exc:
            failures[kind] = str(exc)
            continue
        fitted[kind] = cal
        eces[kind] = ece_equal_frequency(cal.apply(val_scores), val_labels, bins)
    if not fitted:
        raise ValueError(f"every calibrator failed: {failures}")
    best = min(eces.values())
    winners = [k for k in eces if eces[k] == best]
    return CalibratorSelection(
        chosen=fitted[winners[0]],
        ece=eces,
        raw_ece=ece_equal_frequency(val_scores, val_labels, bins),
        tie=len(winners) > 1,
        failures=failures,
        candidates=fitted,
    )


def save_calibrators(calibrators: Mapping[str, Calibrator], path, extra: Mapping | None = None) -> None:
    doc = {"format_version": FORMAT_VERSION, "calibrators": {k: c.to_dict() for k, c in calibrators.items()}}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_calibrators(path) -> dict[str, Calibrator]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported calibrator file version {doc.get('format_version')!r}")
    return {k: Calibrator.from_dict(v) for k, v in doc["calibrators"].items()}


# -- missing-modality fallback ---------------------------------------------


class FallbackScenario(str, enum.Enum):
    BOTH_PRESENT = "both_present"
    NOTES_ABSENT = "notes_absent"
    VITALS_ABSENT = "vitals_absent"


def fallback_scores(
    scenario: FallbackScenario | str,
    model,
    calibrators: Mapping[str, Calibrator],
    P,
    vitals: str = "ts",
    notes: str = "cn",
    mode: str = "single",
) -> np.ndarray:
    """Scores for an (n, k) probability matrix ordered as ``model.specialists``.

    ``single`` (default) returns the calibrated probability of the available
    branch. ``impute`` instead fills the missing branch's slot with that
    calibrated probability and runs the stacker.
    """
    scenario = FallbackScenario(scenario)
    P = np.asarray(P, dtype=float)
    names = list(model.specialists)
    if scenario is FallbackScenario.BOTH_PRESENT:
        return model.predict_proba(P)
    present, absent = (vitals, notes) if scenario is FallbackScenario.NOTES_ABSENT else (notes, vitals)
    if present not in names:
        raise KeyError(f"model has no specialist {present!r}")
    col = P[:, names.index(present)]
    if np.isnan(col).any():
        raise ValueError(f"scenario {scenario.value} requires {present!r} for every record")
    calibrated = calibrators[present].apply(col)
    if mode == "single":
        return calibrated
    if mode == "impute":
        filled = P.copy()
        filled[:, names.index(absent)] = calibrated
        return model.predict_proba(filled)
    raise ValueError(f"unknown fallback mode {mode!r}")


def fallback_predict(
    scenario: FallbackScenario | str,
    model,
    calibrators: Mapping[str, Calibrator],
    probs: Mapping[str, float],
    vitals: str = "ts",
    notes: str = "cn",
    mode: str = "single",
) -> float:
    """Single-record version of :func:`fallback_scores`; absent branches may be missing from ``probs``."""
    row = np.array([[np.nan if probs.get(s) is None else probs[s] for s in model.specialists]], dtype=float)
    scenario = FallbackScenario(scenario)
    if scenario is FallbackScenario.BOTH_PRESENT and np.isnan(row).any():
        raise ValueError("both_present requires every specialist")
    return float(fallback_scores(scenario, model, calibrators, row, vitals, notes, mode)[0])


def fallback_scenario_for(probs: Mapping[str, float], vitals: str = "ts", notes: str = "cn") -> FallbackScenario:
    """Route a record by which branches it carries."""
    has_v, has_n = probs.get(vitals) is not None, probs.get(notes) is not None
    if has_v and has_n:
        return FallbackScenario.BOTH_PRESENT
    if has_v:
        return FallbackScenario.NOTES_ABSENT
    if has_n:
        return FallbackScenario.VITALS_ABSENT
    raise ValueError("record carries neither branch")
