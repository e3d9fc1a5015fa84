"""Cohort-level analyses: calibration fitting, evaluation tables, robustness and agreement."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .calibration import KINDS, Calibrator, CalibratorSelection, FallbackScenario, fallback_scores, select_calibrator
from .data import PredictionRecord, select_split, to_arrays
from .fusion import AverageModel, StackingModel, agreement_labels, shares_from_contributions
from .logistic import to_logit
from .metrics import MetricReport, ReliabilityBins, evaluate_scores, reliability_bins

ENSEMBLE = "ensemble"
AGREEMENT_ORDER = ("agree_low", "conflict", "agree_high")


def complete_split(records: Sequence[PredictionRecord], split: str, specialists: Sequence[str]):
    """Labels and probability matrix of a split, keeping records that carry every specialist."""
    rows = select_split(records, split)
    if not rows:
        raise ValueError(f"no {split} records")
    y, P = to_arrays(rows, specialists)
    ok = ~np.isnan(P).any(axis=1)
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} {split} record(s) lack a specialist and were skipped", stacklevel=2)
    ids = [r.episode_id for r, keep in zip(rows, ok) if keep]
    return ids, y[ok], P[ok]


def fit_branch_calibrators(
    records: Sequence[PredictionRecord],
    specialists: Sequence[str],
    model: StackingModel | AverageModel | None = None,
    candidates: Sequence[str] = KINDS,
    bins: int = 20,
) -> dict[str, CalibratorSelection]:
    """Select a calibrator per branch (and for the ensemble when a model is given) on validation."""
    _, y, P = complete_split(records, "validation", specialists)
    out = {name: select_calibrator(P[:, j], y, candidates, bins) for j, name in enumerate(specialists)}
    if model is not None:
        out[ENSEMBLE] = select_calibrator(model.predict_proba(P[:, _cols(model, specialists)]), y, candidates, bins)
    return out


def _cols(model, specialists) -> list[int]:
    return [list(specialists).index(s) for s in model.specialists]


@dataclass(frozen=True)
class EvaluationRow:
    model: str
    stage: str
    calibrator: str | None
    report: MetricReport


def evaluate_cohort(
    records: Sequence[PredictionRecord],
    model: StackingModel | AverageModel,
    calibrators: Mapping[str, Calibrator] | None = None,
    threshold: float = 0.5,
    bins: int = 20,
    n_resamples: int = 1000,
    seed: int = 0,
    level: float = 0.95,
) -> tuple[list[EvaluationRow], dict[tuple[str, str], ReliabilityBins]]:
    """Test-split metrics for every branch and the ensemble, before and after calibration."""
    names = list(model.specialists)
    _, y, P = complete_split(records, "test", names)
    scores = {name: P[:, j] for j, name in enumerate(names)}
    scores[ENSEMBLE] = model.predict_proba(P)
    rows, rel = [], {}
    for name, s in scores.items():
        stages = [("pre", None, s)]
        if calibrators and name in calibrators:
            cal = calibrators[name]
            stages.append(("post", cal.kind, cal.apply(s)))
        for stage, kind, values in stages:
            rep = evaluate_scores(values, y, threshold, bins, n_resamples, seed, level)
            rows.append(EvaluationRow(name, stage, kind, rep))
            rel[(name, stage)] = reliability_bins(values, y, bins)
    return rows, rel


def robustness_table(
    records: Sequence[PredictionRecord],
    model: StackingModel,
    calibrators: Mapping[str, Calibrator],
    vitals: str = "ts",
    notes: str = "cn",
    mode: str = "single",
    threshold: float = 0.5,
    bins: int = 20,
    n_resamples: int = 1000,
    seed: int = 0,
    level: float = 0.95,
) -> list[EvaluationRow]:
    """Metrics under each deterministic missing-modality scenario on the test split."""
    _, y, P = complete_split(records, "test", model.specialists)
    rows = []
    for scenario in FallbackScenario:
        s = fallback_scores(scenario, model, calibrators, P, vitals, notes, mode)
        if scenario is FallbackScenario.BOTH_PRESENT:
            source = model.meta
        else:
            branch = vitals if scenario is FallbackScenario.NOTES_ABSENT else notes
            source = f"{branch}:{calibrators[branch].kind}"
        rep = evaluate_scores(s, y, threshold, bins, n_resamples, seed, level)
        rows.append(EvaluationRow(scenario.value, mode, source, rep))
    return rows


@dataclass(frozen=True)
class AgreementAnalysis:
    counts: list[dict]
    scatter: list[dict]
    shares: list[dict]
    histogram: list[dict]


def agreement_analysis(
    records: Sequence[PredictionRecord],
    model: StackingModel,
    vitals: str = "ts",
    notes: str = "cn",
    hist_bins: int = 20,
) -> AgreementAnalysis:
    """Agreement-category summary, logit scatter rows and modality-share rows for the test split."""
    names = list(model.specialists)
    ids, y, P = complete_split(records, "test", names)
    iv, ino = names.index(vitals), names.index(notes)
    raw = to_logit(P)
    labels = agreement_labels(P[:, [iv, ino]])
    p_meta = model.predict_proba(P)
    n = len(y)
    counts = []
    for cat in AGREEMENT_ORDER:
        m = labels == cat
        k = int(m.sum())
        counts.append(
            {
                "category": cat,
                "count": k,
                "prevalence": k / n,
                "pos_rate": float(y[m].mean()) if k else None,
                "meta_prob": float(p_meta[m].mean()) if k else None,
            }
        )
    scatter = [
        {
            "episode_id": e,
            f"z_{vitals}": float(raw[i, iv]),
            f"z_{notes}": float(raw[i, ino]),
            "p_meta": float(p_meta[i]),
            "label": int(y[i]),
            "category": labels[i],
        }
        for i, e in enumerate(ids)
    ]
    C = model.contributions(P)
    S = shares_from_contributions(C)
    share_rows = []
    for i, e in enumerate(ids):
        row = {"episode_id": e}
        for j, name in enumerate(names):
            row[f"c_{name}"] = float(C[i, j])
        for j, name in enumerate(names):
            row[f"share_{name}"] = float(S[i, j])
        share_rows.append(row)
    edges = np.linspace(0.0, 1.0, hist_bins + 1)
    hist, _ = np.histogram(S[:, ino], bins=edges)
    histogram = [
        {"lower": float(edges[b]), "upper": float(edges[b + 1]), f"count_{notes}_share": int(hist[b])}
        for b in range(hist_bins)
    ]
    return AgreementAnalysis(counts, scatter, share_rows, histogram)
