"""Discrimination and calibration metrics with percentile bootstrap intervals."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .logistic import fit_logistic, to_logit

METRIC_NAMES = (
    "auroc",
    "auprc",
    "f1",
    "precision",
    "recall",
    "accuracy",
    "balanced_accuracy",
    "brier",
    "ece",
    "slope",
    "intercept",
)


def _check(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{len(s)} scores but {len(y)} labels")
    if len(s) == 0:
        raise ValueError("empty input")
    if np.isnan(s).any():
        raise ValueError("NaN score")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return s, y.astype(int)


def auroc(scores, labels) -> float:
    """Mann-Whitney concordance: (wins + 0.5 * ties) / (n_pos * n_neg)."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both classes")
    # mid-ranks are multiples of 0.5, so the rank sum and U are exact in float
    uniq, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    midrank = ends - (counts - 1) / 2.0
    u = float(midrank[inv][y == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auprc(scores, labels) -> float:
    """Average precision with tied scores grouped into one threshold step."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("auprc needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_group = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp = np.cumsum(y_sorted)[last_of_group]
    seen = np.nonzero(last_of_group)[0] + 1
    precision = tp / seen
    d_tp = np.diff(np.r_[0, tp])
    return float(np.sum(d_tp / n_pos * precision))


@dataclass(frozen=True)
class ThresholdedMetrics:
    f1: float
    precision: float
    recall: float
    accuracy: float
    balanced_accuracy: float
    threshold: float
    undefined: tuple[str, ...] = ()

    def to_dict(self):
        return {
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
        }


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def thresholded_metrics(scores, labels, threshold: float = 0.5) -> ThresholdedMetrics:
    """Confusion-matrix metrics with ``score >= threshold`` as positive.

    Undefined ratios (zero denominator) are reported as 0 and named in
    ``undefined``.
    """
    s, y = _check(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    undefined: list[str] = []
    precision = _ratio(tp, tp + fp, "precision", undefined)
    recall = _ratio(tp, tp + fn, "recall", undefined)
    specificity = _ratio(tn, tn + fp, "specificity", undefined)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, "f1", undefined)
    if "recall" in undefined or "specificity" in undefined:
        undefined.append("balanced_accuracy")
    return ThresholdedMetrics(
        f1=f1,
        precision=precision,
        recall=recall,
        accuracy=(tp + tn) / len(y),
        balanced_accuracy=(recall + specificity) / 2.0,
        threshold=threshold,
        undefined=tuple(undefined),
    )


def brier(scores, labels) -> float:
    s, y = _check(scores, labels)
    return float(np.mean((s - y) ** 2))


@dataclass(frozen=True)
class ReliabilityBins:
    lower: np.ndarray
    upper: np.ndarray
    count: np.ndarray
    mean_predicted: np.ndarray
    event_rate: np.ndarray

    @property
    def n(self) -> int:
        return int(self.count.sum())

    def ece(self) -> float:
        w = self.count / self.count.sum()
        return float(np.sum(w * np.abs(self.mean_predicted - self.event_rate)))

    def rows(self) -> list[dict]:
        return [
            {
                "bin": i,
                "lower": float(self.lower[i]),
                "upper": float(self.upper[i]),
                "count": int(self.count[i]),
                "mean_predicted": float(self.mean_predicted[i]),
                "event_rate": float(self.event_rate[i]),
            }
            for i in range(len(self.count))
        ]


def reliability_bins(scores, labels, bins: int = 20) -> ReliabilityBins:
    """Equal-frequency bins over sorted scores, merging bins split by exact ties."""
    s, y = _check(scores, labels)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if len(s) < bins:
        raise ValueError(f"need at least {bins} scores for {bins} bins, got {len(s)}")
    order = np.argsort(s, kind="mergesort")
    s, y = s[order], y[order]
    edges = [0]
    for part in np.array_split(np.arange(len(s)), bins):
        edges.append(edges[-1] + len(part))
    # a boundary that cuts through a run of equal scores is dropped
    kept = [0] + [e for e in edges[1:-1] if s[e - 1] != s[e]] + [len(s)]
    lo, hi, cnt, mp, er = [], [], [], [], []
    for a, b in zip(kept[:-1], kept[1:]):
        lo.append(s[a])
        hi.append(s[b - 1])
        cnt.append(b - a)
        mp.append(s[a:b].mean())
        er.append(y[a:b].mean())
    return ReliabilityBins(np.array(lo), np.array(hi), np.array(cnt), np.array(mp), np.array(er))


def ece_equal_frequency(scores, labels, bins: int = 20) -> float:
    """Count-weighted mean |mean score - event rate| over equal-frequency bins."""
    return reliability_bins(scores, labels, bins).ece()


def calibration_slope_intercept(scores, labels, method: str = "joint") -> dict[str, float]:
    """Logistic recalibration of labels on the clipped score logit.

    ``joint`` fits slope and intercept together. ``offset`` fixes the slope at
    1 and fits only the intercept (calibration-in-the-large).
    """
    s, y = _check(scores, labels)
    if y.min() == y.max():
        raise ValueError("calibration slope needs both classes")
    z = to_logit(s)
    if method == "joint":
        fit = fit_logistic(z[:, None], y)
        return {"slope": float(fit.coef[0]), "intercept": fit.intercept}
    if method == "offset":
        fit = fit_logistic(np.empty((len(y), 0)), y, offset=z)
        return {"slope": 1.0, "intercept": fit.intercept}
    raise ValueError(f"unknown method {method!r}")


# -- bootstrap --------------------------------------------------------------

_BOOT_TAG = 0xB007


def _resample_rng(seed: int, r: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _BOOT_TAG, r, attempt])


def nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile of an ascending array: element ceil(q*N) (1-based)."""
    n = len(sorted_values)
    rank = min(max(math.ceil(q * n - 1e-9), 1), n)
    return float(sorted_values[rank - 1])


def bootstrap_distribution(
    metrics: Mapping[str, Callable],
    scores,
    labels,
    n_resamples: int = 1000,
    seed: int = 0,
    max_undefined_frac: float = 0.10,
) -> dict[str, np.ndarray]:
    """Evaluate every metric on the same ``n_resamples`` episode resamples.

    A metric callable may return a float or a mapping of named floats; mapping
    entries are stored under their own names. Resample ``r`` uses a generator
    derived from ``(seed, r, attempt)``. A resample on which any metric is
    undefined (raises ``ValueError``) is redrawn with the next attempt, with at
    most ``10 * n_resamples`` redraws in total. If more than
    ``max_undefined_frac`` of resamples needed a redraw, ``ValueError`` is raised.
    """
    s, y = _check(scores, labels)
    n = len(s)
    out: dict[str, np.ndarray] = {}
    redraws = 0
    undefined = 0
    for r in range(n_resamples):
        attempt = 0
        while True:
            idx = _resample_rng(seed, r, attempt).integers(0, n, n)
            try:
                vals = {name: fn(s[idx], y[idx]) for name, fn in metrics.items()}
                break
            except ValueError:
                if attempt == 0:
                    undefined += 1
                attempt += 1
                redraws += 1
                if redraws > 10 * n_resamples:
                    raise ValueError("bootstrap redraw budget exhausted; metric undefined on this data") from None
        for name, v in vals.items():
            items = v.items() if isinstance(v, Mapping) else ((name, v),)
            for key, val in items:
                if key not in out:
                    out[key] = np.empty(n_resamples)
                out[key][r] = val
    if undefined > max_undefined_frac * n_resamples:
        raise ValueError(f"metric undefined on {undefined} of {n_resamples} resamples")
    return out


@dataclass(frozen=True)
class BootstrapCI:
    mean: float
    low: float
    high: float
    n_resamples: int
    level: float


def _ci(values: np.ndarray, level: float) -> tuple[float, float]:
    v = np.sort(values)
    alpha = (1.0 - level) / 2.0
    return nearest_rank(v, alpha), nearest_rank(v, 1.0 - alpha)


def bootstrap_ci(metric: Callable, scores, labels, n_resamples: int = 1000, seed: int = 0, level: float = 0.95) -> BootstrapCI:
    """Percentile bootstrap interval of ``metric(scores, labels)``."""
    values = bootstrap_distribution({"m": metric}, scores, labels, n_resamples, seed)["m"]
    low, high = _ci(values, level)
    return BootstrapCI(float(values.mean()), low, high, n_resamples, level)


# -- full report ------------------------------------------------------------


@dataclass(frozen=True)
class MetricEstimate:
    point: float
    mean: float
    ci_low: float
    ci_high: float
    n_resamples: int


@dataclass
class MetricReport:
    metrics: dict[str, MetricEstimate]
    threshold: float
    ece_bins: int
    seed: int
    level: float
    n: int
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "threshold": self.threshold,
            "ece_bins": self.ece_bins,
            "bootstrap_seed": self.seed,
            "level": self.level,
            "flags": list(self.flags),
            "metrics": {
                k: {"point": m.point, "mean": m.mean, "ci_low": m.ci_low, "ci_high": m.ci_high, "n_resamples": m.n_resamples}
                for k, m in self.metrics.items()
            },
        }

    def rows(self) -> list[dict]:
        return [
            {"metric": k, "point": m.point, "mean": m.mean, "ci_low": m.ci_low, "ci_high": m.ci_high, "n_resamples": m.n_resamples}
            for k, m in self.metrics.items()
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()


REPORT_CSV_COLUMNS = ("metric", "point", "mean", "ci_low", "ci_high", "n_resamples")
BINS_CSV_COLUMNS = ("bin", "lower", "upper", "count", "mean_predicted", "event_rate")


def all_metrics(scores, labels, threshold: float = 0.5, bins: int = 20) -> dict[str, float]:
    """The whole evaluation metric set in one pass, keyed by :data:`METRIC_NAMES`."""
    s, y = _check(scores, labels)
    thr = thresholded_metrics(s, y, threshold).to_dict()
    cal = calibration_slope_intercept(s, y)
    out = {
        "auroc": auroc(s, y),
        "auprc": auprc(s, y),
        **thr,
        "brier": brier(s, y),
        "ece": ece_equal_frequency(s, y, bins),
        "slope": cal["slope"],
        "intercept": cal["intercept"],
    }
    return {k: float(out[k]) for k in METRIC_NAMES}


def evaluate_scores(
    scores,
    labels,
    threshold: float = 0.5,
    bins: int = 20,
    n_resamples: int = 1000,
    seed: int = 0,
    level: float = 0.95,
) -> MetricReport:
    """Point estimates plus paired bootstrap intervals for the whole metric set."""
    s, y = _check(scores, labels)
    point = all_metrics(s, y, threshold, bins)
    flags = [f"{u} undefined at threshold" for u in thresholded_metrics(s, y, threshold).undefined]
    if n_resamples > 0:
        fn = lambda a, b: all_metrics(a, b, threshold, bins)  # noqa: E731
        dist = bootstrap_distribution({"all": fn}, s, y, n_resamples, seed)
    metrics = {}
    for k in METRIC_NAMES:
        if n_resamples > 0:
            lo, hi = _ci(dist[k], level)
            metrics[k] = MetricEstimate(point[k], float(dist[k].mean()), lo, hi, n_resamples)
        else:
            metrics[k] = MetricEstimate(point[k], point[k], point[k], point[k], 0)
    return MetricReport(metrics, threshold, bins, seed, level, len(y), flags)
