"""Post-processing of (hour x variable) saliency grids."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np

HOURS = 48


@dataclass(frozen=True)
class AttributionMatrix:
    values: np.ndarray
    variables: tuple[str, ...]
    observed: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "variables", tuple(self.variables))
        if v.ndim != 2 or v.shape[1] != len(self.variables):
            raise ValueError(f"values must be (hours, {len(self.variables)}), got {v.shape}")
        if self.observed is not None:
            obs = np.asarray(self.observed)
            if obs.shape != v.shape:
                raise ValueError("observed values must match the saliency grid")
            object.__setattr__(self, "observed", obs)

    @property
    def hours(self) -> int:
        return self.values.shape[0]

    def to_dict(self) -> dict:
        d = {
            "shape": list(self.values.shape),
            "variables": list(self.variables),
            "values": self.values.ravel().tolist(),
        }
        if self.observed is not None:
            d["observed"] = np.asarray(self.observed).ravel().tolist()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "AttributionMatrix":
        shape = tuple(d["shape"])
        vals = np.asarray(d["values"], dtype=float)
        if vals.size != math.prod(shape):
            raise ValueError("values length does not match shape")
        obs = d.get("observed")
        return cls(
            vals.reshape(shape),
            tuple(d["variables"]),
            None if obs is None else np.asarray(obs, dtype=object).reshape(shape),
        )


@dataclass(frozen=True)
class AggregatedFeature:
    name: str
    attribution: np.ndarray | float
    label: str | None = None


def aggregate_onehot(
    attr,
    groups: Mapping[str, Sequence[int]],
    observed=None,
    categories: Mapping[str, Sequence[str]] | None = None,
) -> dict[str, AggregatedFeature]:
    """Sum attributions over the columns of each feature group (last axis).

    ``groups`` must partition the columns. For groups listed in ``categories``
    the active one-hot column of ``observed`` (its last row if 2-D) is decoded
    to the category name.
    """
    attr = np.asarray(attr, dtype=float)
    ncol = attr.shape[-1]
    cols = [c for idx in groups.values() for c in idx]
    if len(cols) != len(set(cols)):
        raise ValueError("feature groups overlap")
    if sorted(cols) != list(range(ncol)):
        raise ValueError("feature groups do not cover every column exactly once")
    out = {}
    for name, idx in groups.items():
        idx = list(idx)
        total = attr[..., idx].sum(axis=-1)
        label = None
        if categories and name in categories and observed is not None:
            obs = np.asarray(observed, dtype=float)
            row = obs[..., idx]
            if row.ndim > 1:
                row = row.reshape(-1, len(idx))[-1]
            if np.any(row != 0):
                label = categories[name][int(np.argmax(row))]
        out[name] = AggregatedFeature(name, float(total) if np.ndim(total) == 0 else total, label)
    return out


def aggregate_matrix(m: AttributionMatrix, groups: Mapping[str, Sequence[int]]) -> AttributionMatrix:
    """Collapse one-hot column groups of a saliency grid into one column per variable."""
    agg = aggregate_onehot(m.values, groups)
    values = np.column_stack([agg[g].attribution for g in groups])
    return AttributionMatrix(values, tuple(groups))


@dataclass(frozen=True)
class Drivers:
    positive: list[tuple[Hashable, float]]
    negative: list[tuple[Hashable, float]]


def _items(values) -> list[tuple[Hashable, float]]:
    if isinstance(values, Mapping):
        return [(k, float(v)) for k, v in values.items()]
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        return [(i, float(v)) for i, v in enumerate(arr)]
    return [(idx, float(v)) for idx, v in np.ndenumerate(arr)]


def top_k_drivers(values, k: int) -> Drivers:
    """Top-``k`` positive values (descending) and negative values (ascending); zeros excluded.

    ``values`` is a mapping name -> saliency, or an array whose indices serve as names.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    items = _items(values)
    pos = sorted((it for it in items if it[1] > 0), key=lambda it: -it[1])[:k]
    neg = sorted((it for it in items if it[1] < 0), key=lambda it: it[1])[:k]
    return Drivers(pos, neg)


def matrix_drivers(m: AttributionMatrix, k: int) -> Drivers:
    """Top-k cells keyed by ``(hour, variable)``."""
    cells = {(h, var): m.values[h, j] for h in range(m.hours) for j, var in enumerate(m.variables)}
    return top_k_drivers(cells, k)


def rank_features(m: AttributionMatrix) -> list[tuple[str, float]]:
    """Variables ordered by mean |saliency| over hours, largest first."""
    means = np.abs(m.values).mean(axis=0)
    order = np.argsort(-means, kind="mergesort")
    return [(m.variables[j], float(means[j])) for j in order]


@dataclass(frozen=True)
class SaliencyWindow:
    variable: str
    start: int
    end: int
    sign: int
    peak_hour: int
    peak_saliency: float
    observed_at_peak: object = None


def saliency_windows(m: AttributionMatrix, min_len: int = 2) -> list[SaliencyWindow]:
    """Maximal runs of same-sign nonzero saliency, per variable, at least ``min_len`` hours long."""
    out = []
    signs = np.sign(m.values).astype(int)
    for j, var in enumerate(m.variables):
        col = signs[:, j]
        h = 0
        while h < m.hours:
            sgn = col[h]
            end = h
            while end + 1 < m.hours and col[end + 1] == sgn:
                end += 1
            if sgn != 0 and end - h + 1 >= min_len:
                seg = np.abs(m.values[h : end + 1, j])
                peak = h + int(np.argmax(seg))
                obs = None if m.observed is None else m.observed[peak, j]
                if isinstance(obs, np.generic):
                    obs = obs.item()
                out.append(SaliencyWindow(var, h, end, int(sgn), peak, float(m.values[peak, j]), obs))
            h = end + 1
    return out


def heatmap_mask(m: AttributionMatrix | np.ndarray, top_frac: float = 0.10) -> np.ndarray:
    """Cells whose |saliency| reaches the nearest-rank top-``top_frac`` threshold."""
    if not 0.0 < top_frac <= 1.0:
        raise ValueError("top_frac must lie in (0, 1]")
    vals = m.values if isinstance(m, AttributionMatrix) else np.asarray(m, dtype=float)
    mag = np.abs(vals)
    flat = np.sort(mag.ravel())[::-1]
    keep = max(1, math.ceil(top_frac * flat.size - 1e-9))
    return mag >= flat[keep - 1]


def render_drivers(m: AttributionMatrix, k: int = 10) -> str:
    """Plain-text ranked tables of the strongest cells and variables."""
    d = matrix_drivers(m, k)
    lines = ["Risk-increasing cells (hour, variable, saliency):"]
    lines += [f"  {h:>3}  {var:<32} {v:+.4g}" for (h, var), v in d.positive] or ["  (none)"]
    lines.append("Risk-reducing cells (hour, variable, saliency):")
    lines += [f"  {h:>3}  {var:<32} {v:+.4g}" for (h, var), v in d.negative] or ["  (none)"]
    lines.append("Variables by mean |saliency|:")
    lines += [f"  {var:<32} {v:.4g}" for var, v in rank_features(m)[:k]]
    return "\n".join(lines)
