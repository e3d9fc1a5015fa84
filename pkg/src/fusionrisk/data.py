"""Episode records, prediction-file IO, cohort summaries and synthetic cohorts.

Prediction files carry one row per episode:

* JSON-lines: ``{"episode_id": "e1", "split": "test", "label": 1, "p_ts": 0.7, "p_cn": 0.9}``
* CSV: same columns, header required, an empty cell means "no prediction".

Every key/column named ``p_<name>`` is the probability of specialist ``<name>``.
A missing specialist is an absent key or empty cell, never 0.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm

SPLITS = ("train", "validation", "test")
PROB_PREFIX = "p_"
REQUIRED = ("episode_id", "split", "label")


class PredictionFileError(ValueError):
    """A prediction file failed validation; ``errors`` holds (row, message) pairs."""

    def __init__(self, path, errors):
        self.path = str(path)
        self.errors = list(errors)
        lines = [f"row {row}: {msg}" for row, msg in self.errors[:20]]
        more = len(self.errors) - len(lines)
        if more > 0:
            lines.append(f"... and {more} more")
        super().__init__(f"{self.path}: {len(self.errors)} invalid row(s)\n" + "\n".join(lines))


@dataclass(frozen=True)
class PredictionRecord:
    episode_id: str
    split: str
    label: int
    probs: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.episode_id, str) or not self.episode_id:
            raise ValueError("episode_id must be a non-empty string")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.label not in (0, 1) or isinstance(self.label, bool):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        probs = {}
        for name, p in self.probs.items():
            if isinstance(p, bool) or not isinstance(p, (int, float, np.floating)):
                raise ValueError(f"non-numeric probability for {name}: {p!r}")
            if math.isnan(p) or not 0.0 <= p <= 1.0:
                raise ValueError(f"probability outside [0,1] for {name}: {p!r}")
            probs[name] = float(p)
        object.__setattr__(self, "probs", probs)


def _parse_label(raw):
    if isinstance(raw, bool):
        raise ValueError(f"label must be 0 or 1, got {raw!r}")
    if isinstance(raw, int):
        return raw
    if isinstance(raw, float) and raw.is_integer():
        return int(raw)
    if isinstance(raw, str) and raw.strip() in ("0", "1"):
        return int(raw.strip())
    raise ValueError(f"label must be 0 or 1, got {raw!r}")


def _parse_prob(name, raw):
    if isinstance(raw, bool):
        raise ValueError(f"non-numeric probability for {name}: {raw!r}")
    try:
        p = float(raw)
    except (TypeError, ValueError):
        raise ValueError(f"non-numeric probability for {name}: {raw!r}") from None
    if math.isnan(p) or not 0.0 <= p <= 1.0:
        raise ValueError(f"probability outside [0,1] for {name}: {raw!r}")
    return p


def _row_to_record(row: Mapping) -> PredictionRecord:
    missing = [k for k in REQUIRED if k not in row or row[k] in (None, "")]
    if missing:
        raise ValueError(f"missing required field(s): {', '.join(missing)}")
    probs = {}
    for key, raw in row.items():
        if not key.startswith(PROB_PREFIX) or raw is None or raw == "":
            continue
        name = key[len(PROB_PREFIX):]
        probs[name] = _parse_prob(name, raw)
    return PredictionRecord(
        episode_id=str(row["episode_id"]),
        split=str(row["split"]),
        label=_parse_label(row["label"]),
        probs=probs,
    )


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix in (".jsonl", ".ndjson", ".json"):
        return "jsonl"
    if suffix == ".csv":
        return "csv"
    raise ValueError(f"cannot infer prediction file format from {path.name!r}; pass format='jsonl' or 'csv'")


def _iter_rows(path: Path, fmt: str):
    """Yield (row number, dict or exception) pairs; row numbers are 1-based data rows."""
    with open(path, newline="" if fmt == "csv" else None, encoding="utf-8") as fh:
        if fmt == "csv":
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                return
            for i, row in enumerate(reader, start=1):
                if None in row:
                    yield i, ValueError("unparseable row: more cells than header columns")
                else:
                    yield i, row
        else:
            for i, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    yield i, ValueError(f"unparseable row: {exc.msg}")
                    continue
                if not isinstance(obj, dict):
                    yield i, ValueError("unparseable row: expected a JSON object")
                else:
                    yield i, obj


def load_predictions(path, format: str | None = None, require: Sequence[str] | None = None) -> list[PredictionRecord]:
    """Parse a prediction file into records.

    All rows are validated before anything is returned; any failure raises
    :class:`PredictionFileError` listing every bad row. ``require`` drops
    (rather than rejects) records lacking any of the named specialists.
    """
    path = Path(path)
    fmt = format or _infer_format(path)
    if fmt not in ("jsonl", "csv"):
        raise ValueError(f"unknown format {fmt!r}")
    if not path.exists():
        raise FileNotFoundError(path)

    records, errors = [], []
    seen: dict[tuple[str, str], int] = {}
    for rownum, row in _iter_rows(path, fmt):
        if isinstance(row, Exception):
            errors.append((rownum, str(row)))
            continue
        try:
            rec = _row_to_record(row)
        except ValueError as exc:
            errors.append((rownum, str(exc)))
            continue
        key = (rec.split, rec.episode_id)
        if key in seen:
            errors.append((rownum, f"duplicate episode_id {rec.episode_id!r} within split {rec.split!r} (first at row {seen[key]})"))
            continue
        seen[key] = rownum
        records.append(rec)
    if errors:
        raise PredictionFileError(path, errors)
    if not records:
        warnings.warn(f"{path}: no records", stacklevel=2)
    if require:
        records = [r for r in records if all(name in r.probs for name in require)]
    return records


def specialist_names(records: Iterable[PredictionRecord]) -> list[str]:
    """Specialist names in order of first appearance."""
    names: dict[str, None] = {}
    for rec in records:
        for name in rec.probs:
            names.setdefault(name, None)
    return list(names)


def save_predictions(records: Sequence[PredictionRecord], path, format: str | None = None) -> None:
    path = Path(path)
    fmt = format or _infer_format(path)
    names = specialist_names(records)
    cols = list(REQUIRED) + [PROB_PREFIX + n for n in names]
    with open(path, "w", newline="" if fmt == "csv" else None, encoding="utf-8") as fh:
        if fmt == "csv":
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for rec in records:
                # repr round-trips floats exactly
                writer.writerow(
                    [rec.episode_id, rec.split, rec.label]
                    + [repr(rec.probs[n]) if n in rec.probs else "" for n in names]
                )
        elif fmt == "jsonl":
            for rec in records:
                row = {"episode_id": rec.episode_id, "split": rec.split, "label": rec.label}
                row.update({PROB_PREFIX + n: rec.probs[n] for n in names if n in rec.probs})
                fh.write(json.dumps(row) + "\n")
        else:
            raise ValueError(f"unknown format {fmt!r}")


def select_split(records: Iterable[PredictionRecord], split: str) -> list[PredictionRecord]:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return [r for r in records if r.split == split]


def to_arrays(records: Sequence[PredictionRecord], specialists: Sequence[str]):
    """Return ``(labels, P)`` with ``P[i, j]`` the probability of specialist j (NaN if absent)."""
    y = np.fromiter((r.label for r in records), dtype=int, count=len(records))
    P = np.full((len(records), len(specialists)), np.nan)
    for i, rec in enumerate(records):
        for j, name in enumerate(specialists):
            p = rec.probs.get(name)
            if p is not None:
                P[i, j] = p
    return y, P


# -- cohort summary ---------------------------------------------------------


@dataclass(frozen=True)
class CohortSummary:
    counts: dict[str, int]
    prevalence: dict[str, float | None]
    coverage: dict[str, float]

    def to_dict(self):
        return {"counts": self.counts, "prevalence": self.prevalence, "coverage": self.coverage}


def cohort_summary(records: Sequence[PredictionRecord]) -> CohortSummary:
    if not records:
        raise ValueError("cohort_summary needs at least one record")
    counts = {s: 0 for s in SPLITS}
    positives = {s: 0 for s in SPLITS}
    for rec in records:
        counts[rec.split] += 1
        positives[rec.split] += rec.label
    prevalence = {s: (positives[s] / counts[s] if counts[s] else None) for s in SPLITS}
    names = specialist_names(records)
    coverage = {n: sum(n in r.probs for r in records) / len(records) for n in names}
    return CohortSummary(counts=counts, prevalence=prevalence, coverage=coverage)


# -- synthetic cohorts ------------------------------------------------------


@dataclass(frozen=True)
class BranchParams:
    """Class-conditional Gaussian for one branch's logit: N(mu0, sigma) if y=0, N(mu1, sigma) if y=1."""

    mu0: float
    mu1: float
    sigma: float = 1.0

    @property
    def auc(self) -> float:
        """Closed-form binormal AUROC, Phi((mu1 - mu0) / (sigma * sqrt(2)))."""
        return float(norm.cdf((self.mu1 - self.mu0) / (self.sigma * math.sqrt(2.0))))

    @classmethod
    def calibrated(cls, auc: float, prevalence: float) -> "BranchParams":
        """Branch whose probabilities are calibrated and whose AUROC is ``auc``.

        With equal variances the posterior log-odds is linear in the logit; it is
        the identity when mu1 - mu0 = sigma**2 and the midpoint sits at logit(prevalence).
        """
        if not 0.5 < auc < 1.0:
            raise ValueError("auc must lie in (0.5, 1)")
        sigma = math.sqrt(2.0) * float(norm.ppf(auc))
        delta = sigma * sigma
        mid = math.log(prevalence / (1.0 - prevalence))
        return cls(mu0=mid - delta / 2.0, mu1=mid + delta / 2.0, sigma=sigma)


@dataclass(frozen=True)
class SyntheticConfig:
    n: Mapping[str, int]
    prevalence: float
    branches: Mapping[str, BranchParams]
    rho: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must lie in (0, 1)")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [-1, 1]")
        if not self.branches:
            raise ValueError("at least one branch is required")
        for name, b in self.branches.items():
            if not b.sigma > 0:
                raise ValueError(f"sigma must be > 0 for branch {name!r}")
        for split, count in self.n.items():
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r}")
            if int(count) != count or count < 0:
                raise ValueError(f"n[{split!r}] must be a non-negative integer")
        k = len(self.branches)
        if k > 1 and self.rho < -1.0 / (k - 1):
            raise ValueError(f"rho={self.rho} is not a valid equicorrelation for {k} branches")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticConfig":
        return cls(
            n={k: int(v) for k, v in d["n"].items()},
            prevalence=float(d["prevalence"]),
            branches={name: BranchParams(**b) for name, b in d["branches"].items()},
            rho=float(d.get("rho", 0.0)),
            seed=int(d.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        return {
            "n": dict(self.n),
            "prevalence": self.prevalence,
            "branches": {k: {"mu0": b.mu0, "mu1": b.mu1, "sigma": b.sigma} for k, b in self.branches.items()},
            "rho": self.rho,
            "seed": self.seed,
        }


def _mixing_matrix(k: int, rho: float) -> np.ndarray:
    if k == 1:
        return np.ones((1, 1))
    if rho == 1.0:
        # every branch reuses the first normal; exact copies, not Cholesky round-off
        M = np.zeros((k, k))
        M[:, 0] = 1.0
        return M
    corr = np.full((k, k), rho)
    np.fill_diagonal(corr, 1.0)
    return np.linalg.cholesky(corr)


def _record_rng(seed: int, split_index: int, index: int) -> np.random.Generator:
    # Philox4x64 keyed by the seed; the record index sits in the second counter
    # word so consecutive records never share counter blocks.
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, index, split_index, 0]))


def generate_synthetic_cohort(config: SyntheticConfig) -> list[PredictionRecord]:
    """Draw a cohort from the class-conditional correlated Gaussian logit model.

    Record ``i`` of split ``s`` depends only on ``(seed, s, i)``: it draws one
    uniform for its label then one standard normal per branch from its own
    Philox stream, so generation order does not matter.
    """
    names = list(config.branches)
    mix = _mixing_matrix(len(names), config.rho)
    mu0 = np.array([config.branches[n].mu0 for n in names])
    mu1 = np.array([config.branches[n].mu1 for n in names])
    sig = np.array([config.branches[n].sigma for n in names])
    records = []
    for s_idx, split in enumerate(SPLITS):
        for i in range(int(config.n.get(split, 0))):
            rng = _record_rng(int(config.seed), s_idx, i)
            label = int(rng.random() < config.prevalence)
            e = mix @ rng.standard_normal(len(names))
            logits = (mu1 if label else mu0) + sig * e
            probs = expit(logits)
            records.append(
                PredictionRecord(
                    episode_id=f"{split}-{i:06d}",
                    split=split,
                    label=label,
                    probs={n: float(p) for n, p in zip(names, probs)},
                )
            )
    return records


def load_synthetic_config(path) -> SyntheticConfig:
    with open(path, encoding="utf-8") as fh:
        return SyntheticConfig.from_dict(json.load(fh))
