# metrics.py
"""Intra-/inter-class stability of output distributions and class-mean profiles."""
from __future__ import annotations
import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from config import settings
from errors import GroupingError, InvalidInput, ShapeError


@dataclass(frozen=True)
class GroupedProbs:
    groups: Tuple[np.ndarray, ...]  # groups[c] has shape (n_c, K)

    def __post_init__(self):
        groups = tuple(np.asarray(g, dtype=np.float64) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        K = len(groups)
        if K < 2:
            raise GroupingError(f"need at least 2 classes, got {K}")
        for c, g in enumerate(groups):
            if g.ndim != 2 or g.shape[0] == 0:
                raise GroupingError(f"class {c} has no members")
            if g.shape[1] != K:
                raise ShapeError(f"class {c}: vectors have length {g.shape[1]}, expected {K}")

    @property
    def K(self) -> int:
        return len(self.groups)

    @property
    def counts(self) -> np.ndarray:
        return np.array([g.shape[0] for g in self.groups])

    def class_means(self) -> np.ndarray:
        return np.stack([g.mean(axis=0) for g in self.groups])


def group_by_label(probs: np.ndarray, labels: Sequence[int], K: int) -> GroupedProbs:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise ShapeError(f"{probs.shape[0]} probability rows for {labels.size} labels")
    bad = labels[(labels < 0) | (labels >= K)]
    if bad.size:
        raise InvalidInput(f"label {int(bad[0])} outside 0..{K - 1} ({bad.size} rows)")
    return GroupedProbs(tuple(probs[labels == c] for c in range(K)))


@dataclass(frozen=True)
class ClassMeanProfile:
    means: np.ndarray       # (K, K), row c = mean distribution of class c
    minor: np.ndarray       # (K, K-1), row c without its own entry
    minor_mass: np.ndarray  # (K,), sum of minor entries

    @property
    def max_entries(self) -> np.ndarray:
        return self.means.max(axis=1)


@dataclass(frozen=True)
class StabilityReport:
    stability_eq2: float
    stability_alg1: float
    inter_stability: float
    per_class_variance: np.ndarray  # (K,)
    per_class_mean: np.ndarray      # (K, K)
    per_class_std: np.ndarray       # (K,) target-probability std (alg1 terms)
    counts: np.ndarray              # (K,)

    def summary(self) -> Dict[str, float]:
        return {
            "stability_eq2": self.stability_eq2,
            "intra_variance_eq2": 1.0 - self.stability_eq2,
            "stability_alg1": self.stability_alg1,
            "inter_stability": self.inter_stability,
            "inter_variance": 1.0 - self.inter_stability,
            "mean_max_class_prob": float(self.per_class_mean.max(axis=1).mean()),
        }


def _class_variances(g: GroupedProbs) -> np.ndarray:
    """(1/n_c) sum_i ||p_ic - mean_c||^2 for every class."""
    return np.array([((grp - grp.mean(axis=0)) ** 2).sum(axis=1).mean() for grp in g.groups])


def intra_stability_eq2(g: GroupedProbs) -> float:
    return float(1.0 - _class_variances(g).mean())


def _target_stds(g: GroupedProbs, ddof: int) -> np.ndarray:
    out = np.zeros(g.K)
    for c, grp in enumerate(g.groups):
        if grp.shape[0] > ddof:
            out[c] = grp[:, c].std(ddof=ddof)
    return out


def intra_stability_alg1(g: GroupedProbs, ddof: int = 1) -> float:
    """1 - mean over classes of the std of the target-class probability.

    ddof=1 is the sample convention, ddof=0 the population one; singleton classes add 0.
    """
    return float(1.0 - _target_stds(g, ddof).mean())


def inter_stability(g: GroupedProbs) -> float:
    means = g.class_means()
    counts = g.counts
    overall = (means * counts[:, None]).sum(axis=0) / counts.sum()  # mean over all N examples
    return float(1.0 - ((means - overall) ** 2).sum(axis=1).mean())


def class_mean_profile(g: GroupedProbs) -> ClassMeanProfile:
    means = g.class_means()
    K = g.K
    off_diag = ~np.eye(K, dtype=bool)
    minor = means[off_diag].reshape(K, K - 1)
    return ClassMeanProfile(means=means, minor=minor, minor_mass=minor.sum(axis=1))


def stability_report(g: GroupedProbs, ddof: int = 1) -> StabilityReport:
    return StabilityReport(
        stability_eq2=intra_stability_eq2(g),
        stability_alg1=intra_stability_alg1(g, ddof),
        inter_stability=inter_stability(g),
        per_class_variance=_class_variances(g),
        per_class_mean=g.class_means(),
        per_class_std=_target_stds(g, ddof),
        counts=g.counts,
    )


# ---------- Probability dumps and reports ----------

def write_prob_dump(path: str | Path, probs: np.ndarray, labels: Sequence[int]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    K = probs.shape[1]
    fmt = f"{{:.{settings.csv_decimals}f}}"
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["example_id", "label", *[f"p_{c}" for c in range(K)]])
        for i, (row, label) in enumerate(zip(probs, labels)):
            w.writerow([i, int(label), *[fmt.format(v) for v in row]])
    return path


def read_prob_dump(path: str | Path) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (probs, labels). Rows are renormalised since the file keeps 6 decimals."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, [])
        if header[:2] != ["example_id", "label"] or len(header) < 4:
            raise ShapeError(f"{path}: expected header example_id,label,p_0,...")
        rows = [r for r in reader if r]
    if not rows:
        raise InvalidInput(f"{path}: no probability rows")
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise ShapeError(f"{path}: row {i} has {len(r)} fields, header has {len(header)}")
    try:
        labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
        probs = np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float64)
    except ValueError as e:
        raise InvalidInput(f"{path}: {e}") from None
    sums = probs.sum(axis=1)
    bad = ~np.isfinite(sums) | (probs < 0).any(axis=1) | (sums <= 0)
    if bad.any():
        raise InvalidInput(f"{path}: row {int(np.argmax(bad))} is not a probability vector")
    probs = probs / sums[:, None]
    return probs, labels


def report_dict(report: StabilityReport, profile: ClassMeanProfile) -> dict:
    per_class: List[dict] = []
    for c in range(len(report.counts)):
        per_class.append({
            "class": c,
            "n": int(report.counts[c]),
            "variance": float(report.per_class_variance[c]),
            "target_std": float(report.per_class_std[c]),
            "max_mean_prob": float(profile.max_entries[c]),
            "minor_mass": float(profile.minor_mass[c]),
        })
    return {**report.summary(), "per_class": per_class}


def write_stability_report(path: str | Path, report: StabilityReport, profile: ClassMeanProfile) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report_dict(report, profile), indent=2, sort_keys=True), encoding="utf-8")
    return path
