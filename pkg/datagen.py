# datagen.py
"""Synthetic class clusters, Pareto long-tail resampling, class curation and splits."""
from __future__ import annotations
import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from config import ClusterSpec, LongTailSpec, settings
from errors import DataError, InvalidClassCount, InvalidCoefficient, SpecError

logger = logging.getLogger(__name__)

MAX_PLACEMENT_DRAWS = 10_000


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # (N, dim)
    labels: np.ndarray    # (N,) ints in 0..K-1
    num_classes: int
    split: str = "all"

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        if self.num_classes < 2:
            raise InvalidClassCount(f"need at least 2 classes, got {self.num_classes}")
        if x.ndim != 2 or x.shape[0] != y.size:
            raise DataError(f"{x.shape[0] if x.ndim else 0} feature rows for {y.size} labels")
        if not np.all(np.isfinite(x)):
            raise DataError("features must be finite")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError(f"labels must lie in 0..{self.num_classes - 1}")
        missing = np.flatnonzero(self.class_counts == 0)
        if missing.size:
            raise DataError(f"{self.split} split has no examples of classes {missing.tolist()}")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def size(self) -> int:
        return self.labels.size

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices: np.ndarray, split: Optional[str] = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes, split or self.split)


def _round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


# ---------- Clusters ----------

def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    while not np.linalg.norm(v) > 0:
        v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def place_means(spec: ClusterSpec) -> np.ndarray:
    """Greedy placement on a sphere of radius far_distance.

    The similar pair sits at exactly near_distance; every other pair ends up >= far_distance apart.
    """
    if spec.means is not None:
        return np.array(spec.means, dtype=np.float64)
    rng = np.random.default_rng((spec.seed, 0))
    K, dim, far = spec.num_classes, spec.dim, spec.far_distance
    a, b = spec.similar_pair
    means = np.zeros((K, dim))
    means[a] = far * _unit(rng, dim)
    means[b] = means[a] + spec.near_distance * _unit(rng, dim)
    placed = [a, b]
    for c in range(K):
        if c in (a, b):
            continue
        for _ in range(MAX_PLACEMENT_DRAWS):
            cand = far * _unit(rng, dim)
            if np.all(np.linalg.norm(means[placed] - cand, axis=1) >= far):
                break
        else:
            raise SpecError(
                f"cannot place {K} class means {far:g} apart in {dim} dimensions "
                f"(stuck at class {c})")
        means[c] = cand
        placed.append(c)
    return means


def gen_clusters(spec: ClusterSpec) -> LabeledDataset:
    means = place_means(spec)
    rng = np.random.default_rng((spec.seed, 1))
    n = spec.n_per_class
    features = np.concatenate([
        means[c] + spec.sigma * rng.standard_normal((n, spec.dim)) for c in range(spec.num_classes)
    ])
    labels = np.repeat(np.arange(spec.num_classes), n)
    logger.debug("generated %d clusters of %d points in %d dims", spec.num_classes, n, spec.dim)
    return LabeledDataset(features, labels, spec.num_classes)


# ---------- Long tail ----------

def pareto_counts(K: int, spec: LongTailSpec) -> np.ndarray:
    """Per-rank counts: rank 0 keeps max_per_class, the last rank min_per_class, non-increasing between."""
    if K < 2:
        raise InvalidClassCount(f"need at least 2 classes, got {K}")
    ranks = np.arange(K)
    x = ((ranks + 1) / K) ** (-1.0 / spec.pareto_power)
    lo, hi = spec.min_per_class, spec.max_per_class
    counts = _round_half_up(lo + (hi - lo) * (x - 1.0) / (x[0] - 1.0))
    return np.clip(counts, lo, hi)


def pareto_resample(d: LabeledDataset, spec: LongTailSpec) -> LabeledDataset:
    if spec.balanced:
        return d
    counts = pareto_counts(d.num_classes, spec)
    have = d.class_counts
    short = np.flatnonzero(have < counts)
    if short.size:
        c = int(short[0])
        raise DataError(f"class {c} has {have[c]} examples, long-tail profile needs {counts[c]}")
    rng = np.random.default_rng((spec.seed, 2))
    keep = []
    for c in range(d.num_classes):
        members = np.flatnonzero(d.labels == c)
        keep.append(rng.choice(members, size=int(counts[c]), replace=False))
    keep = np.sort(np.concatenate(keep))
    logger.debug("long-tail counts %s", counts.tolist())
    return d.subset(keep)


# ---------- Curation / split ----------

def curate_subset(d: LabeledDataset, k: int, seed: int) -> LabeledDataset:
    if k < 2 or k > d.num_classes:
        raise SpecError(f"can keep between 2 and {d.num_classes} classes, got {k}")
    rng = np.random.default_rng((seed, 3))
    kept = np.sort(rng.choice(d.num_classes, size=k, replace=False))
    mask = np.isin(d.labels, kept)
    relabeled = np.searchsorted(kept, d.labels[mask])
    return LabeledDataset(d.features[mask], relabeled, k, d.split)


def split(d: LabeledDataset, val_fraction: float, seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """Stratified split: each class sends round(n_c * val_fraction) examples to validation."""
    if not (0.0 < val_fraction < 1.0):
        raise InvalidCoefficient(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng((seed, 4))
    train_idx, val_idx = [], []
    for c in range(d.num_classes):
        members = rng.permutation(np.flatnonzero(d.labels == c))
        n_val = int(_round_half_up(members.size * val_fraction))
        if n_val == 0 or n_val == members.size:
            raise DataError(
                f"class {c} has {members.size} examples; cannot put {val_fraction:g} of them in validation")
        val_idx.append(members[:n_val])
        train_idx.append(members[n_val:])
    return (d.subset(np.sort(np.concatenate(train_idx)), "train"),
            d.subset(np.sort(np.concatenate(val_idx)), "val"))


# ---------- Files ----------

def sidecar_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}.spec.json")


def write_dataset(path: str | Path, ds: LabeledDataset, record: Optional[dict] = None) -> Path:
    """CSV `label,f_0,...` plus a `<stem>.spec.json` sidecar describing how it was made."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = f"{{:.{settings.csv_decimals}f}}"
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label", *[f"f_{j}" for j in range(ds.dim)]])
        for label, row in zip(ds.labels, ds.features):
            w.writerow([int(label), *[fmt.format(v) for v in row]])
    meta = {
        "num_classes": ds.num_classes,
        "dim": ds.dim,
        "size": ds.size,
        "class_counts": ds.class_counts.tolist(),
        "source": record or {},
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return path


def read_dataset(path: str | Path) -> LabeledDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "label" or len(header) < 2:
            raise DataError(f"{path}: expected header label,f_0,...")
        rows = [r for r in reader if r]
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"{path}: row {i} has {len(r)} fields, header has {len(header)}")
    try:
        labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
        features = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None
    side = sidecar_path(path)
    if side.exists():
        num_classes = int(json.loads(side.read_text(encoding="utf-8"))["num_classes"])
    else:
        num_classes = int(labels.max()) + 1 if labels.size else 0
    return LabeledDataset(features.reshape(len(rows), len(header) - 1), labels, num_classes)
