# geometry.py
"""Penultimate-layer geometry: the plane through three class templates and cluster separations."""
from __future__ import annotations
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from config import settings
from errors import GeometryError, GroupingError, ShapeError, SpecError
from gradcore import Model, forward

logger = logging.getLogger(__name__)

MIN_PLANE_ANGLE = 1e-6  # radians


def template_of(model: Model, c: int) -> np.ndarray:
    """Row c of the final layer's weight matrix."""
    K = model.spec.num_classes
    if not (0 <= c < K):
        raise SpecError(f"class {c} outside 0..{K - 1}")
    return np.array(model.weights[-1][c])


def plane_basis(t1, t2, t3) -> Tuple[np.ndarray, np.ndarray]:
    """Gram-Schmidt on (t2 - t1, t3 - t1)."""
    t1, t2, t3 = (np.asarray(t, dtype=np.float64) for t in (t1, t2, t3))
    if not (t1.shape == t2.shape == t3.shape) or t1.ndim != 1:
        raise ShapeError(f"templates must be vectors of one length, got {t1.shape}/{t2.shape}/{t3.shape}")
    d1, d2 = t2 - t1, t3 - t1
    n1, n2 = np.linalg.norm(d1), np.linalg.norm(d2)
    if n1 == 0.0 or n2 == 0.0:
        raise GeometryError("templates coincide; no plane through them")
    u1 = d1 / n1
    r = d2 - (d2 @ u1) * u1
    nr = np.linalg.norm(r)
    if nr / n2 <= np.sin(MIN_PLANE_ANGLE):
        raise GeometryError("templates are collinear; no plane through them")
    return u1, r / nr


def project(points: np.ndarray, origin: np.ndarray, basis: Tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    squeeze = p.ndim == 1
    if squeeze:
        p = p[None, :]
    origin = np.asarray(origin, dtype=np.float64)
    u = np.stack(basis)
    if p.shape[1] != origin.size or u.shape[1] != origin.size:
        raise ShapeError(f"points of width {p.shape[1]} do not match a basis of width {u.shape[1]}")
    out = (p - origin) @ u.T
    return out[0] if squeeze else out


@dataclass(frozen=True)
class Separation:
    d_c: float
    spread_a: float
    spread_b: float
    distances_a: np.ndarray  # each member of a to a's cluster mean
    distances_b: np.ndarray

    @property
    def mean_spread(self) -> float:
        return 0.5 * (self.spread_a + self.spread_b)


def cluster_separation(points_a: np.ndarray, points_b: np.ndarray) -> Separation:
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] == 0 or b.shape[0] == 0:
        raise GroupingError("both classes need at least one point")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"point widths differ: {a.shape[1]} vs {b.shape[1]}")
    mean_a, mean_b = a.mean(axis=0), b.mean(axis=0)
    dist_a = np.linalg.norm(a - mean_a, axis=1)
    dist_b = np.linalg.norm(b - mean_b, axis=1)
    return Separation(
        d_c=float(np.linalg.norm(mean_a - mean_b)),
        spread_a=float(dist_a.mean()),
        spread_b=float(dist_b.mean()),
        distances_a=dist_a,
        distances_b=dist_b,
    )


@dataclass(frozen=True)
class GeometryReport:
    basis: Tuple[np.ndarray, np.ndarray]
    origin: np.ndarray
    points: np.ndarray              # (N, 2)
    labels: np.ndarray              # (N,)
    cluster_means: np.ndarray       # (K, 2); NaN rows for classes absent from the sample
    similar_pair: Tuple[int, int]
    reference_class: int
    plane: Separation
    full: Separation
    reference_distances: np.ndarray  # full-space distance of each example to the reference class mean

    def summary(self) -> dict:
        a, b = self.similar_pair
        mask_a, mask_b = self.labels == a, self.labels == b
        return {
            "similar_pair": [a, b],
            "reference_class": self.reference_class,
            "d_c_full": self.full.d_c,
            "d_c_plane": self.plane.d_c,
            "spread_full": self.full.mean_spread,
            "spread_plane": self.plane.mean_spread,
            "ref_distance_a": float(self.reference_distances[mask_a].mean()),
            "ref_distance_b": float(self.reference_distances[mask_b].mean()),
        }


def default_reference_class(K: int, pair: Tuple[int, int]) -> int:
    return next(c for c in range(K) if c not in pair)


def analyze_geometry(model: Model, features: np.ndarray, labels: Sequence[int],
                     similar_pair: Tuple[int, int], reference_class: Optional[int] = None) -> GeometryReport:
    K = model.spec.num_classes
    a, b = similar_pair
    if K < 3:
        raise GeometryError("a template plane needs at least 3 classes")
    ref = default_reference_class(K, (a, b)) if reference_class is None else reference_class
    if len({a, b, ref}) != 3:
        raise SpecError(f"pair {similar_pair} and reference class {ref} must be three distinct classes")
    t1, t2, t3 = template_of(model, a), template_of(model, b), template_of(model, ref)
    basis = plane_basis(t1, t2, t3)

    labels = np.asarray(labels, dtype=np.int64)
    pen = forward(model, features).penultimate
    pts = project(pen, t1, basis)

    means = np.full((K, 2), np.nan)
    for c in range(K):
        if np.any(labels == c):
            means[c] = pts[labels == c].mean(axis=0)
    ref_members = pen[labels == ref]
    if ref_members.shape[0] == 0:
        raise GroupingError(f"reference class {ref} has no examples")
    ref_distances = np.linalg.norm(pen - ref_members.mean(axis=0), axis=1)

    report = GeometryReport(
        basis=basis,
        origin=t1,
        points=pts,
        labels=labels,
        cluster_means=means,
        similar_pair=(a, b),
        reference_class=ref,
        plane=cluster_separation(pts[labels == a], pts[labels == b]),
        full=cluster_separation(pen[labels == a], pen[labels == b]),
        reference_distances=ref_distances,
    )
    logger.info("geometry: D_c full=%.4f plane=%.4f spread=%.4f",
                report.full.d_c, report.plane.d_c, report.full.mean_spread)
    return report


# ---------- Outputs ----------

def write_points_csv(path: str | Path, report: GeometryReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = f"{{:.{settings.csv_decimals}f}}"
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label", "x", "y"])
        for label, (x, y) in zip(report.labels, report.points):
            w.writerow([int(label), fmt.format(x), fmt.format(y)])
    return path


def write_scatter_svg(path: str | Path, report: GeometryReport, title: str = "") -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    a, b = report.similar_pair
    shown = (a, b, report.reference_class)
    with plt.rc_context({"svg.hashsalt": "lsdistill", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 5))
        for c in shown:
            m = report.labels == c
            ax.scatter(report.points[m, 0], report.points[m, 1], s=6, alpha=0.6, label=f"class {c}")
        ax.set_xlabel("u1")
        ax.set_ylabel("u2")
        ax.set_title(title or f"D_c = {report.full.d_c:.3f} (full), {report.plane.d_c:.3f} (plane)")
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
