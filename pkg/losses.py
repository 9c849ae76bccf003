# losses.py
"""Target distributions and training losses.

Single-vector operations work on the typed vectors below; the `*_rows` forms
take (N, K) arrays and are what the training loop calls.
"""
from __future__ import annotations
import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from config import DistillConfig, settings
from errors import (
    InvalidClassCount, InvalidInput, ShapeError,
    check_alpha, check_temperature,
)

LOG_FLOOR = settings.log_floor


# ---------- Domain types ----------

def _as_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ShapeError(f"{name} must be a non-empty 1-D vector, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LabelVector:
    values: np.ndarray
    kind: Literal["one-hot", "smoothed"] = "one-hot"
    alpha: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "values", _as_vector(self.values, "label"))
        if abs(self.values.sum() - 1.0) > 1e-12 or np.any(self.values < 0):
            raise InvalidInput("label values must be non-negative and sum to 1")

    @property
    def num_classes(self) -> int:
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True)
class ProbVector:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_vector(self.values, "probabilities"))
        v = self.values
        if np.any(v < 0) or np.any(v > 1) or abs(v.sum() - 1.0) > 1e-9:
            raise InvalidInput("probabilities must lie in [0, 1] and sum to 1")

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True)
class LogitVector:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_vector(self.values, "logits"))
        if not np.all(np.isfinite(self.values)):
            raise InvalidInput("logits must be finite")

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


Distribution = Union[LabelVector, ProbVector, np.ndarray, Sequence[float]]
Logits = Union[LogitVector, np.ndarray, Sequence[float]]


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")


# ---------- Label smoothing ----------

def smooth_labels(class_index: int, alpha: float, K: int) -> LabelVector:
    if K < 2:
        raise InvalidClassCount(f"label smoothing needs K >= 2, got {K}")
    alpha = check_alpha(alpha)
    if not (0 <= class_index < K):
        raise InvalidInput(f"class index {class_index} outside 0..{K - 1}")
    values = np.full(K, alpha / (K - 1))
    values[class_index] = 1.0 - alpha
    kind = "one-hot" if alpha == 0.0 else "smoothed"
    return LabelVector(values, kind=kind, alpha=alpha)


def smooth_label_rows(labels: np.ndarray, alpha: float, K: int) -> np.ndarray:
    """(N,) int labels -> (N, K) smoothed targets."""
    if K < 2:
        raise InvalidClassCount(f"label smoothing needs K >= 2, got {K}")
    alpha = check_alpha(alpha)
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full((labels.size, K), alpha / (K - 1))
    out[np.arange(labels.size), labels] = 1.0 - alpha
    return out


# ---------- Softmax / cross-entropy ----------

def softmax_rows(z: np.ndarray, T: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    check_temperature(T)
    if not np.all(np.isfinite(z)):
        raise InvalidInput("logits must be finite")
    s = z / T
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z: Logits, T: float = 1.0) -> ProbVector:
    return ProbVector(softmax_rows(_vec(z)[None, :], T)[0])


def cross_entropy_rows(p: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-row -sum(target * log p), p clamped below at the log floor."""
    p = np.asarray(p, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _same_length(p, target)
    return -(target * np.log(np.maximum(p, LOG_FLOOR))).sum(axis=-1)


def cross_entropy(p: Distribution, target: Distribution) -> float:
    return float(cross_entropy_rows(_vec(p), _vec(target)))


def entropy(p: Distribution) -> float:
    v = _vec(p)
    nz = v[v > 0]
    return float(-(nz * np.log(nz)).sum())


def ce_gradient_logits(z: Logits, target: Distribution, T: float = 1.0,
                       rescale_grad_by_T2: bool = False) -> np.ndarray:
    """d/dz of cross_entropy(softmax(z, T), target), which is (p - y) / T with p = softmax(z, T).

    With `rescale_grad_by_T2` the result is multiplied by T^2, giving T * (p - y). That is the
    exact derivative of T^2 * cross_entropy(softmax(z, T), target).
    """
    zv, tv = _vec(z), _vec(target)
    _same_length(zv, tv)
    grad = (softmax_rows(zv[None, :], T)[0] - tv) / T
    return grad * T * T if rescale_grad_by_T2 else grad


def kl_divergence(p_teacher: Distribution, p_student: Distribution) -> float:
    pt, ps = _vec(p_teacher), _vec(p_student)
    _same_length(pt, ps)
    mask = pt > 0  # 0 log 0 := 0
    return float((pt[mask] * (np.log(pt[mask]) - np.log(np.maximum(ps[mask], LOG_FLOOR)))).sum())


# ---------- Distillation ----------

def distill_loss(zS: Logits, zT: Logits, hard: Distribution, cfg: DistillConfig) -> float:
    zs, zt, y = _vec(zS), _vec(zT), _vec(hard)
    _same_length(zs, zt)
    _same_length(zs, y)
    loss, _ = distill_loss_and_grad(zs[None, :], zt[None, :], y[None, :], cfg)
    return loss


def distill_loss_and_grad(zS: np.ndarray, zT: np.ndarray, hard: np.ndarray,
                          cfg: DistillConfig) -> Tuple[float, np.ndarray]:
    """Batch-mean of lam*CE(softmax(zS), hard) + (1-lam)*CE(softmax(zS,T), softmax(zT,T)).

    Returns the loss and its gradient with respect to zS (teacher logits are constants).
    """
    lam, T = cfg.lam, cfg.temperature
    n = zS.shape[0]
    soft_target = softmax_rows(zT, T)
    p_soft = softmax_rows(zS, T)
    loss_rows = (1.0 - lam) * cross_entropy_rows(p_soft, soft_target)
    grad = (1.0 - lam) * (p_soft - soft_target) / T
    if cfg.rescale_grad_by_T2:
        grad = grad * T * T
    if lam > 0.0:
        p_hard = softmax_rows(zS, 1.0)
        loss_rows = loss_rows + lam * cross_entropy_rows(p_hard, hard)
        grad = grad + lam * (p_hard - hard)
    return float(loss_rows.mean()), grad / n


def ce_loss_and_grad(z: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Batch-mean cross-entropy against (N, K) targets and its gradient on z."""
    p = softmax_rows(z, 1.0)
    return float(cross_entropy_rows(p, targets).mean()), (p - targets) / z.shape[0]


# ---------- Smoothed binary logistic loss ----------

def _logistic_loss(z: np.ndarray, alpha: float) -> np.ndarray:
    # -log sigma(z) = log(1 + e^-z); -log(1 - sigma(z)) = log(1 + e^z)
    return (1.0 - alpha) * np.logaddexp(0.0, -z) + alpha * np.logaddexp(0.0, z)


def smoothed_logistic_curve(z_grid: Sequence[float], alpha: float) -> List[Tuple[float, float]]:
    alpha = check_alpha(alpha)
    z = np.asarray(z_grid, dtype=np.float64)
    return [(float(zi), float(li)) for zi, li in zip(z, _logistic_loss(z, alpha))]


def binary_entropy(alpha: float) -> float:
    if alpha in (0.0, 1.0):
        return 0.0
    return -(1.0 - alpha) * math.log(1.0 - alpha) - alpha * math.log(alpha)


def logistic_curve_minimum(alpha: float) -> Tuple[Optional[float], float]:
    """Closed-form minimiser of the smoothed curve; for alpha=0 the infimum 0 is not attained."""
    alpha = check_alpha(alpha)
    if alpha == 0.0:
        return None, 0.0
    return math.log((1.0 - alpha) / alpha), binary_entropy(alpha)
