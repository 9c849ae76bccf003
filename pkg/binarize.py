# binarize.py
"""Binary-network building blocks used by gradcore's binary layers."""
from __future__ import annotations
from dataclasses import dataclass

import numpy as np

from errors import InvalidCoefficient, InvalidInput, SpecError

LATENT_CLIP = 1.5


def sign_activation(A_r: np.ndarray) -> np.ndarray:
    """-1 where A_r < 0, +1 otherwise (zero maps to +1)."""
    a = np.asarray(A_r, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise InvalidInput("sign activation needs finite inputs")
    return np.where(a < 0.0, -1.0, 1.0)


def binarize_weights(W_r: np.ndarray) -> np.ndarray:
    """Row-wise channels: W_b = (||w||_1 / n) * Sign(w) for every row w of W_r."""
    w = np.asarray(W_r, dtype=np.float64)
    squeeze = w.ndim == 1
    if squeeze:
        w = w[None, :]
    if w.ndim != 2 or w.shape[1] == 0:
        raise SpecError(f"binarize_weights needs non-empty channels, got shape {np.shape(W_r)}")
    if not np.all(np.isfinite(w)):
        raise InvalidInput("latent weights must be finite")
    scale = np.abs(w).sum(axis=1, keepdims=True) / w.shape[1]
    out = scale * sign_activation(w)
    return out[0] if squeeze else out


def ste_backward(grad_wrt_binary: np.ndarray, A_r: np.ndarray, clip_bound: float = 1.0) -> np.ndarray:
    """Clipped straight-through estimator: pass the gradient where |A_r| <= clip_bound."""
    if not clip_bound > 0:
        raise InvalidCoefficient(f"clip_bound must be > 0, got {clip_bound}")
    g = np.asarray(grad_wrt_binary, dtype=np.float64)
    return np.where(np.abs(np.asarray(A_r)) <= clip_bound, g, 0.0)


def clip_latent(W_r: np.ndarray, bound: float = LATENT_CLIP) -> np.ndarray:
    return np.clip(W_r, -bound, bound)


@dataclass(frozen=True)
class BinaryDenseLayer:
    latent_weights: np.ndarray  # W_r, shape (out_dim, n)
    clip_bound: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.latent_weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] == 0:
            raise SpecError(f"binary layer needs a (out, n) latent matrix, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise InvalidInput("latent weights must be finite")
        if not self.clip_bound > 0:
            raise InvalidCoefficient(f"clip_bound must be > 0, got {self.clip_bound}")

    @property
    def n(self) -> int:
        return self.latent_weights.shape[1]

    def binary_weights(self) -> np.ndarray:
        return binarize_weights(self.latent_weights)

    def latent_gradient(self, grad_wrt_binary: np.ndarray) -> np.ndarray:
        # Straight through: the binary-weight gradient lands on the latent weights unchanged;
        # drift is bounded by clip_latent after each update.
        return np.asarray(grad_wrt_binary, dtype=np.float64)
