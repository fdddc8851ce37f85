"""Frequency features for 3D coordinates and sinusoidal step embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EncodingConfig:
    n_freqs: int = 7       # frequency count per coordinate
    model_dim: int = 512   # embedding width after projection

    def __post_init__(self):
        if self.n_freqs < 1:
            raise ValueError("n_freqs must be >= 1")
        if self.model_dim % 2 != 0:
            raise ValueError("model_dim must be even")

    @property
    def point_feat_dim(self) -> int:
        return 6 * self.n_freqs


def posenc(points: np.ndarray, n_freqs: int) -> np.ndarray:
    """Sin/cos features at octave frequencies, per coordinate.

    For each of the 3 coordinates p emits sin(2^i pi p), cos(2^i pi p)
    for i = 0..n_freqs-1, giving 6*n_freqs values per point.  Accepts a
    single triple or an (N, 3) array.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if pts.shape[-1] != 3:
        raise ValueError(f"expected 3D coordinates, got shape {pts.shape}")
    freqs = (2.0 ** np.arange(n_freqs)) * np.pi
    # angles: (N, 3, L)
    ang = pts[:, :, None] * freqs[None, None, :]
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(pts.shape[0], -1)
    return out[0] if single else out


def timestep_embed(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of a step index: half sin, half cos, with
    wavelengths geometrically spaced between 1 and 10^4."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    inv_freq = 10000.0 ** (-np.arange(half) / max(half - 1, 1))
    ang = float(t) * inv_freq
    return np.concatenate([np.sin(ang), np.cos(ang)])
