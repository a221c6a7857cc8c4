"""Per-slot downlink channel attenuations: Rician small-scale fading on top
of a distance power law."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .rng import RandomStream

# LOS component of the Rician channel; only |h| matters downstream.
LOS_COMPONENT = 1.0 + 0.0j


@dataclass(frozen=True)
class FadingParams:
    beta0: float = 1e-3
    alpha: float = 2.0
    rician_k: float = 3.0

    def __post_init__(self):
        if not self.beta0 > 0:
            raise ValueError("beta0 must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.rician_k < 0:
            raise ValueError("rician_k must be >= 0")


def large_scale(distance, params: FadingParams):
    """Path-loss power gain beta0 * L**-alpha, with L clamped to the 1 m reference."""
    d = np.asarray(distance, dtype=float)
    if np.any(d < 1.0):
        warnings.warn("distance below the 1 m reference distance; clamped to 1 m", stacklevel=2)
        d = np.maximum(d, 1.0)
    out = params.beta0 * d ** (-params.alpha)
    return float(out) if out.ndim == 0 else out


def small_scale(stream: RandomStream, params: FadingParams, size=None):
    k = params.rician_k
    if math.isinf(k):
        if size is None:
            return LOS_COMPONENT
        return np.full(size, LOS_COMPONENT, dtype=complex)
    nlos = stream.complex_normal(size)
    return math.sqrt(k / (k + 1.0)) * LOS_COMPONENT + math.sqrt(1.0 / (k + 1.0)) * nlos


def draw_slot_gains(distances, params: FadingParams, stream: RandomStream, n_channels: int) -> np.ndarray:
    """Fresh N x M complex gains for one slot."""
    distances = np.atleast_1d(np.asarray(distances, dtype=float))
    if distances.size < 1 or n_channels < 1:
        raise ValueError("need at least one VU and one channel")
    amp = np.sqrt(np.atleast_1d(large_scale(distances, params)))
    g = small_scale(stream, params, size=(distances.size, n_channels))
    return amp[:, None] * g
