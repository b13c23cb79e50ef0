"""Seeded 2D Perlin gradient noise with fractal octaves."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class PerlinParams:
    octaves: int = 1
    frequency: float = 1.0
    amplitude: float = 1.0
    seed: int = 0
    persistence: float = 0.5
    lacunarity: float = 2.0

    def __post_init__(self):
        if self.octaves < 1:
            raise ValueError(f"octaves must be >= 1, got {self.octaves}")

    def to_dict(self) -> dict:
        return {
            "octaves": self.octaves,
            "frequency": self.frequency,
            "amplitude": self.amplitude,
            "seed": self.seed,
            "persistence": self.persistence,
            "lacunarity": self.lacunarity,
        }


@lru_cache(maxsize=256)
def _tables(seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(256)
    perm = np.concatenate([perm, perm])
    angles = rng.uniform(0.0, 2.0 * np.pi, 256)
    grads = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    perm.flags.writeable = False
    grads.flags.writeable = False
    return perm, grads


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def _perlin_single(x, y, perm, grads):
    xi = np.floor(x)
    yi = np.floor(y)
    xf, yf = x - xi, y - yi
    xi = xi.astype(np.int64) & 255
    yi = yi.astype(np.int64) & 255

    def dot(ix, iy, dx, dy):
        g = grads[perm[perm[ix] + iy]]
        return g[..., 0] * dx + g[..., 1] * dy

    n00 = dot(xi, yi, xf, yf)
    n10 = dot(xi + 1, yi, xf - 1, yf)
    n01 = dot(xi, yi + 1, xf, yf - 1)
    n11 = dot(xi + 1, yi + 1, xf - 1, yf - 1)
    u, v = _fade(xf), _fade(yf)
    nx0 = n00 + u * (n10 - n00)
    nx1 = n01 + u * (n11 - n01)
    return nx0 + v * (nx1 - nx0)


def perlin_noise(p, params: PerlinParams) -> np.ndarray | float:
    """Fractal Perlin noise at 2D point(s) ``p`` (shape (2,) or (..., 2)).

    Octave ``k`` samples at ``frequency * lacunarity**k`` with weight
    ``persistence**k``; the weighted sum is normalised by the total weight,
    scaled by ``amplitude`` and clipped to [-1, 1]. Zero at integer lattice
    points when the frequency and lacunarity are integers.
    """
    p = np.asarray(p, dtype=np.float64)
    scalar = p.ndim == 1
    if params.amplitude == 0:
        out = np.zeros(p.shape[:-1])
        return 0.0 if scalar else out
    perm, grads = _tables(int(params.seed) & 0xFFFFFFFF)
    total = np.zeros(p.shape[:-1])
    weight, norm, freq = 1.0, 0.0, params.frequency
    for _ in range(params.octaves):
        total += weight * _perlin_single(p[..., 0] * freq, p[..., 1] * freq, perm, grads)
        norm += weight
        weight *= params.persistence
        freq *= params.lacunarity
    out = np.clip(params.amplitude * total / norm, -1.0, 1.0)
    return float(out) if scalar else out
