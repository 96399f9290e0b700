"""Weight tensors with a known scaling regime, built by construction.

Used as fixtures for the diagnostics: smooth rescaled weights (H1),
Brownian increments with an optional trend (H2) and sparse tensors.
"""

from __future__ import annotations

import numpy as np

from .core import RngStream
from .diagnostics import WeightTensor


def smooth_profile(seed: int, d: int = 3):
    """Random smooth matrix-valued f(t) = C0 + C1 sin(2 pi t) + C2 t on [0, 1].

    C0 has entries of size ~1 so the integral of f stays away from zero.
    Returns ``(f, lipschitz_bound)``.
    """
    rng = RngStream(seed, 10)
    C0 = 1.0 + rng.normal((d, d), 0.3)
    C1 = rng.normal((d, d), 0.5)
    C2 = rng.normal((d, d), 0.5)

    def f(t):
        t = np.asarray(t, dtype=np.float64)[..., None, None]
        return C0 + C1 * np.sin(2 * np.pi * t) + C2 * t

    lip = 2 * np.pi * np.linalg.norm(C1) + np.linalg.norm(C2)
    return f, float(lip)


def planted_h1(L: int, beta: float, seed: int, d: int = 3) -> WeightTensor:
    """A_k = L^-beta f(k/L) with f smooth; no noise."""
    f, _ = smooth_profile(seed, d)
    return WeightTensor(L ** -beta * f(np.arange(L) / L))


def planted_brownian(L: int, beta: float, seed: int, d: int = 3, noise_std: float = 0.2,
                     with_trend: bool = True) -> WeightTensor:
    """A_k = L^-beta f(k/L) + W_{(k+1)/L} - W_{k/L}, W a matrix Brownian motion
    with per-entry variance ``noise_std**2`` per unit time.

    Independent noise is drawn for every (seed, L) pair.
    """
    rng = RngStream(seed, 11).child(L)
    inc = rng.normal((L, d, d), noise_std * L ** -0.5)
    if with_trend:
        f, _ = smooth_profile(seed, d)
        inc = inc + L ** -beta * f(np.arange(L) / L)
    return WeightTensor(inc)


def planted_iid(L: int, seed: int, d: int = 3) -> WeightTensor:
    """Standard initialisation A_k ~ N(0, 1/(L d^2)): pure increments, beta = 1."""
    return planted_brownian(L, 1.0, seed, d, noise_std=1.0 / d, with_trend=False)


def planted_sparse(L: int, seed: int, d: int = 3) -> WeightTensor:
    """All zero except one O(1) entry (same value at every depth) at a random
    layer and position."""
    base = RngStream(seed, 12)
    value = 1.0 + float(base.uniform((), 0.0, 1.0))
    rng = base.child(L)
    A = np.zeros((L, d, d))
    k = int(rng.generator.integers(L))
    i, j = (int(v) for v in rng.generator.integers(d, size=2))
    A[k, i, j] = value
    return WeightTensor(A)
