"""Numerical primitives shared by every other module.

Matrices and vectors are plain float64 numpy arrays. Random numbers come
from :class:`RngStream`, a thin wrapper around numpy's counter-based
Philox bit generator keyed by ``(master_seed, stream_index)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "PowerLawFit",
    "RngStream",
    "as_matrix",
    "as_vector",
    "frobenius_norm",
    "gaussian_matrix",
    "loglog_fit",
    "nearest_odd",
    "smooth_series",
]

_U64 = (1 << 64) - 1


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Return ``data`` as a finite 2-D float64 array, validating its shape."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows or cols is not None and m.shape[1] != cols:
        raise ValueError(f"expected shape ({rows}, {cols}), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def as_vector(data, dim: int | None = None) -> np.ndarray:
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"expected dimension {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def frobenius_norm(m) -> float:
    """sqrt of the sum of squared entries; works for vectors too."""
    a = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


class RngStream:
    """Reproducible random stream identified by ``(master_seed, stream_index)``.

    The Philox key is derived with ``numpy.random.SeedSequence(master_seed,
    spawn_key=(stream_index,))``, so equal pairs give identical sequences and
    distinct indices give independent ones. Gaussian draws use numpy's
    ziggurat transform of the Philox output.

    A stream is single-owner. Parallel work should call :meth:`child` with
    distinct indices instead of sharing one instance.
    """

    def __init__(self, master_seed: int, stream_index: int = 0, _path: tuple[int, ...] = ()):
        if not (0 <= master_seed <= _U64 and 0 <= stream_index <= _U64):
            raise ValueError("seed and stream index must be 64-bit unsigned integers")
        self.master_seed = int(master_seed)
        self.stream_index = int(stream_index)
        self._path = _path
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_index, *_path))
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, index: int) -> "RngStream":
        """Independent sub-stream; does not consume from this stream."""
        return RngStream(self.master_seed, self.stream_index, (*self._path, int(index)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        z = self._gen.standard_normal(shape)
        return z * float(std)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        # Generator.permutation is a Fisher-Yates shuffle of arange(n)
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(master_seed={self.master_seed}, stream_index={self.stream_index}, path={self._path})"


def gaussian_matrix(rng: RngStream, rows: int, cols: int, std: float) -> np.ndarray:
    """i.i.d. N(0, std^2) matrix of shape (rows, cols)."""
    if std < 0:
        raise ValueError("std must be non-negative")
    return rng.normal((rows, cols), std)


@dataclass(frozen=True)
class PowerLawFit:
    """Result of fitting ``value = exp(intercept) * L**slope``."""

    slope: float
    intercept: float
    r_squared: float
    n_points: int

    def predict(self, L):
        return np.exp(self.intercept) * np.asarray(L, dtype=np.float64) ** self.slope


def loglog_fit(points: Iterable[tuple[float, float]]) -> PowerLawFit:
    """Ordinary least squares of ln(value) against ln(L).

    ``r_squared`` is 1 when the log-values are constant (a flat series is
    fitted exactly).
    """
    pts = [(float(L), float(v)) for L, v in points]
    if len(pts) < 2:
        raise ValueError("need at least 2 points for a log-log fit")
    arr = np.array(pts)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError("log-log fit requires finite, strictly positive coordinates")
    x = np.log(arr[:, 0])
    y = np.log(arr[:, 1])
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0:
        raise ValueError("log-log fit needs at least two distinct abscissae")
    slope = np.sum((x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    ss_res = np.sum((y - (intercept + slope * x)) ** 2)
    ss_tot = np.sum((y - ym) ** 2)
    if ss_tot <= 1e-30 * max(1.0, float(np.sum(y * y))):
        r2 = 1.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return PowerLawFit(float(slope), float(intercept), float(r2), len(pts))


def smooth_series(values: Sequence, window: int, boundary: str = "symmetric") -> list:
    """Centered moving average of a series of equally-shaped arrays.

    ``boundary="symmetric"`` shrinks the window near the ends so it stays
    centred (half-width ``min(h, i, n-1-i)``); linear series are then left
    unchanged. ``boundary="clip"`` keeps the nominal half-width and drops
    the out-of-range samples instead.
    """
    n = len(values)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if window > n:
        raise ValueError(f"window {window} exceeds series length {n}")
    if boundary not in ("symmetric", "clip"):
        raise ValueError(f"unknown boundary mode {boundary!r}")
    arr = np.asarray(values, dtype=np.float64)
    if window == 1:
        return [a.copy() if isinstance(a, np.ndarray) else a for a in values]
    h = window // 2
    idx = np.arange(n)
    if boundary == "symmetric":
        half = np.minimum(h, np.minimum(idx, n - 1 - idx))
        lo, hi = idx - half, idx + half
    else:
        lo, hi = np.maximum(idx - h, 0), np.minimum(idx + h, n - 1)
    total = np.zeros_like(arr)
    for off in range(-h, h + 1):
        j = idx + off
        inside = (j >= lo) & (j <= hi)
        total[inside] += arr[j[inside]]
    counts = (hi - lo + 1).reshape((n,) + (1,) * (arr.ndim - 1))
    out = total / counts
    if arr.ndim == 1:
        return [float(x) for x in out]
    return list(out)


def nearest_odd(x: float) -> int:
    """Odd integer nearest to ``x``, at least 1."""
    return max(1, 2 * int(math.floor((x - 1) / 2 + 0.5)) + 1)
