"""Discrete stochastic integrals and covariation on a shared time grid.

All functions act along the last axis and accept any leading batch shape, so a
(paths, steps+1) array is handled in one call. Sums are cumulative in grid
order, which makes the Ito/Stratonovich conversion hold term by term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridMismatchError",
    "RealPath",
    "stratonovich_integral",
    "ito_integral",
    "quadratic_covariation",
    "time_integral",
]


class GridMismatchError(ValueError):
    pass


@dataclass
class RealPath:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[-1] != len(self.times):
            raise GridMismatchError(f"{self.values.shape[-1]} values on a grid of {len(self.times)} times")

    def __len__(self) -> int:
        return len(self.times)


def _values(y):
    return y.values if isinstance(y, RealPath) else np.asarray(y, dtype=float)


def _pair(Y, B):
    y = _values(Y)
    b = _values(B)
    if y.shape[-1] != b.shape[-1]:
        raise GridMismatchError(f"integrand has {y.shape[-1]} grid values, driver has {b.shape[-1]}")
    times = Y.times if isinstance(Y, RealPath) else (B.times if isinstance(B, RealPath) else None)
    if isinstance(Y, RealPath) and isinstance(B, RealPath) and not np.array_equal(Y.times, B.times):
        raise GridMismatchError("integrand and driver live on different time grids")
    return y, b, times


def _cumulative(terms: np.ndarray) -> np.ndarray:
    out = np.zeros(terms.shape[:-1] + (terms.shape[-1] + 1,))
    np.cumsum(terms, axis=-1, out=out[..., 1:])
    return out


def _wrap(values, times):
    return values if times is None else RealPath(times, values)


def stratonovich_integral(Y, B):
    """Cumulative sum of (Y_j + Y_{j+1})/2 (B_{j+1} - B_j)."""
    y, b, times = _pair(Y, B)
    return _wrap(_cumulative(0.5 * (y[..., :-1] + y[..., 1:]) * np.diff(b, axis=-1)), times)


def ito_integral(Y, B):
    """Cumulative sum of Y_j (B_{j+1} - B_j)."""
    y, b, times = _pair(Y, B)
    return _wrap(_cumulative(y[..., :-1] * np.diff(b, axis=-1)), times)


def quadratic_covariation(Y, B):
    """Cumulative sum of (Y_{j+1} - Y_j)(B_{j+1} - B_j)."""
    y, b, times = _pair(Y, B)
    return _wrap(_cumulative(np.diff(y, axis=-1) * np.diff(b, axis=-1)), times)


def time_integral(Y, times=None):
    """Cumulative trapezoidal integral in time."""
    y = _values(Y)
    if times is None:
        times = Y.times
    times = np.asarray(times, dtype=float)
    if y.shape[-1] != len(times):
        raise GridMismatchError("integrand and grid lengths differ")
    return _wrap(_cumulative(0.5 * (y[..., :-1] + y[..., 1:]) * np.diff(times)), times if isinstance(Y, RealPath) else None)
