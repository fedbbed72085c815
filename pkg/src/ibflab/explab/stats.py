"""Shared statistics: two-sample KS machinery, Monte Carlo summaries, and
log-log slope fits."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


def ks_two_sample(xs, ys) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_x - F_y|."""
    xs = np.sort(np.asarray(xs, dtype=float))
    ys = np.sort(np.asarray(ys, dtype=float))
    if xs.size == 0 or ys.size == 0:
        raise ValueError("both samples must be nonempty")
    grid = np.concatenate([xs, ys])
    fx = np.searchsorted(xs, grid, side="right") / xs.size
    fy = np.searchsorted(ys, grid, side="right") / ys.size
    return float(np.max(np.abs(fx - fy)))


def ks_critical(n: int, m: int, level: float = 0.05) -> float:
    """Asymptotic two-sample KS critical value at the given level."""
    if n <= 0 or m <= 0:
        raise ValueError("sample sizes must be positive")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    c = math.sqrt(-0.5 * math.log(level / 2.0))
    return c * math.sqrt((n + m) / (n * m))


class MeanSE(NamedTuple):
    mean: float
    std_error: float


def mc_mean_se(samples) -> MeanSE:
    """Sample mean and its standard error (exactly zero for constants)."""
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise ValueError("samples must be nonempty")
    if x.size == 1 or np.ptp(x) == 0.0:
        return MeanSE(float(x.flat[0]), 0.0)
    return MeanSE(float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)))


class SlopeFit(NamedTuple):
    slope: float
    intercept: float
    residual: float


def slope_fit(x, y) -> SlopeFit:
    """Least-squares line through (log x, log y).

    Returns the fitted slope and intercept plus the root-mean-square
    residual in log space.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs positive data")
    lx, ly = np.log(x), np.log(y)
    coef = np.polyfit(lx, ly, 1)
    resid = ly - np.polyval(coef, lx)
    return SlopeFit(float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(resid**2))))
