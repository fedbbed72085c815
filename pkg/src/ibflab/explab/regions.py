"""Scoring regions for the dispersion statistics.

A region answers two questions: does a point fall inside its sqrt(t)-scaled
copy, and how much standard-Gaussian mass does it carry (the dispersion
target).  Half-spaces and centered balls have closed-form masses; anything
wrapped from a set descriptor falls back to a cached Monte Carlo mass with
a fixed sample budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from ibflab import geometry

_MC_SAMPLES = 1_000_000


@dataclass(frozen=True)
class HalfSpace:
    """{x : x_1 <= threshold}; scale-invariant when threshold = 0."""

    threshold: float = 0.0

    def contains(self, pts: np.ndarray, scale: float = 1.0) -> np.ndarray:
        return np.asarray(pts)[..., 0] <= self.threshold * scale

    def gaussian_mass(self, d: int) -> float:
        return float(special.ndtr(self.threshold))


@dataclass(frozen=True)
class CenteredBall:
    radius: float

    def contains(self, pts: np.ndarray, scale: float = 1.0) -> np.ndarray:
        pts = np.asarray(pts)
        return np.einsum("...i,...i->...", pts, pts) <= (self.radius * scale) ** 2

    def gaussian_mass(self, d: int) -> float:
        return float(stats.chi2.cdf(self.radius**2, df=d))


@dataclass(frozen=True)
class AllSpace:
    def contains(self, pts: np.ndarray, scale: float = 1.0) -> np.ndarray:
        return np.ones(np.asarray(pts).shape[:-1], dtype=bool)

    def gaussian_mass(self, d: int) -> float:
        return 1.0


@dataclass(frozen=True)
class EmptySet:
    def contains(self, pts: np.ndarray, scale: float = 1.0) -> np.ndarray:
        return np.zeros(np.asarray(pts).shape[:-1], dtype=bool)

    def gaussian_mass(self, d: int) -> float:
        return 0.0


@dataclass(frozen=True)
class SetRegion:
    """Wraps a set descriptor; Gaussian mass by a one-time Monte Carlo."""

    set_: geometry.SetDescriptor
    mc_seed: int = 0

    def contains(self, pts: np.ndarray, scale: float = 1.0) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return geometry.contains(self.set_, pts / scale if scale != 1.0 else pts)

    def gaussian_mass(self, d: int) -> float:
        rng = np.random.default_rng(self.mc_seed)
        z = rng.standard_normal((_MC_SAMPLES, d))
        return float(geometry.contains(self.set_, z).mean())


Region = HalfSpace | CenteredBall | AllSpace | EmptySet | SetRegion


def region_label(region: Region) -> str:
    if isinstance(region, HalfSpace):
        return f"halfspace(x1<={region.threshold:g})"
    if isinstance(region, CenteredBall):
        return f"ball(r={region.radius:g})"
    if isinstance(region, AllSpace):
        return "all"
    if isinstance(region, EmptySet):
        return "empty"
    return f"set({type(region.set_).__name__.lower()})"
