"""Deterministic geometry: measurable test sets, uniform samplers, and the
cylinder machinery behind the volume-persistence argument.

Sets are closed-form-measurable descriptors (balls, boxes, cylinders and
disjoint unions of fattened segments).  The kernel double integrals over
cylinders are estimated by Monte Carlo pair sampling, which keeps them
dimension-agnostic; the 1d reference integral is done by panel quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from ibflab.quadrature import integrate_panels, log_spaced_edges

Array = np.ndarray


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


# ---------------------------------------------------------------------------
# set descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("ball radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self):
        return len(self.center)


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or any(h <= l for l, h in zip(lo, hi)):
            raise ValueError("box needs hi > lo per coordinate")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return len(self.lo)


@dataclass(frozen=True)
class Cylinder:
    """Axis-aligned-by-frame cylinder: axial extent +-half_length, radius in
    the orthogonal complement.  The canonical centered cylinder of length
    2L and radius delta is Cylinder(center=0, axis=e1, half_length=L,
    radius=delta)."""

    center: tuple
    axis: tuple
    half_length: float
    radius: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        n = np.linalg.norm(axis)
        if n == 0:
            raise ValueError("cylinder axis must be nonzero")
        if self.half_length <= 0 or self.radius <= 0:
            raise ValueError("cylinder half_length and radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "axis", tuple(float(a) for a in axis / n))
        object.__setattr__(self, "half_length", float(self.half_length))
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self):
        return len(self.center)


@dataclass(frozen=True)
class Segment:
    a: tuple
    b: tuple

    def __post_init__(self):
        a = tuple(float(v) for v in self.a)
        b = tuple(float(v) for v in self.b)
        if len(a) != len(b):
            raise ValueError("segment endpoints must share a dimension")
        if all(x == y for x, y in zip(a, b)):
            raise ValueError("segment endpoints must differ")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def dim(self):
        return len(self.a)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.subtract(self.b, self.a)))

    @property
    def direction(self) -> Array:
        v = np.subtract(self.b, self.a)
        return v / np.linalg.norm(v)


@dataclass(frozen=True)
class PiecewiseCylinder:
    """Disjoint union of segments fattened by a common radius."""

    segments: tuple
    radius: float

    def __post_init__(self):
        segs = tuple(self.segments)
        if not segs:
            raise ValueError("piecewise cylinder needs at least one segment")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        d = segs[0].dim
        if any(s.dim != d for s in segs):
            raise ValueError("segments must share a dimension")
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self):
        return self.segments[0].dim


SetDescriptor = Ball | Box | Cylinder | PiecewiseCylinder


def _cyl_frame(axis: Array) -> Array:
    """Orthonormal complement of the axis, deterministic, shape (d, d-1)."""
    d = len(axis)
    m = np.column_stack([axis, np.eye(d)])
    q, _ = np.linalg.qr(m)
    # first column is +-axis; the remaining d-1 columns span its complement
    return q[:, 1:d]


def segment_distance(s1: Segment, s2: Segment) -> float:
    """Minimum Euclidean distance between two segments."""
    p, q = np.asarray(s1.a), np.asarray(s1.b)
    r, s = np.asarray(s2.a), np.asarray(s2.b)
    u, v, w = q - p, s - r, p - r
    a, b, c = u @ u, u @ v, v @ v
    dd, e = u @ w, v @ w
    den = a * c - b * b
    if den > 1e-14 * a * c:
        t = np.clip((b * e - c * dd) / den, 0.0, 1.0)
    else:
        t = 0.0
    # refine alternating projections: with convex segments two passes suffice
    for _ in range(2):
        srm = np.clip((b * t + e) / c, 0.0, 1.0) if c > 0 else 0.0
        t = np.clip((b * srm - dd) / a, 0.0, 1.0) if a > 0 else 0.0
    srm = np.clip((b * t + e) / c, 0.0, 1.0) if c > 0 else 0.0
    diff = (p + t * u) - (r + srm * v)
    return float(np.linalg.norm(diff))


def measure(set_: SetDescriptor) -> float:
    """Closed-form Lebesgue measure of a descriptor."""
    if isinstance(set_, Ball):
        return unit_ball_volume(set_.dim) * set_.radius**set_.dim
    if isinstance(set_, Box):
        return float(np.prod(np.subtract(set_.hi, set_.lo)))
    if isinstance(set_, Cylinder):
        d = set_.dim
        return 2.0 * set_.half_length * unit_ball_volume(d - 1) * set_.radius ** (d - 1)
    if isinstance(set_, PiecewiseCylinder):
        d = set_.dim
        segs = set_.segments
        for i in range(len(segs)):
            for j in range(i + 1, len(segs)):
                if segment_distance(segs[i], segs[j]) <= 2 * set_.radius:
                    raise ValueError("fattened segments overlap; measure undefined")
        cross = unit_ball_volume(d - 1) * set_.radius ** (d - 1)
        return cross * sum(s.length for s in segs)
    raise TypeError(f"unsupported set descriptor {type(set_)!r}")


def _ball_samples(rng, n, d, radius):
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / d)
    return x * r[:, None]


def sample_uniform(set_: SetDescriptor, rng: np.random.Generator, n: int = 1) -> Array:
    """n i.i.d. uniform points in the set, shape (n, d)."""
    if isinstance(set_, Ball):
        return np.asarray(set_.center) + _ball_samples(rng, n, set_.dim, set_.radius)
    if isinstance(set_, Box):
        lo, hi = np.asarray(set_.lo), np.asarray(set_.hi)
        return lo + (hi - lo) * rng.random((n, set_.dim))
    if isinstance(set_, Cylinder):
        axis = np.asarray(set_.axis)
        frame = _cyl_frame(axis)
        t = set_.half_length * (2.0 * rng.random(n) - 1.0)
        u = _ball_samples(rng, n, set_.dim - 1, set_.radius)
        return np.asarray(set_.center) + t[:, None] * axis + u @ frame.T
    if isinstance(set_, PiecewiseCylinder):
        segs = set_.segments
        lengths = np.array([s.length for s in segs])
        probs = lengths / lengths.sum()
        idx = rng.choice(len(segs), size=n, p=probs)
        t = rng.random(n)
        u = _ball_samples(rng, n, set_.dim - 1, set_.radius)
        out = np.empty((n, set_.dim))
        for i, seg in enumerate(segs):
            mask = idx == i
            if not np.any(mask):
                continue
            a, b = np.asarray(seg.a), np.asarray(seg.b)
            frame = _cyl_frame(seg.direction)
            out[mask] = a + t[mask, None] * (b - a) + u[mask] @ frame.T
        return out
    raise TypeError(f"unsupported set descriptor {type(set_)!r}")


def contains(set_: SetDescriptor, pts: Array) -> Array:
    """Boolean membership for an array of points of shape (..., d)."""
    pts = np.asarray(pts, dtype=float)
    if isinstance(set_, Ball):
        return np.linalg.norm(pts - np.asarray(set_.center), axis=-1) <= set_.radius
    if isinstance(set_, Box):
        lo, hi = np.asarray(set_.lo), np.asarray(set_.hi)
        return np.all((pts >= lo) & (pts <= hi), axis=-1)
    if isinstance(set_, Cylinder):
        rel = pts - np.asarray(set_.center)
        axis = np.asarray(set_.axis)
        t = rel @ axis
        perp = rel - t[..., None] * axis
        return (np.abs(t) <= set_.half_length) & (
            np.linalg.norm(perp, axis=-1) <= set_.radius
        )
    if isinstance(set_, PiecewiseCylinder):
        out = np.zeros(pts.shape[:-1], dtype=bool)
        for seg in set_.segments:
            a, b = np.asarray(seg.a), np.asarray(seg.b)
            axis = seg.direction
            half = seg.length / 2
            mid = (a + b) / 2
            rel = pts - mid
            t = rel @ axis
            perp = rel - t[..., None] * axis
            out |= (np.abs(t) <= half) & (np.linalg.norm(perp, axis=-1) <= set_.radius)
        return out
    raise TypeError(f"unsupported set descriptor {type(set_)!r}")


def boundary_margin(set_: SetDescriptor, pts: Array) -> Array:
    """Distance from interior points to the set boundary (negative outside).

    Margins are concave along segments for all supported convex variants, so
    segment clearances can be evaluated at endpoints only.
    """
    pts = np.asarray(pts, dtype=float)
    if isinstance(set_, Ball):
        return set_.radius - np.linalg.norm(pts - np.asarray(set_.center), axis=-1)
    if isinstance(set_, Box):
        lo, hi = np.asarray(set_.lo), np.asarray(set_.hi)
        return np.minimum((pts - lo).min(axis=-1), (hi - pts).min(axis=-1))
    if isinstance(set_, Cylinder):
        rel = pts - np.asarray(set_.center)
        axis = np.asarray(set_.axis)
        t = rel @ axis
        perp = rel - t[..., None] * axis
        return np.minimum(
            set_.half_length - np.abs(t),
            set_.radius - np.linalg.norm(perp, axis=-1),
        )
    raise TypeError(f"boundary margin unsupported for {type(set_)!r}")


# ---------------------------------------------------------------------------
# kernel integrals over cylinders
# ---------------------------------------------------------------------------


class CylinderRatio(NamedTuple):
    estimate: float
    std_error: float
    line_reference: float


def _check_kernel_monotone(h: Callable, scale: float) -> None:
    probe = np.geomspace(1e-4 * scale, 10.0 * scale, 512)
    vals = np.asarray(h(probe), dtype=float)
    if np.any(np.diff(vals) > 1e-9 * np.maximum(np.abs(vals[:-1]), 1.0)):
        raise ValueError("kernel must be nonincreasing")


def kernel_line_average(h: Callable, L: float, n_panels: int = 200) -> float:
    """(1/2L) * integral of h(|r|) over [-L, L] by panel quadrature."""
    lo = 1e-9 * L
    head = h(np.array([lo / 2]))[0] * lo  # constant extension below the grid floor
    edges = log_spaced_edges(lo, L, n_panels)
    return float((head + integrate_panels(h, edges)) / L)


def cylinder_kernel_ratio(
    h: Callable,
    L: float,
    delta: float,
    n_samples: int,
    d: int = 2,
    rng: np.random.Generator | None = None,
    center=None,
    axis=None,
) -> CylinderRatio:
    """Normalized kernel double integral over the cylinder of length 2L.

    Monte Carlo estimate of (1/lambda^2(Z)) * int_{Z x Z} h(|x-y|) with
    Z the cylinder of axial extent +-L and radius delta, together with the
    1d line reference (1/2L) int_{-L}^{L} h(|r|) dr.  The estimate never
    exceeds the reference (up to noise) for nonincreasing h.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    _check_kernel_monotone(h, max(L, delta))
    cyl = Cylinder(
        center=tuple(center) if center is not None else (0.0,) * d,
        axis=tuple(axis) if axis is not None else (1.0,) + (0.0,) * (d - 1),
        half_length=L,
        radius=delta,
    )
    x = sample_uniform(cyl, rng, n_samples)
    y = sample_uniform(cyl, rng, n_samples)
    vals = np.asarray(h(np.linalg.norm(x - y, axis=1)), dtype=float)
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_samples))
    return CylinderRatio(est, se, kernel_line_average(h, L))


# ---------------------------------------------------------------------------
# segment extraction from a polyline
# ---------------------------------------------------------------------------


class ExtractionResult(NamedTuple):
    segments: list
    bar_delta: float
    segment_length: float
    chord: tuple
    slab_width: float


class SlabError(ValueError):
    def __init__(self, slab_index: int, crossed: bool):
        self.slab_index = slab_index
        self.crossed = crossed
        detail = "crossed but holds no whole segment" if crossed else "is never crossed"
        super().__init__(f"slab {slab_index} {detail}")


def _polyline_checks(polyline: Sequence[Segment], domain: SetDescriptor):
    lengths = np.array([s.length for s in polyline])
    l = float(lengths[0])
    if np.any(np.abs(lengths - l) > 1e-9 * l):
        raise ValueError("polyline segments must have equal lengths")
    for s, t in zip(polyline, polyline[1:]):
        if np.linalg.norm(np.subtract(s.b, t.a)) > 1e-9 * l:
            raise ValueError("polyline must be connected end to end")
    verts = np.array([polyline[0].a] + [s.b for s in polyline])
    if np.any(boundary_margin(domain, verts) <= 0):
        raise ValueError("polyline must lie strictly inside the domain")
    return l, verts


def extract_segments(
    polyline: Sequence[Segment], L: float, domain: SetDescriptor
) -> ExtractionResult:
    """Select disjoint whole segments, one in every second chord slab.

    Finds a chord of length >= L between two polyline vertices, rounds L
    down to a multiple of six segment lengths, partitions the chord into
    slabs of width 3l by orthogonal hyperplanes, and picks the best-cleared
    whole segment strictly inside every second slab.  Returns the selected
    segments together with the clearance radius bar_delta: fattening the
    segments by any radius <= bar_delta keeps them pairwise disjoint and
    inside the domain.  With l <= L/42 (or L a multiple of 6l) the selected
    total length n*l is at least L/7.
    """
    polyline = list(polyline)
    l, verts = _polyline_checks(polyline, domain)
    nv = len(verts)
    diffs = verts[:, None, :] - verts[None, :, :]
    dist = np.linalg.norm(diffs, axis=-1)
    ia, ib = np.unravel_index(np.argmax(dist), dist.shape)
    diam = dist[ia, ib]
    if diam < L:
        raise ValueError(f"polyline diameter {diam:.6g} is below the requested L={L:.6g}")

    # tolerant floor so exact multiples of 6l survive float division
    n_pairs = int(L / (6.0 * l) + 1e-9)
    if n_pairs == 0:
        raise ValueError("L must be at least six segment lengths")
    slab_w = 3.0 * l
    a, b = verts[ia], verts[ib]
    e = (b - a) / diam

    proj_a = np.array([np.dot(np.subtract(s.a, a), e) for s in polyline])
    proj_b = np.array([np.dot(np.subtract(s.b, a), e) for s in polyline])
    eps = 1e-12 * max(L, 1.0)

    selected = []
    face_clearances = []
    for k in range(1, 2 * n_pairs + 1, 2):
        lo, hi = (k - 1) * slab_w, k * slab_w
        inside = (
            (proj_a > lo + eps)
            & (proj_a < hi - eps)
            & (proj_b > lo + eps)
            & (proj_b < hi - eps)
        )
        idx = np.flatnonzero(inside)
        if idx.size == 0:
            # a slab is crossed when some segment's projection interval
            # meets the open slab interval
            crossed = bool(
                np.any((np.minimum(proj_a, proj_b) < hi) & (np.maximum(proj_a, proj_b) > lo))
            )
            raise SlabError(k, crossed)
        clear = np.minimum.reduce(
            [proj_a[idx] - lo, hi - proj_a[idx], proj_b[idx] - lo, hi - proj_b[idx]]
        )
        best = idx[int(np.argmax(clear))]
        selected.append(polyline[best])
        face_clearances.append(float(clear.max()))

    margins = [
        float(np.min(boundary_margin(domain, np.array([s.a, s.b])))) for s in selected
    ]
    min_sep = math.inf
    for i in range(len(selected)):
        for j in range(i + 1, len(selected)):
            min_sep = min(min_sep, segment_distance(selected[i], selected[j]))
    bar_delta = min(min(margins), min(face_clearances), 0.5 * min_sep)
    return ExtractionResult(selected, float(bar_delta), l, (tuple(a), tuple(b)), slab_w)


# ---------------------------------------------------------------------------
# piecewise cylinder vs straight cylinder
# ---------------------------------------------------------------------------


class PiecewiseComparison(NamedTuple):
    piecewise: float
    piecewise_se: float
    straight: float
    straight_se: float


def piecewise_vs_straight(
    h: Callable,
    segments: Sequence[Segment],
    delta: float,
    n_samples: int,
    rng: np.random.Generator | None = None,
) -> PiecewiseComparison:
    """Kernel ratio over a piecewise cylinder vs the straight one of equal size.

    Both double integrals use the same canonical draws: a point is (segment
    pick, axial fraction, perpendicular offset), mapped either into each
    segment's frame or into the straight cylinder formed by laying the
    segments end to end.  With a single segment the two estimates coincide
    exactly (rigid-motion invariance); in general the piecewise ratio should
    not exceed the straight one for nonincreasing kernels.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    segments = list(segments)
    n = len(segments)
    d = segments[0].dim
    lengths = np.array([s.length for s in segments])
    l = float(lengths[0])
    if np.any(np.abs(lengths - l) > 1e-9 * l):
        raise ValueError("segments must share a common length")
    for i in range(n):
        for j in range(i + 1, n):
            if segment_distance(segments[i], segments[j]) <= 2 * delta:
                raise ValueError("fattened segments overlap")
    _check_kernel_monotone(h, max(n * l, delta))

    frames = []
    for seg in segments:
        frames.append((np.asarray(seg.a), np.asarray(seg.b), _cyl_frame(seg.direction)))

    def draw(count):
        idx = rng.integers(0, n, size=count)
        t = rng.random(count)
        u = _ball_samples(rng, count, d - 1, delta)
        return idx, t, u

    def piecewise_points(idx, t, u):
        out = np.empty((len(idx), d))
        for i, (a, b, fr) in enumerate(frames):
            m = idx == i
            if np.any(m):
                out[m] = a + t[m, None] * (b - a) + u[m] @ fr.T
        return out

    straight_frame = _cyl_frame(np.eye(d)[0])

    def straight_points(idx, t, u):
        axial = (idx + t) * l - 0.5 * n * l
        return axial[:, None] * np.eye(d)[0] + u @ straight_frame.T

    ix, tx, ux = draw(n_samples)
    iy, ty, uy = draw(n_samples)
    pw = np.asarray(
        h(np.linalg.norm(piecewise_points(ix, tx, ux) - piecewise_points(iy, ty, uy), axis=1))
    )
    stv = np.asarray(
        h(np.linalg.norm(straight_points(ix, tx, ux) - straight_points(iy, ty, uy), axis=1))
    )
    return PiecewiseComparison(
        float(pw.mean()),
        float(pw.std(ddof=1) / math.sqrt(n_samples)),
        float(stv.mean()),
        float(stv.std(ddof=1) / math.sqrt(n_samples)),
    )
