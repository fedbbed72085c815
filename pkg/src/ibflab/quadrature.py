"""Fixed-order Gauss-Legendre panel quadrature.

Used for the deterministic integral oracles: the separation-density integral
behind the invariant pair density, its cumulative tails, pair-distance
moments over balls and cylinders, and the 1d kernel reference integral.
Panels are supplied by the caller (typically log-spaced toward an integrable
endpoint singularity); within each panel a fixed-order rule is exact for
smooth integrands at the panel widths we use.
"""

from __future__ import annotations

import numpy as np

_NODE_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gl_nodes(order: int):
    if order not in _NODE_CACHE:
        x, w = np.polynomial.legendre.leggauss(order)
        _NODE_CACHE[order] = (x, w)
    return _NODE_CACHE[order]


def panel_nodes(edges: np.ndarray, order: int = 16):
    """Nodes and weights for Gauss-Legendre rules on consecutive panels.

    edges has shape (m+1,); returns nodes and weights of shape (m, order).
    """
    edges = np.asarray(edges, dtype=float)
    x, w = _gl_nodes(order)
    lo = edges[:-1][:, None]
    hi = edges[1:][:, None]
    half = 0.5 * (hi - lo)
    nodes = lo + half * (x[None, :] + 1.0)
    weights = half * w[None, :]
    return nodes, weights


def integrate_panels(f, edges, order: int = 16) -> float:
    """Integral of a vectorized callable over the union of panels."""
    nodes, weights = panel_nodes(edges, order)
    return float(np.sum(f(nodes) * weights))


def cumulative_tail(f, edges, order: int = 16) -> np.ndarray:
    """Tail integrals I_k = int_{edges[k]}^{edges[-1]} f for every edge.

    Returns an array of length m+1 with I_m = 0; f must be vectorized.
    """
    nodes, weights = panel_nodes(edges, order)
    per_panel = np.sum(f(nodes) * weights, axis=1)
    tail = np.zeros(len(per_panel) + 1)
    tail[:-1] = np.cumsum(per_panel[::-1])[::-1]
    return tail


def log_spaced_edges(lo: float, hi: float, m: int) -> np.ndarray:
    if not (0.0 < lo < hi):
        raise ValueError("need 0 < lo < hi")
    return np.geomspace(lo, hi, m + 1)
