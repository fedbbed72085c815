"""Euler-Maruyama integrators for the n-point motion and the separation
process.

Each time step draws the joint Gaussian increment of all tracked quantities
with its exact covariance assembled from the model: position blocks
b(x_p - x_q), and (for the augmented system used by the linearization
module) velocity-gradient blocks from the first and second derivatives of
b.  A particle whose every partner sits beyond the coupling cutoff (where
the Gaussian profiles are below double precision) receives its exact
independent marginal directly; the remaining coupled subset is factorized
per replicate.  This keeps the per-step cost proportional to how entangled
the configuration still is without approximating the increment law.

Noise layout: within a replicate, one standard-normal vector per step in
canonical particle order (positions block then gradient block).  Canonical
order is the lexicographic order of the initial positions, so permuting
the input points permutes the output trajectories bit for bit.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from ibflab.covmodel import (
    IsotropicModel,
    b_blocks,
    beta_params,
    gradient_cov_matrix,
    one_minus_longitudinal,
    one_minus_transversal,
    radial_coefficients,
)
from ibflab.rng import DYNAMICS, derive_rng

log = logging.getLogger("ibflab.simcore")

# beyond these many length scales every pair block of the step covariance is
# below double-precision resolution relative to the unit diagonal, so
# dropping it is exact in float64: exp(-8.5^2/2) ~ 2.1e-16 < 2^-52 for the
# plain position blocks; the derivative blocks carry polynomial prefactors
# and need the wider margin
POSITION_CUTOFF_SCALES = 8.5
COUPLING_CUTOFF_SCALES = 10.0


@dataclass(frozen=True)
class StepConfig:
    """Time step, regularization and seeding for the integrators."""

    dt: float
    jitter: float = 1e-12
    seed: int = 0
    scheme: str = "euler-maruyama"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")
        if self.scheme != "euler-maruyama":
            raise ValueError("only the euler-maruyama scheme is implemented")


@dataclass
class NPointState:
    positions: np.ndarray  # (n, d)
    time: float = 0.0
    step_count: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 2:
            raise ValueError("positions must be an (n, d) array")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")


class Trajectory(NamedTuple):
    times: np.ndarray  # (k,)
    positions: np.ndarray  # (k, n, d) or (replicates, k, n, d)


# ---------------------------------------------------------------------------
# joint step covariance
# ---------------------------------------------------------------------------


def joint_step_covariance(
    model: IsotropicModel, points: np.ndarray, with_jacobians: bool = False
) -> np.ndarray:
    """Per-unit-time covariance of the stacked increment vector.

    Layout: first all position coordinates (particle-major), then all
    velocity-gradient entries (particle-major, row-major d x d).  Multiply
    by dt for the per-step covariance.

    Assembly writes each small index combination straight into a strided
    view of the output: the per-pair scalar fields are the only
    intermediates, which keeps the memory traffic linear in the matrix
    size (this step dominates the integrator cost for large marker sets).
    """
    pos = np.asarray(points, dtype=float)
    single = pos.ndim == 2
    if single:
        pos = pos[None]
    g, k, d = pos.shape
    z = pos[:, :, None, :] - pos[:, None, :, :]  # (g, k, k, d)
    q = np.einsum("gpqa,gpqa->gpq", z, z)
    co = radial_coefficients(model, q, order=2 if with_jacobians else 0)
    F, G = co["F"], co["G"]
    za = [z[..., a] for a in range(d)]
    m_pos = k * d
    m = m_pos + (k * d * d if with_jacobians else 0)
    cov = np.empty((g, m, m))

    def dl(i, j):
        return 1.0 if i == j else 0.0

    for i in range(d):
        for j in range(d):
            cov[:, i:m_pos:d, j:m_pos:d] = F * za[i] * za[j] + (G if i == j else 0.0)

    if not with_jacobians:
        return cov[0] if single else cov

    F1, F2, G1, G2 = co["F1"], co["F2"], co["G1"], co["G2"]
    dd = d * d

    # cross block: E[dx^p_i dF^q_kl] = -d_l b_ik evaluated at x_p - x_q
    for i in range(d):
        row = slice(i, m_pos, d)
        for kk in range(d):
            zik = za[i] * za[kk]
            for l in range(d):
                val = -(
                    2.0 * F1 * za[l] * zik
                    + F * (dl(i, l) * za[kk] + dl(kk, l) * za[i])
                    + 2.0 * G1 * za[l] * dl(i, kk)
                )
                col = slice(m_pos + kk * d + l, m, dd)
                cov[:, row, col] = val
                cov[:, col, row] = val.transpose(0, 2, 1)

    # gradient block: E[dF^p_ij dF^q_kl] = -d_j d_l b_ik at x_p - x_q
    for i in range(d):
        for kk in range(d):
            zik = za[i] * za[kk]
            base_f = F * dl(i, kk)
            for j in range(d):
                row = slice(m_pos + i * d + j, m, dd)
                for l in range(d):
                    if (kk * d + l) < (i * d + j):
                        continue
                    val = -(
                        4.0 * F2 * za[j] * za[l] * zik
                        + 2.0
                        * F1
                        * (
                            dl(j, l) * zik
                            + za[j] * (dl(i, l) * za[kk] + dl(kk, l) * za[i])
                            + za[l] * (dl(i, j) * za[kk] + dl(kk, j) * za[i])
                        )
                        + F * (dl(i, j) * dl(kk, l) + dl(kk, j) * dl(i, l))
                        + 4.0 * G2 * za[j] * za[l] * dl(i, kk)
                        + 2.0 * G1 * dl(j, l) * dl(i, kk)
                    )
                    col = slice(m_pos + kk * d + l, m, dd)
                    cov[:, row, col] = val
                    if (kk * d + l) != (i * d + j):
                        cov[:, col, row] = val.transpose(0, 2, 1)
    return cov[0] if single else cov


def divergence_rate(model: IsotropicModel):
    """Radial profile behind sum_l d_l b_il(z) = z_i * divergence_rate(|z|^2).

    Vanishes identically for the volume-preserving member.  This is the
    coupling between a particle's displacement and the other particle's
    velocity-gradient trace.
    """
    d = model.d

    def divr(q):
        q = np.asarray(q, dtype=float)
        co = radial_coefficients(model, q, order=1)
        return 2.0 * co["F1"] * q + (d + 1) * co["F"] + 2.0 * co["G1"]

    return divr


def trace_covariance_rate(model: IsotropicModel):
    """Cov(tr dF^p, tr dF^q)/dt as a function of the squared separation.

    Equals -sum_{ik} d_i d_k b_ik at the pair separation; at zero this is
    the gradient-trace variance rate, and it vanishes identically for
    volume-preserving members.
    """
    d = model.d

    def tt(q):
        q = np.asarray(q, dtype=float)
        co = radial_coefficients(model, q, order=2)
        return -(
            4.0 * co["F2"] * q**2
            + 2.0 * co["F1"] * q * (2 * d + 3)
            + co["F"] * d * (d + 1)
            + 4.0 * co["G2"] * q
            + 2.0 * co["G1"] * d
        )

    return tt


def trace_step_covariance(model: IsotropicModel, points: np.ndarray) -> np.ndarray:
    """Per-unit-time covariance of stacked (positions, gradient traces).

    Layout: all position coordinates (particle-major), then one gradient
    trace per particle.  This is the marginal of the full augmented
    covariance under the map dF -> tr dF, and is all the linearization
    state a determinant needs.
    """
    pos = np.asarray(points, dtype=float)
    single = pos.ndim == 2
    if single:
        pos = pos[None]
    g, k, d = pos.shape
    z = pos[:, :, None, :] - pos[:, None, :, :]
    q = np.einsum("gpqa,gpqa->gpq", z, z)
    co = radial_coefficients(model, q, order=0)
    divr = divergence_rate(model)(q)
    tt = trace_covariance_rate(model)(q)
    m_pos = k * d
    m = m_pos + k
    cov = np.empty((g, m, m))
    for i in range(d):
        for j in range(d):
            cov[:, i:m_pos:d, j:m_pos:d] = co["F"] * z[..., i] * z[..., j] + (
                co["G"] if i == j else 0.0
            )
    for i in range(d):
        val = -z[..., i] * divr  # E[dx_p^i tr dF^q]
        cov[:, i:m_pos:d, m_pos:] = val
        cov[:, m_pos:, i:m_pos:d] = val.transpose(0, 2, 1)
    cov[:, m_pos:, m_pos:] = tt
    return cov[0] if single else cov


def gradient_factor(model: IsotropicModel) -> np.ndarray:
    """Symmetric square root of the (d^2, d^2) velocity-gradient covariance.

    The symmetric root keeps exact null directions exactly null, so for the
    volume-preserving member the trace of every sampled gradient increment
    vanishes to machine precision.
    """
    c = gradient_cov_matrix(model)
    w, v = np.linalg.eigh(c)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def _factorize(cov: np.ndarray, jitter: float) -> np.ndarray:
    """Batched factor L with L L^T = cov (+ jitter I), robust to rank loss."""
    m = cov.shape[-1]
    eye = np.eye(m)
    try:
        return np.linalg.cholesky(cov + jitter * eye)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(cov + max(jitter, 1e-12) * 1e4 * eye)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        log.warning(
            "step covariance factorization fell back to eigenvalue clipping "
            "(min eigenvalue %.3e)",
            float(w.min()),
        )
        w = np.clip(w, 0.0, None)
        return v * np.sqrt(w)[..., None, :]


def _canonical_order(points: np.ndarray) -> np.ndarray:
    keys = tuple(points[:, k] for k in reversed(range(points.shape[1])))
    return np.lexsort(keys)


class _BatchStepper:
    """Advances batched replicates of the coupled particle system.

    Modes: "positions" (n-point motion), "jacobians" (positions plus full
    velocity-gradient increments), "traces" (positions plus gradient
    traces, enough to propagate determinants exactly in law).
    """

    def __init__(self, model, cfg, rngs, mode="positions", max_block_floats=3.0e7):
        if mode not in ("positions", "jacobians", "traces"):
            raise ValueError(f"unknown stepper mode {mode!r}")
        self.model = model
        self.cfg = cfg
        self.rngs = rngs
        self.mode = mode
        scales = POSITION_CUTOFF_SCALES if mode == "positions" else COUPLING_CUTOFF_SCALES
        self.cut2 = (scales * model.ell) ** 2
        self.grad_factor = gradient_factor(model) if mode == "jacobians" else None
        self.trace_sd = (
            math.sqrt(max(trace_covariance_rate(model)(0.0), 0.0))
            if mode == "traces"
            else None
        )
        self.max_block_floats = max_block_floats

    def _extra_per_particle(self, d):
        return {"positions": 0, "jacobians": d * d, "traces": 1}[self.mode]

    def step(self, pos: np.ndarray, extra: np.ndarray | None):
        """One step; ``extra`` is jacobians (r, n, d, d) or trace sums (r, n)."""
        cfg = self.cfg
        r, n, d = pos.shape
        m_pos = n * d
        e = self._extra_per_particle(d)
        m_tot = m_pos + n * e
        sq = math.sqrt(cfg.dt)
        z = np.stack([rng.standard_normal(m_tot) for rng in self.rngs])

        # exact independent marginals for every particle; coupled subsets
        # overwrite theirs below
        dx = sq * z[:, :m_pos].reshape(r, n, d)
        if self.mode == "jacobians":
            dex = sq * (z[:, m_pos:].reshape(r, n, d * d) @ self.grad_factor.T)
            dex = dex.reshape(r, n, d, d)
        elif self.mode == "traces":
            dex = sq * self.trace_sd * z[:, m_pos:].reshape(r, n)
        else:
            dex = None

        diffs = pos[:, :, None, :] - pos[:, None, :, :]
        q = np.einsum("rpqi,rpqi->rpq", diffs, diffs)
        near = q < self.cut2
        idx_eye = np.arange(n)
        near[:, idx_eye, idx_eye] = False
        involved = near.any(axis=2)

        groups: dict[int, list[int]] = {}
        subsets = {}
        for ri in range(r):
            s = np.flatnonzero(involved[ri])
            if s.size:
                groups.setdefault(s.size, []).append(ri)
                subsets[ri] = s

        for k, rs in groups.items():
            m_sub = k * (d + e)
            chunk = max(1, int(self.max_block_floats // (m_sub * m_sub)))
            for lo in range(0, len(rs), chunk):
                part = rs[lo : lo + chunk]
                self._coupled_update(pos, z, dx, dex, part, subsets, k)

        new_pos = pos + dx
        if self.mode == "jacobians":
            return new_pos, extra + dex @ extra
        if self.mode == "traces":
            # exact frozen-step determinant law: log det accrues the trace
            # draw minus half its variance rate; a zero-variance trace
            # (volume-preserving member) stays exactly zero despite the
            # factorization jitter
            if self.trace_sd == 0.0:
                return new_pos, extra
            return new_pos, extra + dex - 0.5 * self.trace_sd**2 * cfg.dt
        return new_pos, None

    def _coupled_update(self, pos, z, dx, dex, part, subsets, k):
        model, cfg = self.model, self.cfg
        r, n, d = pos.shape
        e = self._extra_per_particle(d)
        g = len(part)
        idx = np.stack([subsets[ri] for ri in part])  # (g, k)
        rows = np.asarray(part)[:, None]
        sub_pos = pos[rows, idx]  # (g, k, d)
        if self.mode == "traces":
            cov = trace_step_covariance(model, sub_pos)
        else:
            cov = joint_step_covariance(model, sub_pos, self.mode == "jacobians")
        fac = _factorize(cov, cfg.jitter)

        pos_cols = (idx[:, :, None] * d + np.arange(d)).reshape(g, k * d)
        cols = pos_cols
        if e:
            extra_cols = (n * d + idx[:, :, None] * e + np.arange(e)).reshape(g, k * e)
            cols = np.concatenate([pos_cols, extra_cols], axis=1)
        z_sub = z[rows, cols]  # (g, m_sub)
        inc = math.sqrt(cfg.dt) * (fac @ z_sub[:, :, None])[:, :, 0]
        dx[rows, idx] = inc[:, : k * d].reshape(g, k, d)
        if self.mode == "jacobians":
            dex[rows, idx] = inc[:, k * d :].reshape(g, k, d, d)
        elif self.mode == "traces":
            dex[rows, idx] = inc[:, k * d :]


# ---------------------------------------------------------------------------
# public stepping interface
# ---------------------------------------------------------------------------


def npoint_step(
    state: NPointState,
    model: IsotropicModel,
    cfg: StepConfig,
    noise_source: np.random.Generator,
) -> NPointState:
    """One Euler-Maruyama step of the coupled n-point motion.

    Increments are jointly Gaussian with covariance b(x_p - x_q) * dt per
    position block, factorized with diagonal jitter and an eigenvalue-clip
    fallback for numerically semidefinite configurations (coincident
    points).
    """
    stepper = _BatchStepper(model, cfg, [noise_source])
    new_pos, _ = stepper.step(state.positions[None], None)
    if not np.all(np.isfinite(new_pos)):
        raise FloatingPointError("n-point step produced non-finite positions")
    return NPointState(
        positions=new_pos[0],
        time=(state.step_count + 1) * cfg.dt,
        step_count=state.step_count + 1,
    )


def _resolve_steps(T: float, dt: float, save_times: Sequence[float] | None):
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"horizon {T} is not an integer multiple of dt={dt}")
    if save_times is None:
        save_times = [T]
    save_steps = []
    for t in save_times:
        k = int(round(t / dt))
        if abs(k * dt - t) > 1e-9 * max(1.0, abs(t)) or not 0 <= k <= n_steps:
            raise ValueError(f"save time {t} is not on the step grid")
        save_steps.append(k)
    return n_steps, save_steps, list(save_times)


def simulate_npoints_batch(
    initial: np.ndarray,
    model: IsotropicModel,
    cfg: StepConfig,
    T: float,
    save_times: Sequence[float] | None = None,
    replicates: int | None = None,
    replicate_offset: int = 0,
) -> Trajectory:
    """Replicated n-point trajectories, one independent stream per replicate.

    ``initial`` is (n, d) (shared start) or (replicates, n, d).  Replicate
    r draws from the stream derived from (cfg.seed, replicate_offset + r),
    so results do not depend on batch splits.
    """
    initial = np.asarray(initial, dtype=float)
    if initial.ndim == 2:
        if replicates is None:
            replicates = 1
        pos0 = np.broadcast_to(initial, (replicates, *initial.shape)).copy()
    else:
        pos0 = initial.copy()
        replicates = pos0.shape[0]
    r, n, d = pos0.shape
    if d != model.d:
        raise ValueError("initial positions do not match the model dimension")

    n_steps, save_steps, times = _resolve_steps(T, cfg.dt, save_times)
    orders = np.stack([_canonical_order(p) for p in pos0])
    inv = np.argsort(orders, axis=1)
    pos = np.take_along_axis(pos0, orders[:, :, None], axis=1)

    rngs = [derive_rng(cfg.seed, DYNAMICS, replicate_offset + i) for i in range(r)]
    stepper = _BatchStepper(model, cfg, rngs)

    def user_order(p):
        return np.take_along_axis(p, inv[:, :, None], axis=1)

    save_set = set(save_steps)
    out = np.empty((r, len(save_steps), n, d))
    for j, k_step in enumerate(save_steps):
        if k_step == 0:
            out[:, j] = user_order(pos)
    for k_step in range(1, n_steps + 1):
        pos, _ = stepper.step(pos, None)
        if k_step in save_set:
            for j, ks in enumerate(save_steps):
                if ks == k_step:
                    out[:, j] = user_order(pos)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("simulation produced non-finite positions")
    return Trajectory(np.asarray(times, dtype=float), out)


def simulate_npoints(
    initial: np.ndarray,
    model: IsotropicModel,
    cfg: StepConfig,
    T: float,
    save_times: Sequence[float] | None = None,
) -> Trajectory:
    """Single n-point trajectory (replicate 0 of the batched driver)."""
    traj = simulate_npoints_batch(initial, model, cfg, T, save_times, replicates=1)
    return Trajectory(traj.times, traj.positions[0])


# ---------------------------------------------------------------------------
# separation process
# ---------------------------------------------------------------------------

_SMALL_R_SCALES = 1e-8


def distance_step(
    r, model: IsotropicModel, cfg: StepConfig, noise
) -> np.ndarray | float:
    """One Euler-Maruyama step of the scalar separation diffusion.

    dr = (d-1)(1 - B_N(r))/r dt + sqrt(2 (1 - B_L(r))) dW with r = 0
    absorbing; negative proposals (discretization artifacts, the diffusion
    coefficient vanishes linearly at zero) are reflected to their absolute
    value.  ``noise`` is a standard normal draw of the same shape as r.
    """
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise ValueError("separation must be nonnegative")
    xi = np.asarray(noise, dtype=float)
    d = model.d
    bl, bn = beta_params(model)
    small = r_arr < _SMALL_R_SCALES * model.ell
    safe = np.where(small, 1.0, r_arr)
    drift = np.where(
        small,
        (d - 1) * bn * r_arr / 2.0,
        (d - 1) * one_minus_transversal(model, r_arr) / safe,
    )
    diffusion = np.where(
        small,
        math.sqrt(bl) * r_arr,
        np.sqrt(2.0 * one_minus_longitudinal(model, r_arr)),
    )
    prop = r_arr + drift * cfg.dt + diffusion * math.sqrt(cfg.dt) * xi
    out = np.where(r_arr == 0.0, 0.0, np.abs(prop))
    return out if out.ndim else float(out)


def simulate_distance(
    r0: float,
    model: IsotropicModel,
    cfg: StepConfig,
    T: float,
    replicates: int,
) -> np.ndarray:
    """Terminal separations of the scalar diffusion for many replicates."""
    n_steps, _, _ = _resolve_steps(T, cfg.dt, None)
    rng = derive_rng(cfg.seed, DYNAMICS, 0)
    r = np.full(replicates, float(r0))
    for _ in range(n_steps):
        r = distance_step(r, model, cfg, rng.standard_normal(replicates))
    return r


# ---------------------------------------------------------------------------
# quadratic variation functional
# ---------------------------------------------------------------------------


def quad_variation_curve(
    times: np.ndarray, positions: np.ndarray, model: IsotropicModel, xi: np.ndarray
):
    """Normalized quadratic variation of a pair projection along a path.

    For the two-point path (x_t, y_t) and a unit direction xi = (a, b) in
    R^{2d}, the projection sum(a_i x_t^i) + sum(b_i y_t^i) is a martingale
    whose quadratic variation is

        t * (|a|^2 + |b|^2) + 2 * sum_ij a_i b_j int_0^t b_ij(x_s - y_s) ds.

    The integral is evaluated by the trapezoid rule on the saved path.
    Returns (times[1:], qv_t / t); for transient models the curve tends
    to |xi|^2 = 1.
    """
    xi = np.asarray(xi, dtype=float)
    d = model.d
    if xi.shape != (2 * d,):
        raise ValueError(f"projection direction must have length {2 * d}")
    if abs(np.linalg.norm(xi) - 1.0) > 1e-9:
        raise ValueError("projection direction must be a unit vector")
    a, b = xi[:d], xi[d:]
    pos = np.asarray(positions, dtype=float)
    if pos.shape[-2] != 2:
        raise ValueError("quadratic variation expects a two-point trajectory")
    diff = pos[..., 0, :] - pos[..., 1, :]
    bb = b_blocks(model, diff)  # (..., k, d, d)
    integrand = np.einsum("i,...ij,j->...", a, bb, b)
    t = np.asarray(times, dtype=float)
    dt_seg = np.diff(t)
    cum = np.cumsum(0.5 * (integrand[..., 1:] + integrand[..., :-1]) * dt_seg, axis=-1)
    qv = t[1:] * (a @ a + b @ b) + 2.0 * cum
    return t[1:], qv / t[1:]


# ---------------------------------------------------------------------------
# binary snapshots
# ---------------------------------------------------------------------------

_MAGIC = b"IBF1"


def write_snapshots(path, times: np.ndarray, positions: np.ndarray) -> None:
    """Flat little-endian float64 snapshot file.

    Header: magic "IBF1", then d, n, count as little-endian uint64; body:
    count float64 times followed by count*n*d float64 coordinates.
    """
    times = np.asarray(times, dtype="<f8")
    pos = np.asarray(positions, dtype="<f8")
    count, n, d = pos.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQQ", d, n, count))
        fh.write(times.tobytes())
        fh.write(pos.tobytes())


def read_snapshots(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a snapshot file")
        d, n, count = struct.unpack("<QQQ", fh.read(24))
        times = np.frombuffer(fh.read(8 * count), dtype="<f8")
        pos = np.frombuffer(fh.read(8 * count * n * d), dtype="<f8").reshape(count, n, d)
    return times.copy(), pos.copy()
