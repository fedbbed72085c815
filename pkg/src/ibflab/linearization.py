"""Flow linearization: Jacobian propagation, Lyapunov spectrum estimation,
and marker-based image-volume estimates.

The Jacobian of the flow along a trajectory satisfies dL = dF L, where dF
is the velocity-gradient increment.  One step multiplies by (I + dF) with
dF exactly Gaussian (Ito convention, no drift correction): the expected
determinant of every factor is exactly one, which is what makes the
marker-volume estimator an exact martingale in expectation at any step
size.  For coupled markers the pair (positions, gradients) is drawn
jointly with the cross covariances from the derivative blocks of b.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from ibflab import geometry
from ibflab.covmodel import IsotropicModel
from ibflab.rng import ANALYSIS, DYNAMICS, MARKERS, derive_rng
from ibflab.simcore import StepConfig, _BatchStepper, _canonical_order, gradient_factor


@dataclass
class AugmentedState:
    """Positions plus one flow Jacobian per tracked particle."""

    positions: np.ndarray  # (n, d)
    jacobians: np.ndarray  # (n, d, d)
    time: float = 0.0
    step_count: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.jacobians = np.asarray(self.jacobians, dtype=float)
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.jacobians))):
            raise ValueError("augmented state must be finite")
        if np.any(np.linalg.det(self.jacobians) <= 0):
            raise ValueError("flow Jacobians must have positive determinant")


def onepoint_linearization_step(
    L: np.ndarray, model: IsotropicModel, cfg: StepConfig, noise: np.random.Generator
) -> np.ndarray:
    """One multiplicative Jacobian step L <- (I + dF) L.

    dF is Gaussian with the stationary velocity-gradient covariance times
    dt; its law does not depend on the particle's position.
    """
    d = model.d
    fac = gradient_factor(model)
    df = math.sqrt(cfg.dt) * (fac @ noise.standard_normal(d * d)).reshape(d, d)
    return L + df @ L


class LyapunovEstimate(NamedTuple):
    estimates: np.ndarray  # (d,), nonincreasing
    std_errors: np.ndarray  # (d,)
    per_replicate: np.ndarray  # (replicates, d)


def lyapunov_estimate(
    model: IsotropicModel,
    T: float,
    cfg: StepConfig,
    replicates: int,
    qr_every: int = 10,
    block_steps: int = 1000,
) -> LyapunovEstimate:
    """Lyapunov spectrum from QR-reorthonormalized Jacobian products.

    Propagates one Jacobian per replicate, re-orthonormalizes every
    qr_every steps and accumulates log |R_ii|; the estimates are the
    accumulated logs over T, averaged across replicates.
    """
    d = model.d
    n_steps = int(round(T / cfg.dt))
    if abs(n_steps * cfg.dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("horizon must be a multiple of dt")
    fac = gradient_factor(model)
    rngs = [derive_rng(cfg.seed, DYNAMICS, r) for r in range(replicates)]
    L = np.broadcast_to(np.eye(d), (replicates, d, d)).copy()
    acc = np.zeros((replicates, d))
    sq = math.sqrt(cfg.dt)

    def reorthonormalize(L, acc):
        q, r_mat = np.linalg.qr(L)
        diag = np.diagonal(r_mat, axis1=1, axis2=2)
        sign = np.where(diag < 0, -1.0, 1.0)
        acc += np.log(np.abs(diag))
        return q * sign[:, None, :], acc

    done = 0
    while done < n_steps:
        block = min(block_steps, n_steps - done)
        z = np.stack([rng.standard_normal((block, d * d)) for rng in rngs])
        df = sq * (z @ fac.T).reshape(replicates, block, d, d)
        for k in range(block):
            L = L + df[:, k] @ L
            done_k = done + k + 1
            if done_k % qr_every == 0:
                L, acc = reorthonormalize(L, acc)
        done += block
    if n_steps % qr_every != 0:
        L, acc = reorthonormalize(L, acc)

    per_rep = acc / T
    est = per_rep.mean(axis=0)
    se = per_rep.std(axis=0, ddof=1) / math.sqrt(replicates)
    order = np.argsort(est)[::-1]
    return LyapunovEstimate(est[order], se[order], per_rep[:, order])


@dataclass
class VolumeRun:
    """Replicated marker-volume estimates of lambda(phi_t(A)).

    vhat[r, k] = lambda(A) / n * sum_p det(L_t^(p)) at save time k; the
    marker positions and determinants are kept for the image-dispersion
    statistics and second-moment estimators.
    """

    model: IsotropicModel
    region: geometry.SetDescriptor
    times: np.ndarray  # (k,)
    lam: float
    vhat: np.ndarray  # (replicates, k)
    dets: np.ndarray  # (replicates, k, n)
    positions: np.ndarray  # (replicates, k, n, d)
    min_det: float


def simulate_augmented_batch(
    initial: np.ndarray,
    model: IsotropicModel,
    cfg: StepConfig,
    T: float,
    save_times: Sequence[float] | None = None,
    replicate_offset: int = 0,
):
    """Coupled positions-and-Jacobians trajectories for a replicate batch.

    initial is (replicates, n, d); Jacobians start at the identity.
    Returns (times, positions (r, k, n, d), jacobians (r, k, n, d, d)).
    """
    from ibflab.simcore import _resolve_steps

    pos0 = np.asarray(initial, dtype=float)
    r, n, d = pos0.shape
    n_steps, save_steps, times = _resolve_steps(T, cfg.dt, save_times)
    orders = np.stack([_canonical_order(p) for p in pos0])
    inv = np.argsort(orders, axis=1)
    pos = np.take_along_axis(pos0, orders[:, :, None], axis=1)
    jac = np.broadcast_to(np.eye(d), (r, n, d, d)).copy()

    rngs = [derive_rng(cfg.seed, DYNAMICS, replicate_offset + i) for i in range(r)]
    stepper = _BatchStepper(model, cfg, rngs, mode="jacobians")

    out_pos = np.empty((r, len(save_steps), n, d))
    out_jac = np.empty((r, len(save_steps), n, d, d))

    def snapshot(j):
        out_pos[:, j] = np.take_along_axis(pos, inv[:, :, None], axis=1)
        out_jac[:, j] = np.take_along_axis(jac, inv[:, :, None, None], axis=1)

    for j, k_step in enumerate(save_steps):
        if k_step == 0:
            snapshot(j)
    save_set = set(save_steps)
    for k_step in range(1, n_steps + 1):
        pos, jac = stepper.step(pos, jac)
        if k_step in save_set:
            for j, ks in enumerate(save_steps):
                if ks == k_step:
                    snapshot(j)
    if not (np.all(np.isfinite(out_pos)) and np.all(np.isfinite(out_jac))):
        raise FloatingPointError("augmented simulation produced non-finite values")
    return np.asarray(times, dtype=float), out_pos, out_jac


def volume_estimate(
    region: geometry.SetDescriptor,
    model: IsotropicModel,
    cfg: StepConfig,
    T: float,
    n_markers: int,
    replicates: int,
    save_times: Sequence[float] | None = None,
    replicate_offset: int = 0,
) -> VolumeRun:
    """Image-volume curve from i.i.d. uniform markers and their Jacobians.

    V_t(A) is estimated by lambda(A)/n * sum_p det L_t^(p) with markers
    x_p uniform in A; the estimator is exactly unbiased for the martingale
    mean at every step size (per-factor determinant expectation is one).
    Supports d <= 6 (determinants via LU on small blocks).
    """
    if model.d > 6:
        raise ValueError("volume estimator supports d <= 6")
    lam = geometry.measure(region)
    markers = np.stack(
        [
            geometry.sample_uniform(
                region, derive_rng(cfg.seed, MARKERS, replicate_offset + i), n_markers
            )
            for i in range(replicates)
        ]
    )
    times, pos, jac = simulate_augmented_batch(
        markers, model, cfg, T, save_times, replicate_offset
    )
    dets = np.linalg.det(jac)  # (r, k, n)
    vhat = lam * dets.mean(axis=2)
    return VolumeRun(
        model=model,
        region=region,
        times=times,
        lam=lam,
        vhat=vhat,
        dets=dets,
        positions=pos,
        min_det=float(dets.min()),
    )


def volume_estimate_trace(
    region: geometry.SetDescriptor,
    model: IsotropicModel,
    cfg: StepConfig,
    T: float,
    n_markers: int,
    replicates: int,
    save_times: Sequence[float] | None = None,
    replicate_offset: int = 0,
) -> VolumeRun:
    """Image-volume curve propagating marker determinants in trace form.

    Within a frozen step the determinant of the exact Jacobian factor is
    lognormal: log det accrues the gradient-trace increment minus half its
    variance rate.  Propagating (positions, traces) jointly therefore
    reproduces the determinant law without carrying full matrices; the
    determinants stay positive by construction and the estimator remains an
    exact martingale in expectation.  Same sampling design and report shape
    as volume_estimate.
    """
    from ibflab.simcore import _resolve_steps

    lam = geometry.measure(region)
    markers = np.stack(
        [
            geometry.sample_uniform(
                region, derive_rng(cfg.seed, MARKERS, replicate_offset + i), n_markers
            )
            for i in range(replicates)
        ]
    )
    r, n, d = markers.shape
    n_steps, save_steps, times = _resolve_steps(T, cfg.dt, save_times)
    orders = np.stack([_canonical_order(p) for p in markers])
    inv = np.argsort(orders, axis=1)
    pos = np.take_along_axis(markers, orders[:, :, None], axis=1)
    logdet = np.zeros((r, n))
    rngs = [derive_rng(cfg.seed, DYNAMICS, replicate_offset + i) for i in range(r)]
    stepper = _BatchStepper(model, cfg, rngs, mode="traces")

    out_pos = np.empty((r, len(save_steps), n, d))
    out_log = np.empty((r, len(save_steps), n))

    def snapshot(j):
        out_pos[:, j] = np.take_along_axis(pos, inv[:, :, None], axis=1)
        out_log[:, j] = np.take_along_axis(logdet, inv, axis=1)

    for j, k_step in enumerate(save_steps):
        if k_step == 0:
            snapshot(j)
    save_set = set(save_steps)
    for k_step in range(1, n_steps + 1):
        pos, logdet = stepper.step(pos, logdet)
        if k_step in save_set:
            for j, ks in enumerate(save_steps):
                if ks == k_step:
                    snapshot(j)
    dets = np.exp(out_log)
    return VolumeRun(
        model=model,
        region=region,
        times=np.asarray(times, dtype=float),
        lam=lam,
        vhat=lam * dets.mean(axis=2),
        dets=dets,
        positions=out_pos,
        min_det=float(dets.min()),
    )


class PairMoment(NamedTuple):
    times: np.ndarray
    values: np.ndarray  # (k,) estimates of E[det_x det_y] at fixed separation
    std_errors: np.ndarray


def pair_determinant_moment(
    model: IsotropicModel,
    separation: float,
    T: float,
    cfg: StepConfig,
    replicates: int,
    save_times: Sequence[float] | None = None,
    stream: int = 0,
) -> PairMoment:
    """E[det_x det_y] for two points at a given initial separation.

    Exponential-change-of-measure representation: weighting by the two
    determinants tilts the separation dynamics by the drift
    -2 z divergence_rate(|z|^2), and the weighted expectation becomes
    E-tilted[exp(int_0^t tt(|z_s|^2) ds)] with tt the trace covariance
    rate.  The separation diffuses with its exact covariance
    2(Id - b(z)): longitudinal variance 2(1 - B_L), transversal
    2(1 - B_N).  No determinants are sampled, so the estimate stays usable
    at times where raw determinant products are heavy-tailed.  As t grows
    the value approaches the invariant pair density at the separation.
    """
    from ibflab.covmodel import one_minus_longitudinal, one_minus_transversal
    from ibflab.simcore import _resolve_steps, divergence_rate, trace_covariance_rate

    d = model.d
    n_steps, save_steps, times = _resolve_steps(T, cfg.dt, save_times)
    tt = trace_covariance_rate(model)
    divr = divergence_rate(model)
    rng = derive_rng(cfg.seed, ANALYSIS, stream)

    z = np.zeros((replicates, d))
    z[:, 0] = separation
    acc = np.zeros(replicates)
    rate_prev = tt(np.full(replicates, separation**2))
    out = np.empty((replicates, len(save_steps)))
    save_set = set(save_steps)

    def record(j):
        out[:, j] = np.exp(acc)

    for j, k_step in enumerate(save_steps):
        if k_step == 0:
            record(j)
    sqdt = math.sqrt(cfg.dt)
    for k_step in range(1, n_steps + 1):
        q = np.einsum("ri,ri->r", z, z)
        s = np.sqrt(q)
        unit = np.where(s[:, None] > 0, z / np.maximum(s, 1e-300)[:, None], 0.0)
        xi = rng.standard_normal((replicates, d))
        par = np.einsum("ri,ri->r", unit, xi)
        sd_l = np.sqrt(2.0 * one_minus_longitudinal(model, s))
        sd_n = np.sqrt(2.0 * one_minus_transversal(model, s))
        inc = sd_l[:, None] * par[:, None] * unit + sd_n[:, None] * (
            xi - par[:, None] * unit
        )
        z = z - 2.0 * z * divr(q)[:, None] * cfg.dt + sqdt * inc
        rate_new = tt(np.einsum("ri,ri->r", z, z))
        acc += 0.5 * (rate_prev + rate_new) * cfg.dt
        rate_prev = rate_new
        if k_step in save_set:
            for j, ks in enumerate(save_steps):
                if ks == k_step:
                    record(j)
    return PairMoment(
        times=np.asarray(times, dtype=float),
        values=out.mean(axis=0),
        std_errors=out.std(axis=0, ddof=1) / math.sqrt(replicates),
    )


def second_moment_pair_quadrature(
    region: geometry.Ball,
    model: IsotropicModel,
    T: float,
    cfg: StepConfig,
    replicates_per_node: int = 20_000,
    n_nodes: int = 32,
):
    """E[V_T(A)^2] for a ball by radial quadrature of the pair moment.

    Integrates the fixed-separation pair-determinant moment against the
    ball's pair-distance density on a log-spaced node set.  Returns
    (estimate, std_error).
    """
    from ibflab.invariant import ball_pair_distance_density

    from ibflab.quadrature import panel_nodes

    d = model.d
    radius = region.radius
    lam = geometry.measure(region)
    f = ball_pair_distance_density(d, radius)
    edges = np.geomspace(1e-3 * radius, 2.0 * radius, n_nodes + 1)
    mids = np.sqrt(edges[:-1] * edges[1:])
    # exact pair-density mass per panel; the pair moment is evaluated at the
    # panel midpoint (it varies slowly on the log grid)
    gl_nodes, gl_w = panel_nodes(edges, order=12)
    masses = np.sum(f(gl_nodes) * gl_w, axis=1)
    vals = np.empty(n_nodes)
    ses = np.empty(n_nodes)
    for i, s0 in enumerate(mids):
        pm = pair_determinant_moment(
            model, float(s0), T, cfg, replicates_per_node, save_times=[T], stream=i
        )
        vals[i] = pm.values[-1]
        ses[i] = pm.std_errors[-1]
    est = lam**2 * float(masses @ vals)
    se = lam**2 * float(np.sqrt(np.sum((masses * ses) ** 2)))
    return est, se


class SecondMomentCurve(NamedTuple):
    times: np.ndarray
    mean_square: np.ndarray  # plain second moment of vhat across replicates
    mean_square_se: np.ndarray
    cross: np.ndarray  # cross-marker estimate of E[V_t(A)^2]
    cross_se: np.ndarray


def second_moment_curve(run: VolumeRun) -> SecondMomentCurve:
    """Second-moment estimates of the image volume along the run.

    mean_square is the plain second moment of the marker estimator; it
    contains an O(E[det^2]/n) marker-sampling inflation on top of
    E[V_t(A)^2].  cross averages det_p * det_q over distinct marker pairs,
    which is unbiased for E[V_t(A)^2] itself and is the quantity to compare
    with the invariant-density pair integral.
    """
    r, k, n = run.dets.shape
    sq = run.vhat**2
    s = run.dets.sum(axis=2)
    q = (run.dets**2).sum(axis=2)
    cross_rep = run.lam**2 * (s**2 - q) / (n * (n - 1))
    return SecondMomentCurve(
        times=run.times,
        mean_square=sq.mean(axis=0),
        mean_square_se=sq.std(axis=0, ddof=1) / math.sqrt(r),
        cross=cross_rep.mean(axis=0),
        cross_se=cross_rep.std(axis=0, ddof=1) / math.sqrt(r),
    )
