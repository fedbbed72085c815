import math

import numpy as np
import pytest
from scipy import stats as sps

from ibflab.covmodel import (
    IsotropicModel,
    b_blocks,
    beta_params,
    gradient_cov_matrix,
)
from ibflab.rng import derive_rng
from ibflab.simcore import (
    NPointState,
    StepConfig,
    distance_step,
    gradient_factor,
    joint_step_covariance,
    npoint_step,
    quad_variation_curve,
    read_snapshots,
    simulate_distance,
    simulate_npoints,
    simulate_npoints_batch,
    write_snapshots,
)

M2 = IsotropicModel(d=2, alpha=0.05)
M2S = IsotropicModel(d=2, alpha=0.0)
CFG = StepConfig(dt=1e-3, seed=7)


# --- joint covariance assembly --------------------------------------------------


def fd_joint_covariance(model, pts):
    """Independent assembly path: every block from finite differences of b."""
    n, d = pts.shape
    h, hh = 1e-5, 1e-4

    def b_of(x):
        return b_blocks(model, x)

    def fd_grad(x):
        out = np.zeros((d, d, d))
        for l in range(d):
            e = np.zeros(d)
            e[l] = h
            out[:, :, l] = (b_of(x + e) - b_of(x - e)) / (2 * h)
        return out

    def fd_hess(x):
        out = np.zeros((d, d, d, d))
        base = b_of(x)
        for k in range(d):
            ek = np.zeros(d)
            ek[k] = hh
            out[:, :, k, k] = (b_of(x + ek) - 2 * base + b_of(x - ek)) / hh**2
            for l in range(k + 1, d):
                el = np.zeros(d)
                el[l] = hh
                v = (
                    b_of(x + ek + el)
                    - b_of(x + ek - el)
                    - b_of(x - ek + el)
                    + b_of(x - ek - el)
                ) / (4 * hh**2)
                out[:, :, k, l] = v
                out[:, :, l, k] = v
        return out

    mp, mj = n * d, n * d * d
    cov = np.zeros((mp + mj, mp + mj))
    for p in range(n):
        for q in range(n):
            z = pts[p] - pts[q]
            bb, gb, hb = b_of(z), fd_grad(z), fd_hess(z)
            for i in range(d):
                for k in range(d):
                    cov[p * d + i, q * d + k] = bb[i, k]
                    for l in range(d):
                        cov[p * d + i, mp + q * d * d + k * d + l] = -gb[i, k, l]
                        cov[mp + q * d * d + k * d + l, p * d + i] = -gb[i, k, l]
                    for j in range(d):
                        for l in range(d):
                            cov[mp + p * d * d + i * d + j, mp + q * d * d + k * d + l] = -hb[
                                i, k, j, l
                            ]
    return cov


@pytest.mark.parametrize("model", [IsotropicModel(d=2, alpha=0.3, ell=1.1), IsotropicModel(d=3, alpha=0.7)])
def test_joint_covariance_matches_finite_difference_assembly(model):
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1.5, 1.5, size=(3, model.d))
    built = joint_step_covariance(model, pts, with_jacobians=True)
    fd = fd_joint_covariance(model, pts)
    assert np.max(np.abs(built - fd)) < 1e-6
    np.testing.assert_allclose(built, built.T, atol=1e-14)
    assert np.linalg.eigvalsh(built).min() > -1e-10


def test_joint_covariance_position_block_consistency():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, size=(4, 2))
    full = joint_step_covariance(M2, pts, with_jacobians=True)
    pos_only = joint_step_covariance(M2, pts, with_jacobians=False)
    np.testing.assert_array_equal(pos_only, full[:8, :8])


def test_gradient_factor_reproduces_covariance_and_kills_trace():
    for m in (M2, M2S, IsotropicModel(d=3, alpha=0.4)):
        f = gradient_factor(m)
        np.testing.assert_allclose(f @ f.T, gradient_cov_matrix(m), atol=1e-12)
    f0 = gradient_factor(M2S)
    trace_vec = np.eye(2).reshape(-1)
    assert np.linalg.norm(trace_vec @ f0) == 0.0


# --- n-point stepping ------------------------------------------------------------


def test_single_particle_increments_are_standard():
    # b(0) = Id makes the one-point increment exactly sqrt(dt) * z
    traj = simulate_npoints_batch(
        np.zeros((1, 2)), M2, StepConfig(dt=1e-3, seed=3), T=1e-3, replicates=100_000
    )
    inc = traj.positions[:, 0, 0, :] / math.sqrt(1e-3)
    cov = np.cov(inc.T)
    se = 3.0 / math.sqrt(len(inc))
    assert abs(cov[0, 0] - 1) < 3 * math.sqrt(2) * se
    assert abs(cov[1, 1] - 1) < 3 * math.sqrt(2) * se
    assert abs(cov[0, 1]) < 3 * se


def test_increment_covariance_at_frozen_configuration():
    # three coupled particles well inside the interaction range
    pts = np.array([[0.0, 0.0], [0.4, 0.1], [-0.3, 0.5]])
    cfg = StepConfig(dt=1e-3, seed=11)
    reps = 60_000
    traj = simulate_npoints_batch(pts, M2, cfg, T=cfg.dt, replicates=reps)
    inc = (traj.positions[:, 0] - pts).reshape(reps, -1)
    sample_cov = inc.T @ inc / reps
    target = joint_step_covariance(M2, pts) * cfg.dt
    se = np.sqrt(
        (np.outer(np.diag(target), np.diag(target)) + target**2) / reps
    )
    assert np.all(np.abs(sample_cov - target) < 3.5 * se + 1e-12)


def test_far_pair_is_uncorrelated():
    pts = np.array([[0.0, 0.0], [100.0, 0.0]])
    traj = simulate_npoints_batch(pts, M2, StepConfig(dt=1e-3, seed=5), T=1e-3, replicates=10_000)
    inc = traj.positions[:, 0] - pts
    corr = np.corrcoef(inc[:, 0, 0], inc[:, 1, 0])[0, 1]
    assert abs(corr) < 0.05


def test_coincident_pair_moves_together():
    pts = np.zeros((2, 2))
    state = NPointState(positions=pts)
    cfg = StepConfig(dt=1e-3, seed=9, jitter=1e-12)
    out = npoint_step(state, M2, cfg, derive_rng(0, 0, 0))
    gap = np.linalg.norm(out.positions[0] - out.positions[1])
    # identical up to the jitter regularization
    assert gap < 1e-4 * math.sqrt(cfg.dt)


def test_zero_horizon_returns_initial():
    pts = np.array([[0.1, 0.2], [0.3, -0.4]])
    traj = simulate_npoints(pts, M2, CFG, T=0.0, save_times=[0.0])
    np.testing.assert_array_equal(traj.positions[0], pts)


def test_determinism_same_seed():
    pts = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.7]])
    a = simulate_npoints(pts, M2, CFG, T=0.05, save_times=[0.01, 0.05])
    b = simulate_npoints(pts, M2, CFG, T=0.05, save_times=[0.01, 0.05])
    np.testing.assert_array_equal(a.positions, b.positions)


def test_batch_matches_single_replicate():
    pts = np.array([[0.0, 0.0], [0.5, 0.0]])
    single = simulate_npoints(pts, M2, CFG, T=0.02, save_times=[0.02])
    batch = simulate_npoints_batch(pts, M2, CFG, T=0.02, save_times=[0.02], replicates=3)
    np.testing.assert_array_equal(batch.positions[0], single.positions)


def test_exchangeability_under_permutation():
    pts = np.array([[0.0, 0.0], [0.5, 0.1], [-0.2, 0.3], [0.4, -0.6]])
    perm = np.array([2, 0, 3, 1])
    a = simulate_npoints(pts, M2, CFG, T=0.03, save_times=[0.03])
    b = simulate_npoints(pts[perm], M2, CFG, T=0.03, save_times=[0.03])
    np.testing.assert_array_equal(b.positions[0], a.positions[0][perm])


def test_one_point_marginal_is_brownian():
    # coupled triple: each coordinate at t=1 must be N(0, 1)
    pts = np.array([[0.0, 0.0], [0.3, 0.0], [0.0, 0.3]])
    traj = simulate_npoints_batch(pts, M2S, StepConfig(dt=5e-3, seed=21), T=1.0, replicates=600)
    for p in range(3):
        for k in range(2):
            xs = traj.positions[:, 0, p, k] - pts[p, k]
            p_val = sps.kstest(xs, "norm").pvalue
            assert p_val > 0.01


def test_bad_save_times_rejected():
    pts = np.zeros((1, 2))
    with pytest.raises(ValueError):
        simulate_npoints(pts, M2, CFG, T=0.0105)
    with pytest.raises(ValueError):
        simulate_npoints(pts, M2, CFG, T=0.01, save_times=[0.0007])


# --- distance process -------------------------------------------------------------


def test_distance_zero_is_absorbing():
    out = distance_step(np.zeros(5), M2, CFG, np.random.default_rng(0).standard_normal(5))
    np.testing.assert_array_equal(out, np.zeros(5))


def test_distance_rejects_negative():
    with pytest.raises(ValueError):
        distance_step(-0.1, M2, CFG, 0.0)


def test_distance_far_out_matches_free_bessel():
    # far beyond the correlation length: drift (d-1)/r, diffusion sqrt(2)
    cfg = StepConfig(dt=1e-3, seed=2)
    rng = np.random.default_rng(4)
    r0 = 100.0
    draws = rng.standard_normal(10_000)
    out = distance_step(np.full(10_000, r0), M2, cfg, draws)
    inc = out - r0
    exp_drift = (M2.d - 1) / r0 * cfg.dt
    exp_sd = math.sqrt(2 * cfg.dt)
    assert abs(inc.mean() - exp_drift) < 3 * exp_sd / 100.0
    assert abs(inc.std() - exp_sd) < 3 * exp_sd / math.sqrt(2 * 10_000)


def test_distance_small_r_uses_linearized_coefficients():
    cfg = StepConfig(dt=1e-4, seed=2)
    r = np.full(4, 1e-10)
    bl, bn = beta_params(M2)
    out = distance_step(r, M2, cfg, np.zeros(4))
    np.testing.assert_allclose(out, r + (M2.d - 1) * bn * r / 2 * cfg.dt, rtol=1e-12)


def test_distance_reflection_keeps_nonnegative():
    cfg = StepConfig(dt=0.05, seed=2)
    out = distance_step(np.full(1000, 0.01), M2, cfg, np.random.default_rng(1).standard_normal(1000))
    assert np.all(out >= 0)


def test_two_point_and_distance_laws_agree():
    # moderate-size smoke version of the full consistency check
    model = IsotropicModel(d=2, alpha=0.0)
    cfg = StepConfig(dt=2e-3, seed=31)
    sep = 1.0
    reps = 800
    pts = np.array([[0.0, 0.0], [sep, 0.0]])
    traj = simulate_npoints_batch(pts, model, cfg, T=1.0, save_times=[1.0], replicates=reps)
    d2 = np.linalg.norm(traj.positions[:, 0, 0] - traj.positions[:, 0, 1], axis=1)
    d1 = simulate_distance(sep, model, cfg, T=1.0, replicates=reps)
    stat = sps.ks_2samp(d2, d1).statistic
    crit = 1.358 * math.sqrt(2 * reps / reps**2)
    assert stat < 1.5 * crit


# --- quadratic variation -----------------------------------------------------------


def test_quad_variation_degenerate_pair_is_exactly_zero():
    # coincident points with opposite projection weights: the projection is
    # constant, and the doubled cross term makes the formula vanish exactly
    times = np.linspace(0.0, 1.0, 11)
    pos = np.zeros((11, 2, 2))
    a = np.array([0.6, -0.3])
    xi = np.concatenate([a, -a])
    xi /= np.linalg.norm(xi)
    t, curve = quad_variation_curve(times, pos, M2, xi)
    np.testing.assert_allclose(curve, 0.0, atol=1e-14)


def test_quad_variation_far_pair_is_unit():
    times = np.linspace(0.0, 1.0, 11)
    pos = np.zeros((11, 2, 2))
    pos[:, 1, 0] = 100.0
    xi = np.array([1.0, 0.0, 1.0, 0.0]) / math.sqrt(2)
    _, curve = quad_variation_curve(times, pos, M2, xi)
    np.testing.assert_allclose(curve, 1.0, atol=1e-12)


def test_quad_variation_requires_unit_direction():
    times = np.linspace(0.0, 1.0, 3)
    pos = np.zeros((3, 2, 2))
    with pytest.raises(ValueError):
        quad_variation_curve(times, pos, M2, np.array([1.0, 0.0, 1.0, 0.0]))


# --- snapshots ----------------------------------------------------------------------


def test_snapshot_roundtrip(tmp_path):
    times = np.array([0.0, 0.5, 1.0])
    pos = np.random.default_rng(0).standard_normal((3, 4, 2))
    path = tmp_path / "snap.ibf"
    write_snapshots(path, times, pos)
    t2, p2 = read_snapshots(path)
    np.testing.assert_array_equal(t2, times)
    np.testing.assert_array_equal(p2, pos)
    with open(path, "rb") as fh:
        assert fh.read(4) == b"IBF1"
