import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ibflab.covmodel import (
    IsotropicModel,
    b_blocks,
    b_matrix,
    beta_params,
    cov_difference,
    describe,
    grad_b,
    gradient_cov_matrix,
    gradient_cov_tensor,
    hess_b,
    longitudinal,
    lyapunov_spectrum,
    npoint_block_matrix,
    one_minus_longitudinal,
    one_minus_transversal,
    regime,
    transversal,
    volume_preserving,
)

M2 = IsotropicModel(d=2, alpha=0.05)
M2P = IsotropicModel(d=2, alpha=1.0)
M2S = IsotropicModel(d=2, alpha=0.0)
M3 = IsotropicModel(d=3, alpha=0.5, ell=1.3)


# --- finite-difference oracles ------------------------------------------------


def fd_grad(f, x, h=1e-5):
    d = len(x)
    out = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        out.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(out, axis=-1)


def fd_hess(f, x, h=1e-4):
    d = len(x)
    base = f(x)
    out = np.zeros(base.shape + (d, d))
    for k in range(d):
        ek = np.zeros(d)
        ek[k] = h
        out[..., k, k] = (f(x + ek) - 2 * base + f(x - ek)) / h**2
        for l in range(k + 1, d):
            el = np.zeros(d)
            el[l] = h
            mixed = (f(x + ek + el) - f(x + ek - el) - f(x - ek + el) + f(x - ek - el)) / (
                4 * h**2
            )
            out[..., k, l] = mixed
            out[..., l, k] = mixed
    return out


def fd_hess_richardson(f, x, h=1e-4):
    return (4.0 * fd_hess(f, x, h / 2) - fd_hess(f, x, h)) / 3.0


def gaussian_kernel(model):
    # scalar potential whose gradient field has unit variance per component
    def c(x):
        return model.ell**2 * np.exp(-np.sum(np.asarray(x) ** 2) / (2 * model.ell**2))

    return c


# --- profile functions --------------------------------------------------------


def test_profiles_at_zero_are_one():
    for m in (M2, M2P, M2S, M3):
        assert longitudinal(m, 0.0) == 1.0
        assert transversal(m, 0.0) == 1.0


def test_potential_profile_values():
    m = IsotropicModel(d=2, alpha=1.0, ell=1.0)
    assert longitudinal(m, 1.0) == pytest.approx(0.0, abs=1e-15)
    assert transversal(m, 1.0) == pytest.approx(np.exp(-0.5), rel=1e-12)


def test_profiles_decay_far_out():
    for m in (M2, M3):
        r = 100.0 * m.ell
        assert abs(longitudinal(m, r)) < 1e-12
        assert abs(transversal(m, r)) < 1e-12


def test_profiles_bounded_below_one_for_positive_r():
    r = np.geomspace(1e-3, 30, 400)
    for m in (M2, M2P, M2S, M3, IsotropicModel(d=5, alpha=0.7)):
        bl = longitudinal(m, r * m.ell)
        bn = transversal(m, r * m.ell)
        assert np.all(np.abs(bl) < 1.0)
        assert np.all(np.abs(bn) < 1.0)


def test_negative_separation_rejected():
    with pytest.raises(ValueError):
        longitudinal(M2, -0.1)
    with pytest.raises(ValueError):
        transversal(M2, -1.0)


def test_potential_part_matches_kernel_hessian():
    # the alpha=1 profiles must equal minus the kernel Hessian on/off axis
    m = IsotropicModel(d=3, alpha=1.0, ell=0.8)
    c = gaussian_kernel(m)
    for r in (0.3, 1.0, 2.5):
        x = np.array([r, 0.0, 0.0])
        hb = -fd_hess_richardson(lambda y: np.array(c(y)), x)
        assert hb[0, 0] == pytest.approx(longitudinal(m, r), abs=5e-8)
        assert hb[1, 1] == pytest.approx(transversal(m, r), abs=5e-8)
        assert abs(hb[0, 1]) < 5e-8


def test_solenoidal_relation_between_profiles():
    # divergence-free part satisfies B_N = B_L + r B_L' / (d-1)
    for d in (2, 3, 4):
        m = IsotropicModel(d=d, alpha=0.0, ell=1.1)
        for r in (0.2, 0.9, 2.7):
            h = 1e-6
            bl1 = (longitudinal(m, r + h) - longitudinal(m, r - h)) / (2 * h)
            expect = longitudinal(m, r) + r * bl1 / (d - 1)
            assert transversal(m, r) == pytest.approx(expect, abs=1e-9)


def test_solenoidal_component_is_divergence_free():
    m = IsotropicModel(d=3, alpha=0.0)
    rng = np.random.default_rng(7)
    for _ in range(10):
        x = rng.uniform(-2, 2, size=3)
        g = grad_b(m, x)  # [i, j, k] = d_k b_ij
        div = np.einsum("iji->j", g)
        assert np.max(np.abs(div)) < 1e-12


def test_one_minus_forms_are_stable_and_consistent():
    r = np.geomspace(1e-9, 20, 200)
    for m in (M2, M2P, M3):
        direct = 1.0 - longitudinal(m, r)
        stable = one_minus_longitudinal(m, r)
        assert np.all(stable > 0)
        mask = r > 1e-2
        np.testing.assert_allclose(stable[mask], direct[mask], rtol=1e-10)
        bl, _ = beta_params(m)
        small = r < 1e-6
        np.testing.assert_allclose(
            stable[small], 0.5 * bl * r[small] ** 2, rtol=1e-10
        )
        np.testing.assert_allclose(
            one_minus_transversal(m, r)[small],
            0.5 * beta_params(m).transversal * r[small] ** 2,
            rtol=1e-10,
        )


# --- matrix form ---------------------------------------------------------------


def test_b_matrix_identity_at_zero():
    for m in (M2, M3):
        np.testing.assert_array_equal(b_matrix(m, np.zeros(m.d)), np.eye(m.d))


def test_b_matrix_on_axis():
    got = b_matrix(IsotropicModel(d=2, alpha=1.0), np.array([1.0, 0.0]))
    np.testing.assert_allclose(got, np.diag([0.0, np.exp(-0.5)]), atol=1e-14)


def test_b_matrix_isotropy_conjugation():
    rng = np.random.default_rng(3)
    for m in (M2, M3):
        for _ in range(50):
            x = rng.uniform(-3, 3, size=m.d)
            q, _ = np.linalg.qr(rng.standard_normal((m.d, m.d)))
            left = b_matrix(m, q @ x)
            right = q @ b_matrix(m, x) @ q.T
            assert np.max(np.abs(left - right)) < 1e-12


def test_b_blocks_vectorized_matches_single():
    rng = np.random.default_rng(5)
    xs = rng.uniform(-2, 2, size=(7, 3))
    got = b_blocks(M3, xs)
    for i, x in enumerate(xs):
        np.testing.assert_allclose(got[i], b_matrix(M3, x), rtol=1e-14)


def test_block_matrix_positive_semidefinite():
    rng = np.random.default_rng(11)
    for trial in range(200):
        d = 2 if trial % 2 == 0 else 3
        m = IsotropicModel(d=d, alpha=rng.uniform(), ell=rng.uniform(0.5, 2.0))
        n = rng.integers(2, 9)
        pts = rng.uniform(-5 * m.ell, 5 * m.ell, size=(n, d))
        c = npoint_block_matrix(m, pts)
        np.testing.assert_allclose(c, c.T, atol=1e-14)
        w = np.linalg.eigvalsh(c)
        assert w.min() >= -1e-8


# --- derivatives ---------------------------------------------------------------


def test_grad_zero_at_origin():
    for m in (M2, M3):
        assert np.max(np.abs(grad_b(m, np.zeros(m.d)))) == 0.0


def test_grad_and_hess_match_finite_differences():
    rng = np.random.default_rng(13)
    for m in (M2, M3):
        worst_g = worst_h = 0.0
        for _ in range(50):
            x = rng.uniform(-2.5 * m.ell, 2.5 * m.ell, size=m.d)
            g = grad_b(m, x)
            g_fd = fd_grad(lambda y: b_blocks(m, y), x)
            worst_g = max(worst_g, np.max(np.abs(g - g_fd)) / np.max(np.abs(g_fd) + 1e-12))
            h = hess_b(m, x)
            h_fd = fd_hess_richardson(lambda y: b_blocks(m, y), x, h=1e-3 * m.ell)
            scale = np.max(np.abs(h_fd))
            worst_h = max(worst_h, np.max(np.abs(h - h_fd)) / scale)
        assert worst_g < 1e-6
        assert worst_h < 1e-6


def test_derivatives_decay_far_out():
    x = np.zeros(2)
    x[0] = 50.0
    assert np.max(np.abs(grad_b(M2, x))) < 1e-10
    assert np.max(np.abs(hess_b(M2, x))) < 1e-10


def test_gradient_cov_tensor_matches_hessian_at_zero():
    # C[i, k, j, l] = -d_j d_l b_ik, i.e. hess_b's axes read (comp, comp, der, der)
    for m in (M2, M2S, M3):
        C = gradient_cov_tensor(m)
        H = hess_b(m, np.zeros(m.d))
        np.testing.assert_allclose(C, -H, atol=1e-12)


def test_gradient_cov_tensor_against_richardson_fd():
    m = M2
    C = gradient_cov_tensor(m)
    H = fd_hess_richardson(lambda y: b_blocks(m, y), np.zeros(2), h=1e-4 * m.ell)
    np.testing.assert_allclose(C, -H, atol=1e-8)


def test_gradient_cov_tensor_symmetry_and_psd():
    for m in (M2, M3, IsotropicModel(d=4, alpha=0.3)):
        C = gradient_cov_tensor(m)
        np.testing.assert_allclose(C, C.transpose(1, 0, 3, 2), atol=1e-14)
        mat = gradient_cov_matrix(m)
        np.testing.assert_allclose(mat, mat.T, atol=1e-14)
        assert np.linalg.eigvalsh(mat).min() >= -1e-12


# --- scalar parameters ---------------------------------------------------------


def test_beta_examples():
    assert beta_params(IsotropicModel(d=2, alpha=1.0)) == pytest.approx((3.0, 1.0))
    assert beta_params(IsotropicModel(d=2, alpha=0.0)) == pytest.approx((1.0, 3.0))


def test_beta_finite_difference_convergence():
    for m in (M2, M3, M2P):
        bl, bn = beta_params(m)
        h = 1e-4 * m.ell
        est_l = -(longitudinal(m, 2 * h) - 2 * longitudinal(m, h) + 1.0) / h**2
        # one-sided second difference around 0 using evenness of the profile
        est_l = -2.0 * (longitudinal(m, h) - 1.0) / h**2
        est_l = (4 * (-2 * (longitudinal(m, h / 2) - 1) / (h / 2) ** 2) - est_l * 1) / 3
        est_n = -2.0 * (transversal(m, h) - 1.0) / h**2
        est_n = (4 * (-2 * (transversal(m, h / 2) - 1) / (h / 2) ** 2) - est_n) / 3
        assert est_l == pytest.approx(bl, rel=1e-5)
        assert est_n == pytest.approx(bn, rel=1e-5)


@settings(max_examples=60, deadline=None)
@given(
    alpha=st.floats(0.0, 1.0),
    d=st.integers(2, 6),
    ell=st.floats(0.2, 5.0),
)
def test_beta_ratio_bounds(alpha, d, ell):
    m = IsotropicModel(d=d, alpha=alpha, ell=ell)
    bl, bn = beta_params(m)
    assert bl > 0 and bn > 0
    ratio = bl / bn
    assert (d - 1) / (d + 1) - 1e-12 <= ratio <= 3.0 + 1e-12


def test_scale_covariance():
    base = IsotropicModel(d=3, alpha=0.4, ell=1.0)
    scaled = IsotropicModel(d=3, alpha=0.4, ell=2.5)
    r = np.linspace(0.1, 8.0, 40)
    np.testing.assert_allclose(longitudinal(scaled, r), longitudinal(base, r / 2.5), rtol=1e-14)
    np.testing.assert_allclose(transversal(scaled, r), transversal(base, r / 2.5), rtol=1e-14)
    bl0, bn0 = beta_params(base)
    bl1, bn1 = beta_params(scaled)
    assert bl1 == pytest.approx(bl0 / 2.5**2, rel=1e-14)
    assert bn1 == pytest.approx(bn0 / 2.5**2, rel=1e-14)


def test_lyapunov_examples():
    np.testing.assert_allclose(lyapunov_spectrum(IsotropicModel(d=2, alpha=0.0)), [1.0, -1.0])
    # equal rates: spectrum (b/2, -b/2, -3b/2)
    m = IsotropicModel(d=3, alpha=1.0 / 3.0)
    bl, bn = beta_params(m)
    assert bl == pytest.approx(bn)
    np.testing.assert_allclose(
        lyapunov_spectrum(m), [bl / 2, -bl / 2, -3 * bl / 2], rtol=1e-12
    )


def test_lyapunov_nonincreasing_and_sum_rule():
    for alpha in (0.0, 0.3, 0.8, 1.0):
        for d in (2, 3, 5):
            m = IsotropicModel(d=d, alpha=alpha)
            lam = lyapunov_spectrum(m)
            assert np.all(np.diff(lam) < 0)
            if volume_preserving(m):
                assert abs(lam.sum()) < 1e-12


def test_volume_preserving_iff_alpha_zero():
    for d in (2, 3, 4):
        assert volume_preserving(IsotropicModel(d=d, alpha=0.0))
        assert not volume_preserving(IsotropicModel(d=d, alpha=0.05))


def test_regime_examples():
    r = regime(IsotropicModel(d=4, alpha=0.9))
    assert r.transient and r.almost_sure
    r = regime(IsotropicModel(d=2, alpha=0.0))
    assert r.transient and not r.almost_sure
    r = regime(IsotropicModel(d=2, alpha=1.0))
    assert not r.transient
    r = regime(IsotropicModel(d=3, alpha=0.5))
    assert r.transient and r.almost_sure
    # d=3 with lambda_1 exactly 0 still qualifies
    assert regime(IsotropicModel(d=3, alpha=0.75)).transient


@settings(max_examples=40, deadline=None)
@given(alpha=st.floats(0.0, 1.0), d=st.integers(2, 5))
def test_regime_consistent_with_top_exponent(alpha, d):
    m = IsotropicModel(d=d, alpha=alpha)
    lam1 = lyapunov_spectrum(m)[0]
    r = regime(m)
    if d >= 4:
        assert r.transient
    elif d == 3:
        assert r.transient == (lam1 >= 0)
    else:
        assert r.transient == (lam1 > 0)


def test_describe_fields():
    info = describe(M2)
    assert info["d"] == 2
    assert info["transient"] is True
    assert len(info["lyapunov_spectrum"]) == 2
    assert info["volume_preserving"] is False


def test_model_validation():
    with pytest.raises(ValueError):
        IsotropicModel(d=1, alpha=0.5)
    with pytest.raises(ValueError):
        IsotropicModel(d=2, alpha=1.5)
    with pytest.raises(ValueError):
        IsotropicModel(d=2, alpha=0.5, ell=0.0)


def test_cov_difference_consistency():
    r = np.linspace(0.05, 6.0, 50)
    for m in (M2, M3, M2P):
        np.testing.assert_allclose(
            cov_difference(m, r),
            longitudinal(m, r) - transversal(m, r),
            atol=1e-14,
        )
