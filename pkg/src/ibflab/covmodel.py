"""Isotropic covariance family for Brownian flows on R^d.

The velocity field is a mixture of a potential (gradient) component and a
solenoidal (divergence-free) component, both built on a squared-exponential
kernel with length scale ``ell``.  The mixture weight ``alpha`` moves the
ratio of the small-scale stretching rates across its full admissible range:
alpha=1 is purely potential, alpha=0 purely solenoidal (and volume
preserving).  All flow statistics used elsewhere (n-point step covariances,
distance-process coefficients, Lyapunov exponents, velocity-gradient law)
derive from this module.

Conventions: increments of the flow at points x, y have covariance
b(x - y) * dt per unit time, with b(0) = Id, so the one-point motion is a
standard Brownian motion.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class IsotropicModel:
    """Parameters of the covariance family.

    d     -- space dimension, >= 2
    alpha -- weight of the potential component in [0, 1]; 1 - alpha weighs
             the solenoidal component
    ell   -- length scale of the squared-exponential kernel, > 0
    """

    d: int
    alpha: float
    ell: float = 1.0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise ValueError(f"dimension must be an integer >= 2, got {self.d}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.ell > 0.0:
            raise ValueError(f"ell must be positive, got {self.ell}")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "ell", float(self.ell))


class BetaParams(NamedTuple):
    longitudinal: float
    transversal: float


class Regime(NamedTuple):
    """Transience classification of the two-point separation."""

    transient: bool
    almost_sure: bool
    case: str


def _check_r(r):
    r = np.asarray(r, dtype=float)
    if np.any(r < 0.0):
        raise ValueError("separation distance must be nonnegative")
    return r


def longitudinal(model: IsotropicModel, r) -> np.ndarray | float:
    """Covariance of the velocity component along the separation vector."""
    r = _check_r(r)
    s2 = (r / model.ell) ** 2
    out = np.exp(-0.5 * s2) * (1.0 - model.alpha * s2)
    return out if out.ndim else float(out)


def transversal(model: IsotropicModel, r) -> np.ndarray | float:
    """Covariance of a velocity component perpendicular to the separation."""
    r = _check_r(r)
    s2 = (r / model.ell) ** 2
    c = (1.0 - model.alpha) / (model.d - 1)
    out = np.exp(-0.5 * s2) * (1.0 - c * s2)
    return out if out.ndim else float(out)


def one_minus_longitudinal(model: IsotropicModel, r):
    """1 - longitudinal(r), computed without cancellation for small r.

    Uses 1 - (1 - a*s^2) e^{-s^2/2} = a*s^2*e^{-s^2/2} - expm1(-s^2/2),
    a sum of two nonnegative terms, exact to machine precision.
    """
    r = _check_r(r)
    s2 = (r / model.ell) ** 2
    out = model.alpha * s2 * np.exp(-0.5 * s2) - np.expm1(-0.5 * s2)
    return out if out.ndim else float(out)


def one_minus_transversal(model: IsotropicModel, r):
    """1 - transversal(r), cancellation-free like one_minus_longitudinal."""
    r = _check_r(r)
    s2 = (r / model.ell) ** 2
    c = (1.0 - model.alpha) / (model.d - 1)
    out = c * s2 * np.exp(-0.5 * s2) - np.expm1(-0.5 * s2)
    return out if out.ndim else float(out)


def cov_difference(model: IsotropicModel, r):
    """longitudinal(r) - transversal(r), exact closed form."""
    r = _check_r(r)
    s2 = (r / model.ell) ** 2
    c = (1.0 - model.alpha) / (model.d - 1) - model.alpha
    out = c * s2 * np.exp(-0.5 * s2)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Radial representation b_ij(x) = F(q) x_i x_j + G(q) delta_ij with q = |x|^2.
# F and G are entire in q, so x = 0 needs no special branch: F(0) is the
# analytic limit of (longitudinal - transversal)/r^2.
# ---------------------------------------------------------------------------


def _fg_coeffs(model: IsotropicModel):
    inv_l2 = 1.0 / model.ell**2
    c_f = ((1.0 - model.alpha) / (model.d - 1) - model.alpha) * inv_l2
    c_g = (1.0 - model.alpha) / (model.d - 1) * inv_l2
    return inv_l2, c_f, c_g


def radial_coefficients(model: IsotropicModel, q, order: int = 0):
    """F(q), G(q) and their q-derivatives up to ``order`` (0, 1 or 2).

    q is the squared separation |x|^2 (any array shape).  Returns a dict with
    keys 'F', 'G' and, when requested, 'F1', 'G1', 'F2', 'G2'.
    """
    q = np.asarray(q, dtype=float)
    inv_l2, c_f, c_g = _fg_coeffs(model)
    a = 0.5 * inv_l2
    e = np.exp(-a * q)
    out = {"F": c_f * e, "G": e * (1.0 - c_g * q)}
    if order >= 1:
        out["F1"] = -a * out["F"]
        out["G1"] = -e * (c_g + a * (1.0 - c_g * q))
    if order >= 2:
        out["F2"] = a * a * c_f * e
        out["G2"] = e * (2.0 * a * c_g + a * a * (1.0 - c_g * q))
    return out


def b_blocks(model: IsotropicModel, z: np.ndarray) -> np.ndarray:
    """Covariance matrices b(z) for an array of separations.

    z has shape (..., d); the result has shape (..., d, d).
    """
    z = np.asarray(z, dtype=float)
    d = model.d
    if z.shape[-1] != d:
        raise ValueError(f"separation vectors must have length {d}")
    q = np.sum(z * z, axis=-1)
    co = radial_coefficients(model, q)
    eye = np.eye(d)
    return (
        co["F"][..., None, None] * z[..., :, None] * z[..., None, :]
        + co["G"][..., None, None] * eye
    )


def b_matrix(model: IsotropicModel, x) -> np.ndarray:
    """Covariance matrix b(x) for a single separation vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.d,):
        raise ValueError(f"expected a vector of shape ({model.d},)")
    return b_blocks(model, x)


def grad_b(model: IsotropicModel, x) -> np.ndarray:
    """First derivatives: grad_b[..., i, j, k] = d b_ij / d x_k."""
    z = np.asarray(x, dtype=float)
    d = model.d
    single = z.shape == (d,)
    q = np.sum(z * z, axis=-1)
    co = radial_coefficients(model, q, order=1)
    eye = np.eye(d)
    zi = z[..., :, None, None]
    zj = z[..., None, :, None]
    zk = z[..., None, None, :]
    t = (
        2.0 * co["F1"][..., None, None, None] * zk * zi * zj
        + co["F"][..., None, None, None] * (eye[:, None, :] * zj + eye[None, :, :] * zi)
        + 2.0 * co["G1"][..., None, None, None] * zk * eye[:, :, None]
    )
    return t if not single else t.reshape(d, d, d)


def hess_b(model: IsotropicModel, x) -> np.ndarray:
    """Second derivatives: hess_b[..., i, j, k, l] = d^2 b_ij / dx_k dx_l."""
    z = np.asarray(x, dtype=float)
    d = model.d
    single = z.shape == (d,)
    q = np.sum(z * z, axis=-1)
    co = radial_coefficients(model, q, order=2)
    eye = np.eye(d)
    zi = z[..., :, None, None, None]
    zj = z[..., None, :, None, None]
    zk = z[..., None, None, :, None]
    zl = z[..., None, None, None, :]
    d_ik = eye[:, None, :, None]
    d_il = eye[:, None, None, :]
    d_jk = eye[None, :, :, None]
    d_jl = eye[None, :, None, :]
    d_kl = eye[None, None, :, :]
    d_ij = eye[:, :, None, None]
    F = co["F"][..., None, None, None, None]
    F1 = co["F1"][..., None, None, None, None]
    F2 = co["F2"][..., None, None, None, None]
    G1 = co["G1"][..., None, None, None, None]
    G2 = co["G2"][..., None, None, None, None]
    t = (
        4.0 * F2 * zk * zl * zi * zj
        + 2.0 * F1 * (d_kl * zi * zj + zk * (d_il * zj + d_jl * zi) + zl * (d_ik * zj + d_jk * zi))
        + F * (d_ik * d_jl + d_jk * d_il)
        + 4.0 * G2 * zk * zl * d_ij
        + 2.0 * G1 * d_kl * d_ij
    )
    return t if not single else t.reshape(d, d, d, d)


def gradient_cov_tensor(model: IsotropicModel) -> np.ndarray:
    """Covariance of the velocity gradient at zero separation.

    Returns C with C[i, k, j, l] = E[ d_j u_i * d_l u_k ] per unit time,
    equal to -hess_b(0)[i, k, j, l].  Closed form:
        C = beta_N d_ik d_jl - (beta_N - beta_L)/2 (d_ij d_kl + d_il d_kj).
    """
    d = model.d
    bl, bn = beta_params(model)
    C = np.zeros((d, d, d, d))
    half = 0.5 * (bn - bl)
    for i in range(d):
        for k in range(d):
            for j in range(d):
                for l in range(d):
                    C[i, k, j, l] = bn * (i == k) * (j == l) - half * (
                        (i == j) * (k == l) + (i == l) * (k == j)
                    )
    return C


def gradient_cov_matrix(model: IsotropicModel) -> np.ndarray:
    """gradient_cov_tensor flattened to a (d^2, d^2) matrix.

    Row index i*d+j corresponds to gradient entry (i, j); the matrix gives
    E[dF_ij dF_kl] per unit time and is symmetric positive semidefinite.
    """
    d = model.d
    C = gradient_cov_tensor(model)
    return C.transpose(0, 2, 1, 3).reshape(d * d, d * d)


def beta_params(model: IsotropicModel) -> BetaParams:
    """Negative second derivatives at zero of the two covariance profiles."""
    kappa = 1.0 / model.ell**2
    a = model.alpha
    beta_long = kappa * (3.0 * a + (1.0 - a))
    beta_trans = kappa * (a + (1.0 - a) * (model.d + 1) / (model.d - 1))
    return BetaParams(beta_long, beta_trans)


def lyapunov_spectrum(model: IsotropicModel) -> np.ndarray:
    """Exponential growth rates of the flow Jacobian's singular values.

    lambda_i = (d - i) * beta_N / 2 - i * beta_L / 2 for i = 1..d,
    returned in nonincreasing order.
    """
    bl, bn = beta_params(model)
    i = np.arange(1, model.d + 1)
    return (model.d - i) * bn / 2.0 - i * bl / 2.0


def top_lyapunov(model: IsotropicModel) -> float:
    return float(lyapunov_spectrum(model)[0])


def volume_preserving(model: IsotropicModel, tol: float = 1e-12) -> bool:
    """True when (d-1) beta_N equals (d+1) beta_L (divergence-free field)."""
    bl, bn = beta_params(model)
    return abs((model.d - 1) * bn - (model.d + 1) * bl) <= tol * max(bl, bn)


def regime(model: IsotropicModel) -> Regime:
    """Classify whether the two-point separation is guaranteed transient.

    Transient when d >= 4, or d = 3 with lambda_1 >= 0, or d = 2 with
    lambda_1 > 0.  The escape to infinity is almost sure in the first two
    cases and holds in probability only in the third.  d = 2 with
    lambda_1 = 0 is deliberately classified as not guaranteed.
    """
    lam1 = top_lyapunov(model)
    if model.d >= 4:
        return Regime(True, True, "d>=4")
    if model.d == 3 and lam1 >= 0.0:
        return Regime(True, True, "d=3, lambda_1>=0")
    if model.d == 2 and lam1 > 0.0:
        return Regime(True, False, "d=2, lambda_1>0")
    return Regime(False, False, "lambda_1 too small for guarantee")


def npoint_block_matrix(model: IsotropicModel, points: np.ndarray) -> np.ndarray:
    """The (n*d, n*d) covariance of simultaneous velocity increments.

    Block (p, q) is b(x_p - x_q).  Positive semidefinite for any point set.
    """
    pts = np.asarray(points, dtype=float)
    n, d = pts.shape
    diffs = pts[:, None, :] - pts[None, :, :]
    blocks = b_blocks(model, diffs)  # (n, n, d, d)
    return blocks.transpose(0, 2, 1, 3).reshape(n * d, n * d)


def describe(model: IsotropicModel) -> dict:
    """Scalar summary used by the command line and reports."""
    bl, bn = beta_params(model)
    reg = regime(model)
    return {
        "d": model.d,
        "alpha": model.alpha,
        "ell": model.ell,
        "beta_longitudinal": bl,
        "beta_transversal": bn,
        "beta_ratio_long_over_trans": bl / bn,
        "lyapunov_spectrum": [float(v) for v in lyapunov_spectrum(model)],
        "transient": reg.transient,
        "transience_almost_sure": reg.almost_sure,
        "transience_case": reg.case,
        "volume_preserving": volume_preserving(model),
    }
