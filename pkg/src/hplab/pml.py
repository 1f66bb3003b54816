"""Radial perfectly matched layer in two dimensions.

The layer is the complex radial stretching ``r -> r + i f_theta(r)`` with
``f_theta = tan(theta) * f`` and ``f`` a smooth ramp that vanishes (with its
first ``ell`` derivatives) at ``R_minus`` and equals ``r`` from ``R_plus`` on.
In polar coordinates the stretched Helmholtz operator has coefficients

    alpha = 1 + i f_theta'(r),      beta = 1 + i f_theta(r) / r,
    A = H diag(beta/alpha, alpha/beta) H^T,   c^{-2} = alpha * beta,

with ``H`` the rotation by the polar angle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BPoly

CHECK_POINTS = 10_000


class PmlProfileError(ValueError):
    """Invalid PML parameters or a ramp violating the monotonicity requirements."""


@dataclass(frozen=True)
class PmlProfile:
    """Scaling function ``f`` with angle ``theta``.

    ``theta = 0`` is accepted and switches the layer off (useful as a
    non-absorbing control).
    """

    theta: float
    R_minus: float
    R_plus: float
    ell: int = 2
    _ramp: BPoly = field(repr=False, compare=False, default=None)

    @property
    def tan_theta(self) -> float:
        return math.tan(self.theta)

    def f(self, r, nu: int = 0):
        """``nu``-th derivative of the unscaled ramp ``f`` (``nu`` in 0..2)."""
        r = np.asarray(r, dtype=float)
        inner = r <= self.R_minus
        outer = r >= self.R_plus
        mid = ~(inner | outer)
        out = np.zeros_like(r)
        out[mid] = self._ramp(r[mid], nu)
        if nu == 0:
            out[outer] = r[outer]
        elif nu == 1:
            out[outer] = 1.0
        return out

    def f_theta(self, r, nu: int = 0):
        return self.tan_theta * self.f(r, nu)

    def alpha_beta(self, r):
        r = np.asarray(r, dtype=float)
        t = self.tan_theta
        alpha = 1.0 + 1j * t * self.f(r, 1)
        safe = np.where(r > 0, r, 1.0)
        beta = 1.0 + 1j * t * self.f(r) / safe
        return alpha, beta


def make_profile(theta: float, R_minus: float, R_plus: float, ell: int = 2) -> PmlProfile:
    """Hermite ramp of degree ``2 ell + 1`` on ``[R_minus, R_plus]``.

    Matches ``f = f' = ... = f^(ell) = 0`` at ``R_minus`` and ``f = r``,
    ``f' = 1``, ``f'' = ... = f^(ell) = 0`` at ``R_plus``, so ``f`` is
    ``C^ell`` with Lipschitz ``ell``-th derivative.  ``f' >= 0`` and the
    monotonicity of ``f / r`` are checked on a fine grid.
    """
    if not 0 <= theta < math.pi / 2:
        raise PmlProfileError(f"theta must satisfy 0 <= theta < pi/2, got {theta}")
    if not 0 < R_minus < R_plus:
        raise PmlProfileError(f"need 0 < R_minus < R_plus, got R_minus={R_minus}, R_plus={R_plus}")
    if int(ell) != ell or not 1 <= ell <= 4:
        raise PmlProfileError(f"ell must be an integer in 1..4, got {ell}")
    ell = int(ell)
    left = [0.0] * (ell + 1)
    right = [float(R_plus), 1.0] + [0.0] * (ell - 1)
    ramp = BPoly.from_derivatives([R_minus, R_plus], [left, right])
    prof = PmlProfile(float(theta), float(R_minus), float(R_plus), ell, ramp)
    r = np.linspace(R_minus, R_plus, CHECK_POINTS)
    fp = prof.f(r, 1)
    if fp.min() < -1e-12 * R_plus:
        raise PmlProfileError("ramp violates f' >= 0")
    ratio = prof.f(r) / r
    if np.any(np.diff(ratio) < -1e-13):
        raise PmlProfileError("ramp violates monotonicity of f(r)/r")
    return prof


def eval_coefficients(profile: PmlProfile | None, x, a_out=None, c_inv2_out=None):
    """Complex coefficient matrix ``A`` and ``c^{-2}`` at points ``x``.

    Parameters
    ----------
    profile : PmlProfile or None
        ``None`` means no layer (``A = I``, ``c^{-2} = 1`` outside the optional
        exterior coefficient fields).
    x : array_like, shape (..., 2)
    a_out, c_inv2_out : callable, optional
        Scalar fields ``A_out = a_out(x) I`` and ``c_out^{-2}`` used for
        ``|x| <= R_minus``; both must equal 1 near ``R_minus``.

    Returns
    -------
    A : ndarray, shape (..., 2, 2), complex, exactly symmetric
    c_inv2 : ndarray, shape (...), complex
    """
    x = np.asarray(x, dtype=float)
    r = np.hypot(x[..., 0], x[..., 1])
    if np.any(r == 0):
        raise ValueError("coefficients are undefined at the origin")
    shape = x.shape[:-1]
    A = np.zeros(shape + (2, 2), dtype=complex)
    A[..., 0, 0] = A[..., 1, 1] = 1.0
    c_inv2 = np.ones(shape, dtype=complex)
    if a_out is not None:
        s = np.asarray(a_out(x))
        A[..., 0, 0] = A[..., 1, 1] = s
    if c_inv2_out is not None:
        c_inv2[...] = c_inv2_out(x)
    if profile is None:
        return A, c_inv2
    lay = r > profile.R_minus
    if np.any(lay):
        alpha, beta = profile.alpha_beta(r[lay])
        d_rr, d_pp = beta / alpha, alpha / beta
        cs = x[lay][:, 0] / r[lay]
        sn = x[lay][:, 1] / r[lay]
        off = (d_rr - d_pp) * cs * sn
        A_l = np.empty((lay.sum(), 2, 2), dtype=complex)
        A_l[:, 0, 0] = d_rr * cs * cs + d_pp * sn * sn
        A_l[:, 1, 1] = d_rr * sn * sn + d_pp * cs * cs
        A_l[:, 0, 1] = A_l[:, 1, 0] = off
        A[lay] = A_l
        c_inv2[lay] = alpha * beta
    return A, c_inv2


def ellipticity_constant(profile: PmlProfile | None, r_max: float, n: int = CHECK_POINTS) -> float:
    """Lower bound of ``Re (A xi, xi) / |xi|^2`` over ``r <= r_max``.

    ``A`` has real orthonormal eigenvectors, so the bound is the minimum of
    ``Re(beta/alpha)`` and ``Re(alpha/beta)``.
    """
    if profile is None or profile.theta == 0:
        return 1.0
    r = np.linspace(profile.R_minus, max(r_max, profile.R_minus), n)[1:]
    if len(r) == 0:
        return 1.0
    alpha, beta = profile.alpha_beta(r)
    return float(min(1.0, np.min((beta / alpha).real), np.min((alpha / beta).real)))
