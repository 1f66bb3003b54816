"""Reference solutions: Bessel functions, Mie series for a sound-soft disk, manufactured fields.

Bessel functions of integer order are computed from three-term recurrences:

* ``J_n`` by Miller's backward recurrence, normalized with
  ``J_0 + 2 sum_k J_2k = 1`` (values are rescaled on the fly to avoid overflow);
* ``Y_0`` and ``Y_1`` from the Neumann series
  ``Y_0 = (2/pi) [(ln(x/2) + gamma) J_0 - 2 sum_k (-1)^k J_2k / k]`` and its
  negative derivative, then ``Y_n`` by (stable) forward recurrence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EULER_GAMMA = 0.57721566490153286061
CHUNK = 50_000
_BIG = 1e250


def _miller_start(nmax: int, xmax: float) -> int:
    m = max(nmax, xmax) + 30 + 2.5 * math.sqrt(40 * max(nmax, xmax, 1.0))
    return 2 * (int(m) // 2 + 1)


def _miller(nmax: int, x: np.ndarray):
    """One backward sweep giving ``J_0..J_nmax`` and ``Y_0, Y_1`` at ``x > 0``.

    The Neumann sums for ``Y_0`` and ``Y_1`` are linear in the (unnormalized)
    recurrence values, so they are accumulated during the same sweep.
    """
    m = _miller_start(nmax, float(x.max()))
    jp1 = np.zeros_like(x)
    j = np.full_like(x, 1e-30)  # J_m (unnormalized)
    norm = np.zeros_like(x)
    s0 = np.zeros_like(x)  # sum_k (-1)^k J_2k / k
    s1 = np.zeros_like(x)  # sum_k (-1)^k (J_2k-1 - J_2k+1) / k
    vals = np.zeros((nmax + 1, len(x)))
    two_over_x = 2.0 / x
    # steps between overflow checks: the values grow by at most 2m/x per step
    growth = max(2.0 * m / float(x.min()), 10.0)
    every = max(1, int(50 / math.log10(growth)))
    # J_{m+1} = 0 and m even: contributions of J_{2k+1} with 2k+1 = m+1 vanish
    for n in range(m, 0, -1):
        jm1 = n * two_over_x * j - jp1
        # before the shift: j = J_n, jp1 = J_{n+1}, jm1 = J_{n-1}
        if n % 2 == 0:
            kk = n // 2
            sg = 1.0 if kk % 2 == 0 else -1.0
            norm += 2.0 * j
            s0 += sg * j / kk
            s1 += sg * (jm1 - jp1) / kk
        jp1, j = j, jm1
        if n - 1 <= nmax:
            vals[n - 1] = j
        if n % every == 0 or n <= every:
            peak = np.abs(j)
            if peak.max() > _BIG:
                f = np.where(peak > _BIG, 1.0 / _BIG, 1.0)
                j *= f
                jp1 *= f
                norm *= f
                s0 *= f
                s1 *= f
                vals *= f
    norm += j
    J = vals / norm
    j0, j1 = J[0], (vals[1] / norm if nmax >= 1 else jp1 / norm)
    lg = np.log(x / 2) + EULER_GAMMA
    y0 = (2 / np.pi) * (lg * j0 - 2 * s0 / norm)
    y1 = (2 / np.pi) * (lg * j1 - j0 / x + s1 / norm)
    return J, y0, y1


def bessel_j_all(nmax: int, x) -> np.ndarray:
    """``J_n(x)`` for ``n = 0..nmax`` at all ``x >= 0``; shape ``(nmax + 1, len(x))``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("bessel_j_all needs finite x >= 0")
    nmax = int(nmax)
    out = np.zeros((nmax + 1, len(x)))
    zero = x == 0
    out[0, zero] = 1.0
    pos = ~zero
    if np.any(pos):
        out[:, pos] = _miller(nmax, x[pos])[0]
    return out


def _forward_y(nmax, x, y0, y1):
    Y = np.empty((nmax + 1, len(x)))
    Y[0] = y0
    if nmax >= 1:
        Y[1] = y1
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(1, nmax):
            Y[n + 1] = (2 * n / x) * Y[n] - Y[n - 1]
    return Y


def bessel_y_all(nmax: int, x) -> np.ndarray:
    """``Y_n(x)`` for ``n = 0..nmax`` at ``x > 0``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ValueError("Y_n needs finite x > 0")
    _, y0, y1 = _miller(1, x)
    return _forward_y(int(nmax), x, y0, y1)


def bessel_jy(n: int, x):
    """``(J_n(x), Y_n(x))`` for integer ``n >= 0`` and ``x > 0`` (scalar or array)."""
    if int(n) != n or n < 0:
        raise ValueError(f"order must be a nonnegative integer, got {n}")
    n = int(n)
    xa = np.asarray(x, dtype=float)
    if np.any(xa <= 0) or not np.all(np.isfinite(xa)):
        raise ValueError("bessel_jy needs finite x > 0")
    flat = np.atleast_1d(xa).ravel()
    J = bessel_j_all(n, flat)[n].reshape(xa.shape)
    Y = bessel_y_all(n, flat)[n].reshape(xa.shape)
    return J, Y


def hankel1_all(nmax: int, x):
    """``H^(1)_n(x)`` and its derivative for ``n = 0..nmax`` at ``x > 0``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x <= 0):
        raise ValueError("Hankel functions need x > 0")
    J, y0, y1 = _miller(nmax + 1, x)
    H = J + 1j * _forward_y(nmax + 1, x, y0, y1)
    dH = np.empty((nmax + 1, len(x)), dtype=complex)
    dH[0] = -H[1]
    n = np.arange(1, nmax + 1)[:, None]
    dH[1:] = H[:nmax] - n / x * H[1 : nmax + 1]
    return H[: nmax + 1], dH


# ---------------------------------------------------------------------------
# Mie series


def mie_order(ka: float) -> int:
    return int(math.ceil(ka + 8 * ka ** (1 / 3) + 12))


@dataclass(frozen=True, eq=False)
class MieSolution:
    """Scattered field of ``exp(i k d.x)`` by the sound-soft disk ``|x| < a``."""

    k: float
    a: float
    phi_inc: float
    N: int
    coef: np.ndarray  # -eps_n i^n J_n(ka) / H_n(ka), n = 0..N

    @property
    def direction(self):
        return np.array([math.cos(self.phi_inc), math.sin(self.phi_inc)])


def make_mie(k: float, a: float, direction=(1.0, 0.0), N: int | None = None) -> MieSolution:
    if not (k > 0 and a > 0):
        raise ValueError("need k > 0 and a > 0")
    d = np.asarray(direction, dtype=float)
    phi = math.atan2(d[1], d[0])
    N = mie_order(k * a) if N is None else int(N)
    J = bessel_j_all(N, [k * a])[:, 0]
    Y = bessel_y_all(N, [k * a])[:, 0]
    n = np.arange(N + 1)
    eps = np.where(n == 0, 1.0, 2.0)
    coef = -eps * (1j ** n) * J / (J + 1j * Y)
    return MieSolution(float(k), float(a), phi, N, coef)


def mie_eval(sol: MieSolution, x, strict: bool = True, symmetry: int = 0):
    """Scattered field and its gradient at points ``x`` of shape ``(..., 2)``.

    With ``strict=False`` points marginally inside the disk (curved-element
    quadrature) are accepted; the series is simply continued there.

    ``symmetry = L > 0`` declares that the point set is (mostly) invariant
    under rotation by ``2 pi / L`` -- true for quadrature points of the polar
    meshes.  Points are then grouped into rotation orbits: Hankel functions
    are evaluated once per orbit radius and the angular sums are done with
    length-``L`` FFTs.
    """
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    pts = x.reshape(-1, 2)
    r = np.hypot(pts[:, 0], pts[:, 1])
    if strict and np.any(r < sol.a * (1 - 1e-12)):
        raise ValueError("Mie field requested inside the scatterer")
    if np.any(r == 0):
        raise ValueError("Mie field undefined at the origin")
    ph = np.arctan2(pts[:, 1], pts[:, 0])
    u = np.empty(len(pts), dtype=complex)
    g = np.empty((len(pts), 2), dtype=complex)
    direct = np.ones(len(pts), dtype=bool)
    if symmetry and len(pts) >= 4 * symmetry:
        direct = _mie_orbits(sol, r, ph, int(symmetry), u, g)
    idx = np.nonzero(direct)[0]
    for s in range(0, len(idx), CHUNK):
        sel = idx[s : s + CHUNK]
        uu, gg = _mie_direct(sol, r[sel], ph[sel])
        u[sel], g[sel] = uu, gg
    return u.reshape(shape), g.reshape(shape + (2,))


def _polar_to_cartesian_grad(ur, uphi_over_r, ph):
    cs, sn = np.cos(ph), np.sin(ph)
    return np.stack([ur * cs - uphi_over_r * sn, ur * sn + uphi_over_r * cs], axis=-1)


def _mie_direct(sol, rr, ph):
    n = np.arange(sol.N + 1)[:, None]
    H, dH = hankel1_all(sol.N, sol.k * rr)
    cosn = np.cos(n * (ph - sol.phi_inc))
    sinn = np.sin(n * (ph - sol.phi_inc))
    c = sol.coef[:, None]
    uu = np.sum(c * H * cosn, axis=0)
    ur = sol.k * np.sum(c * dH * cosn, axis=0)
    uphi = -np.sum(c * H * n * sinn, axis=0) / rr
    return uu, _polar_to_cartesian_grad(ur, uphi, ph)


def _mie_orbits(sol, r, ph, L, u, g, min_orbit=8, batch=256):
    """Fill ``u, g`` for points lying on rotation orbits; returns mask of the rest."""
    dphi = 2 * np.pi / L
    scale = float(r.max())
    res = np.mod(ph, dphi)
    _, ir = np.unique(np.round(r / (1e-11 * scale)), return_inverse=True)
    _, ia = np.unique(np.round(res / 1e-11), return_inverse=True)
    key = ir.reshape(-1).astype(np.int64) * (int(ia.max()) + 1) + ia.reshape(-1)
    uniq, first, inv, counts = np.unique(key, return_index=True, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    big = np.nonzero(counts >= min_orbit)[0]
    rest = counts[inv] < min_orbit
    if len(big) == 0:
        return rest
    # point -> (group position in big, lattice index j)
    gpos = np.full(len(uniq), -1)
    gpos[big] = np.arange(len(big))
    r_g = r[first[big]]
    rho_g = res[first[big]]
    on = ~rest
    pg = gpos[inv[on]]
    j = np.mod(np.rint((ph[on] - rho_g[pg]) / dphi).astype(np.int64), L)
    targets = np.nonzero(on)[0]
    order = np.argsort(pg, kind="stable")
    bounds = np.searchsorted(pg[order], np.arange(0, len(big) + batch, batch))
    for b0 in range(0, len(big), batch):
        gb = np.arange(b0, min(b0 + batch, len(big)))
        vals = dict(zip(("u", "ur", "up"), mie_rotations(sol, r_g[gb], rho_g[gb], L)))
        sel = order[bounds[b0 // batch] : bounds[b0 // batch + 1]]
        loc = pg[sel] - b0
        jj = j[sel]
        pt = targets[sel]
        ang = rho_g[pg[sel]] + jj * dphi
        u[pt] = vals["u"][loc, jj]
        g[pt] = _polar_to_cartesian_grad(vals["ur"][loc, jj], vals["up"][loc, jj], ang)
    return rest


def mie_rotations(sol: MieSolution, r, phi, L: int):
    """Series values at the ``L`` rotations of the points ``(r, phi)`` by ``2 pi j / L``.

    Returns ``u``, ``du/dr`` and ``(1/r) du/dphi``, each of shape
    ``(len(r), L)``; column ``j`` belongs to the polar angle
    ``phi + 2 pi j / L``.  The Hankel functions are evaluated once per point
    and the angular sums are length-``L`` FFTs.
    """
    r = np.asarray(r, dtype=float)
    phi = np.asarray(phi, dtype=float)
    n = np.arange(-sol.N, sol.N + 1)
    na = np.abs(n)
    half = np.where(n == 0, 1.0, 0.5)
    cn = sol.coef[na] * half * np.exp(-1j * n * sol.phi_inc)  # coefficient of exp(i n phi)
    slot = np.mod(n, L)
    H, dH = hankel1_all(sol.N, sol.k * r)  # (N+1, npts)
    phase = np.exp(1j * np.outer(phi, n))  # (npts, 2N+1)
    series = (
        cn[None, :] * H[na].T * phase,
        sol.k * cn[None, :] * dH[na].T * phase,
        1j * n[None, :] * cn[None, :] * H[na].T * phase / r[:, None],
    )
    out = []
    for coef in series:
        if len(n) > L:
            B = np.zeros((len(r), L), dtype=complex)
            for col, m in enumerate(slot):
                B[:, m] += coef[:, col]
        else:
            B = np.zeros((len(r), L), dtype=complex)
            B[:, slot] = coef
        out.append(np.fft.ifft(B, axis=1) * L)
    return tuple(out)


def plane_wave(k: float, direction, x):
    """``exp(i k d.x)`` and its gradient."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    x = np.asarray(x, dtype=float)
    u = np.exp(1j * k * (x @ d))
    return u, 1j * k * u[..., None] * d


# ---------------------------------------------------------------------------
# manufactured solutions


@dataclass(frozen=True)
class ManufacturedField:
    """Smooth field ``u`` with gradient and Laplacian (all callables of ``x (..., 2)``)."""

    u: object
    grad: object
    lap: object

    def __call__(self, x):
        return self.u(x), self.grad(x)


def sine_plane_wave(k: float, half_width: float, direction=(1.0, 0.0)) -> ManufacturedField:
    """``sin(pi x/L) sin(pi y/L) exp(i k d.x)`` with ``L = 2 * half_width``, zero on the square boundary.

    The sine factors vanish on ``|x| = half_width`` and ``|y| = half_width``.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    w = math.pi / (2 * half_width)

    def parts(x):
        x = np.asarray(x, dtype=float)
        X, Y = x[..., 0] + half_width, x[..., 1] + half_width
        sx, sy = np.sin(w * X), np.sin(w * Y)
        cx, cy = np.cos(w * X), np.cos(w * Y)
        e = np.exp(1j * k * (x @ d))
        return sx, sy, cx, cy, e

    def u(x):
        sx, sy, _, _, e = parts(x)
        return sx * sy * e

    def grad(x):
        sx, sy, cx, cy, e = parts(x)
        gx = (w * cx * sy + 1j * k * d[0] * sx * sy) * e
        gy = (w * sx * cy + 1j * k * d[1] * sx * sy) * e
        return np.stack([gx, gy], axis=-1)

    def lap(x):
        sx, sy, cx, cy, e = parts(x)
        # product rule: lap(s e) = e lap s + 2 grad s . grad e + s lap e
        lap_s = -2 * w * w * sx * sy
        cross = 2j * k * (d[0] * w * cx * sy + d[1] * w * sx * cy)
        return (lap_s + cross - k * k * sx * sy) * e

    return ManufacturedField(u, grad, lap)
