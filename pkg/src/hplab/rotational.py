"""Exact Fourier block-diagonalization on rotationally periodic meshes.

The disk-truncated polar meshes are invariant under the rotation ``Q`` by
``2 pi / L``, and so are the radial PML coefficients (``A(Qx) = Q A(x) Q^T``).
The global system matrix is therefore block circulant: numbering every global
degree of freedom as ``(r, j)`` -- an orbit representative ``r`` in one
period (a *sector*) and the sector index ``j`` -- its entries depend only on
``j' - j``.  A discrete Fourier transform over ``j`` splits the problem into
``L`` independent sector-sized systems

    A_m = W_0 + w^m W_+ + w^{-m} W_-,      w = exp(2 pi i / L),

where ``W_0`` couples representatives inside one sector and ``W_+`` / ``W_-``
couple them to the neighbouring sectors.  Solving all ``L`` systems and
transforming back gives exactly the finite-element solution on the full
mesh, at the cost of assembling one sector only.

Only plane-wave scattering is supported (its Dirichlet data are evaluated at
every rotated boundary node); errors against the Mie series are computed
sector by sector with the same FFT trick.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .elements import MAX_EXACTNESS
from .forms import (PlaneWaveScattering, ProblemError, ProblemSpec, Space, assemble, element_mask,
                    make_space)
from .mesh import REGION_IN, Mesh
from .reference import make_mie, mie_eval, mie_rotations, plane_wave

RAY_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class SectorSystem:
    """Sector space, orbit numbering and the three coupling blocks.

    ``rep[d]`` is the orbit representative of sector dof ``d`` and
    ``shift[d]`` (0 or 1) the sector, relative to the owning one, in which
    that representative sits: dofs on the closing ray belong to the next
    sector.
    """

    problem: ProblemSpec
    space: Space
    L: int
    rep: np.ndarray
    shift: np.ndarray
    rep_coords: np.ndarray  # (R, 2) position of each representative in sector 0
    free: np.ndarray  # representative indices without constraint
    constrained: np.ndarray
    pattern: sp.csc_matrix  # union sparsity pattern over all representatives
    blocks: tuple  # data arrays of W_0, W_+, W_- on ``pattern``

    @property
    def n_reps(self) -> int:
        return len(self.rep_coords)

    @property
    def n(self) -> int:
        """Number of free degrees of freedom of the full (unreduced) problem."""
        return self.L * len(self.free)

    def mode_matrix(self, m: int) -> sp.csc_matrix:
        w = np.exp(2j * np.pi * m / self.L)
        W0, Wp, Wm = self.blocks
        data = W0 + w * Wp + np.conj(w) * Wm
        P = self.pattern
        return sp.csc_matrix((data, P.indices, P.indptr), shape=P.shape)


def _ray_match(coords, angle, L):
    """Indices of dofs on the opening ray, on the closing ray, and the pairing."""
    r = np.hypot(coords[:, 0], coords[:, 1])
    scale = r.max()
    alpha = 2 * math.pi / L
    # signed distance to the two bounding rays
    d0 = coords[:, 1]
    d1 = coords[:, 1] * math.cos(alpha) - coords[:, 0] * math.sin(alpha)
    left = np.nonzero((np.abs(d0) < RAY_TOL * scale) & (coords[:, 0] > 0))[0]
    right = np.nonzero((np.abs(d1) < RAY_TOL * scale) & (coords @ [math.cos(alpha), math.sin(alpha)] > 0))[0]
    if len(left) != len(right):
        raise ProblemError("sector rays carry different numbers of degrees of freedom")
    lo, ro = left[np.argsort(r[left])], right[np.argsort(r[right])]
    if np.any(np.abs(r[lo] - r[ro]) > RAY_TOL * scale):
        raise ProblemError("sector rays do not match under rotation")
    return lo, ro


def build_sector_system(problem: ProblemSpec, mesh: Mesh) -> SectorSystem:
    """Assemble one sector and derive the Fourier coupling blocks."""
    if not mesh.sector or mesh.symmetry < 2:
        raise ProblemError("a sector mesh (see mesh.build_sector) is required")
    if not isinstance(problem.data, PlaneWaveScattering):
        raise ProblemError("the rotational solver supports plane-wave scattering only")
    if problem.a_out is not None or problem.c_inv2_out is not None:
        raise ProblemError("the rotational solver needs rotation-invariant coefficients")
    L = int(mesh.symmetry)
    space = make_space(problem, mesh)
    bundle = assemble(problem, space, with_load=False)
    left, right = _ray_match(space.coords, 0.0, L)
    n_all = space.n_all
    is_right = np.zeros(n_all, dtype=bool)
    is_right[right] = True
    rep = np.full(n_all, -1, dtype=np.int64)
    owners = np.nonzero(~is_right)[0]
    rep[owners] = np.arange(len(owners))
    rep[right] = rep[left]
    shift = is_right.astype(np.int64)
    R = len(owners)
    constrained_rep = space.constrained_mask[owners]
    if np.any(space.constrained_mask[right] != space.constrained_mask[left]):
        raise ProblemError("constraints are not rotation invariant")

    C = bundle.A_full.tocoo()
    rows, cols = rep[C.row], rep[C.col]
    delta = shift[C.col] - shift[C.row]
    key = rows * R + cols
    uniq, inv = np.unique(key, return_inverse=True)
    ur, uc = np.divmod(uniq, R)
    data = []
    for dlt in (0, 1, -1):
        sel = delta == dlt
        v = np.zeros(len(uniq), dtype=complex)
        np.add.at(v, inv[sel], C.data[sel])
        data.append(v)
    # column-major ordering of the unique pattern
    order = np.lexsort((ur, uc))
    pattern = sp.csc_matrix((np.arange(1, len(uniq) + 1)[order].astype(float), (ur[order], uc[order])),
                            shape=(R, R))
    pattern.sort_indices()
    perm = pattern.data.astype(np.int64) - 1
    blocks = tuple(d[perm] for d in data)
    return SectorSystem(problem, space, L, rep, shift, space.coords[owners],
                        np.nonzero(~constrained_rep)[0], np.nonzero(constrained_rep)[0],
                        pattern, blocks)


def _rotate(x, L):
    """Points ``x`` (n, 2) rotated by ``2 pi j / L`` for all ``j``; shape (n, L, 2)."""
    ang = 2 * np.pi * np.arange(L) / L
    c, s = np.cos(ang), np.sin(ang)
    return np.stack([x[:, 0, None] * c - x[:, 1, None] * s, x[:, 0, None] * s + x[:, 1, None] * c], axis=-1)


def _dirichlet_orbits(system: SectorSystem):
    """Dirichlet values ``(n_constrained, L)`` on every rotated copy of the constrained representatives."""
    problem, space = system.problem, system.space
    data = problem.data
    geom = space.mesh.geometry
    out = np.zeros((len(system.constrained), system.L), dtype=complex)
    X = _rotate(system.rep_coords[system.constrained], system.L)
    rr = np.hypot(X[..., 0], X[..., 1])
    on_obstacle = np.abs(rr - geom.a) < 1e-9 * geom.a
    if "obstacle" in space.dirichlet:
        ui, _ = plane_wave(problem.k, data.direction, X[on_obstacle])
        out[on_obstacle] = -ui
    if data.outer_trace and "truncation" in space.dirichlet:
        outer = ~on_obstacle
        sol = make_mie(problem.k, geom.a, data.direction)
        out[outer] = mie_eval(sol, X[outer])[0]
    return out


@dataclass(frozen=True, eq=False)
class RotationalSolution:
    """Finite-element solution stored per orbit: ``values[r, j]`` is the dof ``r`` rotated into sector ``j``."""

    system: SectorSystem
    values: np.ndarray  # (R, L)

    def sector_coeffs(self) -> np.ndarray:
        """Coefficients ``(L, n_sector_dofs)`` of the sector space in every sector."""
        s = self.system
        j = (np.arange(s.L)[:, None] + s.shift[None, :]) % s.L
        return self.values[s.rep[None, :], j]


def solve_rotational(problem: ProblemSpec, mesh: Mesh, system: SectorSystem | None = None) -> RotationalSolution:
    """Solve the plane-wave problem on the full mesh generated by a sector mesh."""
    system = system or build_sector_system(problem, mesh)
    L, F, D = system.L, system.free, system.constrained
    uD = _dirichlet_orbits(system)
    uD_hat = np.fft.fft(uD, axis=1) / L
    x_hat = np.zeros((len(F), L), dtype=complex)
    for m in range(L):
        Am = system.mode_matrix(m)
        AFF = Am[F][:, F]
        rhs = -(Am[F][:, D] @ uD_hat[:, m])
        lu = spla.splu(sp.csc_matrix(AFF), permc_spec="COLAMD")
        x_hat[:, m] = lu.solve(rhs)
    values = np.empty((system.n_reps, L), dtype=complex)
    values[F] = np.fft.ifft(x_hat, axis=1) * L
    values[D] = uD
    return RotationalSolution(system, values)


def rotational_error_norms(sol: RotationalSolution, region="physical", exactness: int | None = None,
                           batch: int = 2_000_000):
    """``(err_L2, err_H1k, ref_L2, ref_H1k)`` against the Mie series over all sectors.

    Same quantities as ``forms.error_norms`` on the full mesh.  Gradients are
    compared in the frame of sector 0: both the discrete gradient and the
    polar components of the exact one are invariant under the rotation.
    """
    system = sol.system
    space, problem, L = system.space, system.problem, system.L
    k = problem.k
    mie = make_mie(k, space.mesh.geometry.a, problem.data.direction)
    sel = element_mask(space, region)
    exactness = exactness or min(2 * space.p + 3, MAX_EXACTNESS)
    coeffs = sol.sector_coeffs()  # (L, n_all)
    e0 = e1 = r0 = r1 = 0.0
    for sl, X, w, vals, grads in space.element_chunks(exactness):
        m = sel[sl]
        if not np.any(m):
            continue
        idx = np.nonzero(m)[0]
        nq = X.shape[1]
        step = max(1, batch // (nq * L))
        for s in range(0, len(idx), step):
            ee = idx[s : s + step]
            dofs = space.dofs[sl][ee]  # (ne, nb)
            wt = w[ee] * np.where(space.mesh.region[sl][ee] == REGION_IN, 1.0 / problem.beta_jump, 1.0)[:, None]
            c = coeffs[:, dofs]  # (L, ne, nb)
            uh = np.einsum("qb,leb->eql", vals, c)
            gh = np.einsum("eqbi,leb->eqil", grads[ee], c)
            pts = X[ee].reshape(-1, 2)
            rr = np.hypot(pts[:, 0], pts[:, 1])
            ph = np.arctan2(pts[:, 1], pts[:, 0])
            u, ur, up = (a.reshape(len(ee), nq, L) for a in mie_rotations(mie, rr, ph, L))
            cs, sn = (np.cos(ph).reshape(len(ee), nq, 1), np.sin(ph).reshape(len(ee), nq, 1))
            gx, gy = ur * cs - up * sn, ur * sn + up * cs
            ww = wt[..., None]
            e0 += np.sum(ww * np.abs(uh - u) ** 2)
            e1 += np.sum(ww * (np.abs(gh[:, :, 0] - gx) ** 2 + np.abs(gh[:, :, 1] - gy) ** 2))
            r0 += np.sum(ww * np.abs(u) ** 2)
            r1 += np.sum(ww * (np.abs(gx) ** 2 + np.abs(gy) ** 2))
    return math.sqrt(e0), math.sqrt(e1 / k**2 + e0), math.sqrt(r0), math.sqrt(r1 / k**2 + r0)
