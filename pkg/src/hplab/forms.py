"""Degree-of-freedom maps and assembly of the Helmholtz sesquilinear forms.

The discrete problem is: find ``u_h`` with

    a(u, v) = (int_out + 1/beta_jump int_in) k^{-2} (A grad u) . conj(grad v) - c^{-2} u conj(v)
              [ - i k^{-1} int_{Gamma_tr} u conj(v)    for impedance truncation ]

equal to the load functional for every test function ``v``.  Matrices use
the convention ``A[i, j] = a(phi_j, phi_i)`` so that ``A u = b`` with
``b_i = G(phi_i)``.  The mass matrix ``M`` and the ``H^1_k`` Gram matrix
``G = k^{-2} K + M`` carry the same ``1/beta_jump`` weight on the inner region.

Dirichlet constraints are eliminated: the reduced system acts on the free
degrees of freedom and inhomogeneous data enter through a discrete lifting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .elements import (LOCAL_EDGES, MAX_EXACTNESS, affine_nodes, curved_nodes, gauss_line, make_basis,
                       make_quadrature, map_points, physical_gradients)
from .mesh import REGION_IN, TAG_CODES, Mesh
from .pml import PmlProfile, eval_coefficients
from .reference import ManufacturedField, make_mie, mie_eval, plane_wave
from .solver import factorize

CHUNK = 20_000


class ProblemError(ValueError):
    """Inconsistent problem description."""


# ---------------------------------------------------------------------------
# data kinds


@dataclass(frozen=True)
class VolumeSource:
    """Load ``G(v) = int c^{-2} g conj(v)`` for ``g`` supported inside ``|x| < R_pml_minus``."""

    g: object


@dataclass(frozen=True)
class PlaneWaveScattering:
    """Scattered field of ``exp(i k d.x)`` by a sound-soft obstacle.

    ``outer_trace=True`` imposes the exact (Mie) scattered field as Dirichlet
    data on the truncation boundary instead of zero; with no layer this gives
    a problem whose only error is the discretization error.
    """

    direction: tuple = (1.0, 0.0)
    outer_trace: bool = False


@dataclass(frozen=True)
class Manufactured:
    """Data generated from a known smooth field (interior source plus boundary data)."""

    field: ManufacturedField


@dataclass(frozen=True)
class ProblemSpec:
    k: float
    p: int
    truncation: str = "pml"
    pml: PmlProfile | None = None
    obstacle_bc: str = "dirichlet"
    beta_jump: float = 1.0
    a_in: float = 1.0
    c_inv2_in: float = 1.0
    a_out: object = None
    c_inv2_out: object = None
    data: object = None

    def __post_init__(self):
        if not self.k > 0:
            raise ProblemError(f"wavenumber must be positive, got {self.k}")
        if self.p not in (1, 2, 3, 4):
            raise ProblemError(f"element degree must be 1..4, got {self.p}")
        if self.truncation not in ("pml", "impedance"):
            raise ProblemError("truncation must be 'pml' or 'impedance'")
        if self.truncation == "impedance" and self.pml is not None:
            raise ProblemError("impedance truncation takes no PML profile")
        if self.obstacle_bc not in ("dirichlet", "neumann"):
            raise ProblemError("obstacle_bc must be 'dirichlet' or 'neumann'")
        if not self.beta_jump > 0:
            raise ProblemError("beta_jump must be positive")
        if isinstance(self.data, PlaneWaveScattering) and self.obstacle_bc != "dirichlet":
            raise ProblemError("plane-wave scattering is only supported for a sound-soft obstacle")

    @property
    def exactness(self) -> int:
        return min(2 * self.p + 3, MAX_EXACTNESS)

    def dirichlet_tags(self, mesh: Mesh) -> tuple:
        tags = []
        if self.obstacle_bc == "dirichlet" and len(mesh.tagged("obstacle")):
            tags.append("obstacle")
        if self.truncation == "pml":
            tags.append("truncation")
        return tuple(tags)


# ---------------------------------------------------------------------------
# spaces


class Space:
    """Continuous degree-p Lagrange space on a mesh with isoparametric curved edges.

    Global numbering: vertex dofs, then ``p - 1`` dofs per edge (ordered from
    the lower- to the higher-numbered vertex), then element interiors.
    """

    def __init__(self, mesh: Mesh, p: int, dirichlet: tuple = ("obstacle",), curved: bool = True):
        self.mesh = mesh
        self.p = int(p)
        self.basis = make_basis(self.p)
        self.dirichlet = tuple(dirichlet)
        nv = mesh.n_vertices
        edges, tri_e = mesh.edge_table
        ne, nt = len(edges), mesh.n_triangles
        ni = (self.p - 1) * (self.p - 2) // 2
        nb = self.basis.size
        dofs = np.empty((nt, nb), dtype=np.int64)
        dofs[:, :3] = mesh.triangles
        col = 3
        t = mesh.triangles
        for loc, (ia, ib) in enumerate(LOCAL_EDGES):
            base = nv + tri_e[:, loc] * (self.p - 1)
            forward = t[:, ia] < t[:, ib]
            for s in range(self.p - 1):
                dofs[:, col + s] = base + np.where(forward, s, self.p - 2 - s)
            col += self.p - 1
        off = nv + ne * (self.p - 1)
        if ni:
            dofs[:, col:] = off + np.arange(nt)[:, None] * ni + np.arange(ni)[None, :]
        self.dofs = dofs
        self.n_all = off + nt * ni
        self.edge_offset = nv
        self.curved = bool(curved) and self.p > 1 and len(mesh.arcs) > 0
        self.geo_nodes = self._geometry()
        coords = np.empty((self.n_all, 2))
        coords[dofs.ravel()] = self.geo_nodes.reshape(-1, 2)
        self.coords = coords
        mask = np.zeros(self.n_all, dtype=bool)
        for tag in self.dirichlet:
            mask[self.boundary_dofs(tag)] = True
        self.constrained_mask = mask
        self.free = np.nonzero(~mask)[0]
        self.constrained = np.nonzero(mask)[0]

    def _geometry(self):
        mesh = self.mesh
        nodes = affine_nodes(mesh.corners, self.basis)
        if not self.curved:
            return nodes
        ai = mesh.edge_lookup(mesh.arcs)
        _, tri_e = mesh.edge_table
        # locate the owning (triangle, local edge) of each arc edge
        flat = tri_e.T.ravel()  # index = loc * nt + tri
        order = np.argsort(flat, kind="stable")
        pos = np.searchsorted(flat[order], ai)
        owners = order[pos]
        if np.any(flat[owners] != ai):
            raise ProblemError("arc edge not found in the triangulation")
        loc, tri = np.divmod(owners, mesh.n_triangles)
        # boundary arcs have one owner; interface arcs bend both neighbours
        tri_all, loc_all, geom_all = [tri], [loc], [mesh.arc_geom]
        nxt = pos + 1
        ok = nxt < len(flat)
        second = np.full(len(ai), -1)
        second[ok] = order[nxt[ok]]
        has2 = ok & (flat[np.where(second >= 0, second, 0)] == ai)
        if np.any(has2):
            l2, t2 = np.divmod(second[has2], mesh.n_triangles)
            tri_all.append(t2)
            loc_all.append(l2)
            geom_all.append(mesh.arc_geom[has2])
        tri = np.concatenate(tri_all)
        loc = np.concatenate(loc_all)
        geom = np.concatenate(geom_all)
        corners = mesh.corners
        for t_idx, l_idx, g in ((tri, loc, geom),):
            bent = curved_nodes(corners[t_idx], self.basis, l_idx, g[:, :2], g[:, 2])
            delta = bent - affine_nodes(corners[t_idx], self.basis)
            np.add.at(nodes, t_idx, delta)
        return nodes

    @property
    def n(self) -> int:
        return len(self.free)

    def boundary_dofs(self, tag: str) -> np.ndarray:
        pairs = self.mesh.tagged(tag)
        if len(pairs) == 0:
            return np.zeros(0, dtype=np.int64)
        idx = self.mesh.edge_lookup(pairs)
        ed = self.edge_offset + idx[:, None] * (self.p - 1) + np.arange(self.p - 1)[None, :]
        return np.unique(np.concatenate([pairs.ravel(), ed.ravel()]))

    def interpolate(self, func) -> np.ndarray:
        """Nodal interpolant of ``func`` (callable of points ``(n, 2)``) over all dofs."""
        return np.asarray(func(self.coords))

    def restrict(self, u_all):
        return np.asarray(u_all)[self.free]

    def expand(self, u_free, u_dirichlet=None):
        u = np.zeros(self.n_all, dtype=complex) if u_dirichlet is None else np.array(u_dirichlet, dtype=complex)
        u[self.free] = u_free
        return u

    def element_chunks(self, exactness: int, chunk: int = CHUNK):
        """Yield ``(slice, X, wdet, vals, grads)`` per chunk of elements."""
        q = make_quadrature(exactness)
        vals, rgrads = self.basis.eval(q.points)
        nt = self.mesh.n_triangles
        for s in range(0, nt, chunk):
            sl = slice(s, min(s + chunk, nt))
            X, J, det = map_points(self.geo_nodes[sl], self.basis, q.points)
            grads = physical_gradients(J, det, rgrads)
            yield sl, X, det * q.weights[None, :], vals, grads

    def boundary_quadrature(self, tag: str, npts: int | None = None):
        """Points, weights (arc length), shape values and owning dofs on tagged edges.

        Returns ``(X (nb_e, nq, 2), w (nb_e, nq), vals (nb_e, nq, nb), dofs (nb_e, nb), normals (nb_e, nq, 2))``;
        normals point out of the computational domain.
        """
        pairs = self.mesh.tagged(tag)
        nb = self.basis.size
        if len(pairs) == 0:
            z = np.zeros((0, 1))
            return np.zeros((0, 1, 2)), z, np.zeros((0, 1, nb)), np.zeros((0, nb), dtype=int), np.zeros((0, 1, 2))
        idx = self.mesh.edge_lookup(pairs)
        _, tri_e = self.mesh.edge_table
        flat = tri_e.T.ravel()
        order = np.argsort(flat, kind="stable")
        owners = order[np.searchsorted(flat[order], idx)]
        loc, tri = np.divmod(owners, self.mesh.n_triangles)
        t, wt = gauss_line(npts or self.p + 3)
        ref_v = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        Xs, Ws, Vs, Ns = [], [], [], []
        for l, (ia, ib) in enumerate(LOCAL_EDGES):
            sel = loc == l
            pts = (1 - t)[:, None] * ref_v[ia] + t[:, None] * ref_v[ib]
            tang_ref = ref_v[ib] - ref_v[ia]
            vals, _ = self.basis.eval(pts)
            X, J, _ = map_points(self.geo_nodes[tri[sel]], self.basis, pts, check=False)
            tang = np.einsum("eqij,j->eqi", J, tang_ref)
            ds = np.linalg.norm(tang, axis=-1)
            # positively oriented element: outward normal is the tangent rotated clockwise
            nrm = np.stack([tang[..., 1], -tang[..., 0]], axis=-1) / ds[..., None]
            Xs.append((sel, X))
            Ws.append(ds * wt[None, :])
            Vs.append(np.broadcast_to(vals, (int(sel.sum()),) + vals.shape))
            Ns.append(nrm)
        ne, nq = len(idx), len(t)
        X = np.empty((ne, nq, 2))
        W = np.empty((ne, nq))
        V = np.empty((ne, nq, nb))
        N = np.empty((ne, nq, 2))
        for (sel, x), w, v, n in zip(Xs, Ws, Vs, Ns):
            X[sel], W[sel], V[sel], N[sel] = x, w, v, n
        return X, W, V, self.dofs[tri], N


def make_space(problem: ProblemSpec, mesh: Mesh, curved: bool = True) -> Space:
    return Space(mesh, problem.p, problem.dirichlet_tags(mesh), curved=curved)


# ---------------------------------------------------------------------------
# assembly


@dataclass(frozen=True, eq=False)
class SystemBundle:
    """Reduced system on the free dofs plus the data needed to undo the reduction."""

    problem: ProblemSpec
    space: Space
    A: sp.csr_matrix
    M: sp.csr_matrix
    G: sp.csr_matrix
    b: np.ndarray
    u_dirichlet: np.ndarray  # full-length vector holding the lifted Dirichlet values
    A_full: sp.csr_matrix = field(repr=False)

    @cached_property
    def lu(self):
        return factorize(self.A)

    @property
    def n(self):
        return self.A.shape[0]

    def solve(self, rhs=None):
        return self.lu.solve(self.b if rhs is None else rhs)

    def solve_adjoint(self, rhs):
        return self.lu.solve(rhs, trans="H")


class _Accumulator:
    """Deterministic COO accumulation of several matrices sharing one sparsity pattern."""

    def __init__(self, n, names):
        self.n = n
        self.rows, self.cols = [], []
        self.data = {k: [] for k in names}

    def add(self, dofs, **blocks):
        nb = dofs.shape[1]
        self.rows.append(np.repeat(dofs, nb, axis=1).ravel())
        self.cols.append(np.tile(dofs, (1, nb)).ravel())
        for k, v in blocks.items():
            self.data[k].append(v.reshape(-1))

    def build(self):
        if not self.rows:
            z = sp.csr_matrix((self.n, self.n), dtype=complex)
            return {k: z.copy() for k in self.data}
        r = np.concatenate(self.rows)
        c = np.concatenate(self.cols)
        key = r * self.n + c
        uniq, inv = np.unique(key, return_inverse=True)
        ur, uc = np.divmod(uniq, self.n)
        out = {}
        for k, parts in self.data.items():
            if not parts:
                out[k] = sp.csr_matrix((self.n, self.n))
                continue
            v = np.concatenate(parts)
            summed = np.bincount(inv, weights=v.real, minlength=len(uniq))
            if np.iscomplexobj(v):
                summed = summed + 1j * np.bincount(inv, weights=v.imag, minlength=len(uniq))
            out[k] = sp.csr_matrix((summed, (ur, uc)), shape=(self.n, self.n))
        return out


def _coefficients(problem: ProblemSpec, X, region):
    """Per-point ``A`` (..., 2, 2), ``c^{-2}`` and region weight for an element chunk."""
    A, c2 = eval_coefficients(problem.pml if problem.truncation == "pml" else None, X,
                              problem.a_out, problem.c_inv2_out)
    inner = region == REGION_IN
    if np.any(inner):
        Xi = X[inner]
        a_in = problem.a_in(Xi) if callable(problem.a_in) else problem.a_in
        c_in = problem.c_inv2_in(Xi) if callable(problem.c_inv2_in) else problem.c_inv2_in
        Ai = np.zeros(Xi.shape[:-1] + (2, 2), dtype=complex)
        Ai[..., 0, 0] = Ai[..., 1, 1] = a_in
        A[inner] = Ai
        c2[inner] = c_in
    weight = np.where(inner, 1.0 / problem.beta_jump, 1.0)
    return A, c2, weight


def _check_interfaces(problem: ProblemSpec, mesh: Mesh):
    geom = mesh.geometry
    if problem.truncation == "pml" and problem.pml is not None and problem.pml.theta > 0 and geom is not None:
        if abs(problem.pml.R_minus - geom.R_pml_minus) > 1e-12 * geom.R_pml_minus:
            raise ProblemError(
                f"PML onset R_minus={problem.pml.R_minus} does not match the fitted circle "
                f"R_pml_minus={geom.R_pml_minus}: unresolved interface"
            )
    if problem.truncation == "pml" and problem.pml is not None and problem.pml.theta > 0:
        # every element must lie on one side of the PML onset circle
        r = np.linalg.norm(mesh.corners, axis=2)
        R = problem.pml.R_minus
        tol = 1e-9 * R
        if len(mesh.arcs) == 0 and mesh.nested:
            # straight refinements approximate the circle by chords: allow the sagitta
            tol = max(tol, mesh.h_max**2 / R)
        if np.any((r.min(axis=1) < R - tol) & (r.max(axis=1) > R + tol)):
            raise ProblemError("mesh does not resolve the PML onset circle: unresolved interface")


def assemble(problem: ProblemSpec, space: Space, with_load: bool = True) -> SystemBundle:
    """Assemble the system matrix, Gram matrices and load on ``space``."""
    if space.p != problem.p:
        raise ProblemError("space degree differs from problem degree")
    mesh = space.mesh
    _check_interfaces(problem, mesh)
    k = problem.k
    acc = _Accumulator(space.n_all, ("A", "M", "K"))
    load = np.zeros(space.n_all, dtype=complex)
    data = problem.data if with_load else None
    for sl, X, w, vals, grads in space.element_chunks(problem.exactness):
        region = np.broadcast_to(mesh.region[sl][:, None], w.shape)
        A, c2, weight = _coefficients(problem, X, region)
        ww = w * weight
        ne, nq, nb, _ = grads.shape
        gw = grads * ww[..., None, None]
        # plain stiffness K_ij = sum_q w grad phi_i . grad phi_j
        G2 = grads.transpose(0, 2, 1, 3).reshape(ne, nb, nq * 2)
        GW2 = gw.transpose(0, 2, 1, 3).reshape(ne, nb, nq * 2)
        K = GW2 @ G2.transpose(0, 2, 1)
        AG = np.einsum("eqab,eqjb->eqja", A, grads)  # A grad phi_j
        AG2 = AG.transpose(0, 2, 1, 3).reshape(ne, nb, nq * 2)
        KA = GW2 @ AG2.transpose(0, 2, 1)
        Mv = (vals[None] * ww[..., None]).transpose(0, 2, 1)  # (ne, nb, nq)
        Mass = Mv @ vals[None]
        Mc = (Mv * c2[:, None, :]) @ vals[None]
        acc.add(space.dofs[sl], A=(KA / k**2 - Mc), M=Mass, K=K)
        if data is not None:
            f = _volume_density(problem, X, c2)
            if f is not None:
                np.add.at(load, space.dofs[sl], np.einsum("ebq,eq->eb", Mv, f))
    mats = acc.build()
    A_full = mats["A"].astype(complex)
    M_full = mats["M"].real
    G_full = (mats["K"].real / k**2 + M_full)
    if problem.truncation == "impedance":
        X, W, V, D, _ = space.boundary_quadrature("truncation")
        if len(W):
            B = np.einsum("eqi,eq,eqj->eij", V, W, V)
            bacc = _Accumulator(space.n_all, ("B",))
            bacc.add(D, B=B)
            A_full = A_full - 1j / k * bacc.build()["B"]
    if data is not None:
        load += _boundary_load(problem, space)
    u_d = np.zeros(space.n_all, dtype=complex)
    if data is not None:
        u_d = _dirichlet_values(problem, space)
    free = space.free
    A_full = A_full.tocsr()
    A = A_full[free][:, free].tocsr()
    b = load[free] - A_full[free][:, space.constrained] @ u_d[space.constrained]
    M = M_full[free][:, free].tocsr()
    G = G_full[free][:, free].tocsr()
    return SystemBundle(problem, space, A, M, G, b, u_d, A_full)


def assemble_hermitian_part(bundle_or_matrix):
    """``(A + A^H) / 2`` of a bundle's system matrix (or of a given matrix)."""
    A = bundle_or_matrix.A if isinstance(bundle_or_matrix, SystemBundle) else bundle_or_matrix
    if sp.issparse(A):
        return ((A + A.conj().T) * 0.5).tocsr()
    A = np.asarray(A)
    return (A + A.conj().T) * 0.5


def _volume_density(problem: ProblemSpec, X, c2):
    data = problem.data
    if isinstance(data, VolumeSource):
        g = np.asarray(data.g(X), dtype=complex)
        if problem.truncation == "pml" and problem.pml is not None and problem.pml.theta > 0:
            outside = np.hypot(X[..., 0], X[..., 1]) > problem.pml.R_minus * (1 + 1e-12)
            if np.any(np.abs(g[outside]) > 0):
                raise ProblemError("volume source must vanish for |x| >= R_pml_minus")
        return c2 * g
    if isinstance(data, Manufactured):
        _require_trivial_layer(problem)
        u = data.field.u(X)
        lap = data.field.lap(X)
        a = _scalar_a(problem, X)
        return -lap * a / problem.k**2 - c2 * u
    return None


def _scalar_a(problem, X):
    if problem.a_out is None:
        return 1.0
    return problem.a_out(X)


def _require_trivial_layer(problem):
    if problem.truncation == "pml" and problem.pml is not None and problem.pml.theta > 0:
        raise ProblemError("manufactured data require theta = 0 (no complex stretching)")
    if problem.a_out is not None or problem.c_inv2_out is not None or problem.beta_jump != 1.0:
        raise ProblemError("manufactured data support constant unit coefficients only")


def _boundary_load(problem: ProblemSpec, space: Space):
    """Natural-boundary data of a manufactured field (impedance and Neumann edges)."""
    load = np.zeros(space.n_all, dtype=complex)
    data = problem.data
    if not isinstance(data, Manufactured):
        return load
    k = problem.k
    tags = []
    if problem.truncation == "impedance":
        tags.append(("truncation", True))
    if problem.obstacle_bc == "neumann":
        tags.append(("obstacle", False))
    for tag, impedance in tags:
        X, W, V, D, N = space.boundary_quadrature(tag)
        if len(W) == 0:
            continue
        u = data.field.u(X)
        dn = np.sum(data.field.grad(X) * N, axis=-1)
        h = dn / k**2 - (1j / k) * u if impedance else dn / k**2
        np.add.at(load, D, np.einsum("eqb,eq->eb", V, W * h))
    return load


def _dirichlet_values(problem: ProblemSpec, space: Space):
    u = np.zeros(space.n_all, dtype=complex)
    data = problem.data
    mesh = space.mesh
    if isinstance(data, Manufactured):
        idx = space.constrained
        u[idx] = data.field.u(space.coords[idx])
    elif isinstance(data, PlaneWaveScattering):
        if "obstacle" in space.dirichlet:
            idx = space.boundary_dofs("obstacle")
            ui, _ = plane_wave(problem.k, data.direction, space.coords[idx])
            u[idx] = -ui
        if data.outer_trace and "truncation" in space.dirichlet:
            geom = mesh.geometry
            sol = make_mie(problem.k, geom.a, data.direction)
            idx = space.boundary_dofs("truncation")
            u[idx] = mie_eval(sol, space.coords[idx])[0]
    return u


def plane_wave_rhs(problem: ProblemSpec, space: Space) -> np.ndarray:
    """Reduced load vector of the scattered-field problem (Dirichlet lifting of ``-u_inc``)."""
    if not isinstance(problem.data, PlaneWaveScattering):
        raise ProblemError("problem data is not plane-wave scattering")
    if problem.obstacle_bc != "dirichlet" or space.mesh.geometry is None or \
            space.mesh.geometry.obstacle_kind != "disk-dirichlet":
        raise ProblemError("plane-wave scattering requires a sound-soft disk")
    return assemble(problem, space).b


# ---------------------------------------------------------------------------
# solutions and error measurement


@dataclass(frozen=True, eq=False)
class SolutionField:
    space: Space
    problem: ProblemSpec
    coeffs: np.ndarray  # all dofs, Dirichlet values included

    @property
    def free_coeffs(self):
        return self.coeffs[self.space.free]


def solve(problem: ProblemSpec, space: Space, bundle: SystemBundle | None = None) -> SolutionField:
    bundle = bundle or assemble(problem, space)
    x = bundle.solve()
    return SolutionField(space, problem, space.expand(x, bundle.u_dirichlet))


def element_mask(space: Space, region: str | float = "physical") -> np.ndarray:
    """Elements used for error measurement.

    ``'physical'`` selects elements inside ``|x| <= R_pml_minus`` (the
    comparison region for truncated problems), ``'all'`` every element, and
    a number ``R`` those inside ``|x| <= R``.
    """
    mesh = space.mesh
    if region == "all":
        return np.ones(mesh.n_triangles, dtype=bool)
    if region == "physical":
        if mesh.geometry is None:
            return np.ones(mesh.n_triangles, dtype=bool)
        R = mesh.geometry.R_pml_minus
    else:
        R = float(region)
    r = np.linalg.norm(mesh.corners, axis=2).max(axis=1)
    return r <= R * (1 + 1e-9)


def error_norms(sol: SolutionField, reference, region="physical", exactness: int | None = None):
    """``(err_L2, err_H1k, ref_L2, ref_H1k)`` of ``u_h - u`` over the selected elements.

    ``reference`` is a callable ``x -> (u, grad u)``; the norms carry the
    ``1/beta_jump`` weight on the inner region like the Gram matrices.
    """
    space, k = sol.space, sol.problem.k
    sel = element_mask(space, region)
    exactness = exactness or min(2 * space.p + 3, MAX_EXACTNESS)
    e0 = e1 = r0 = r1 = 0.0
    coeffs = sol.coeffs
    for sl, X, w, vals, grads in space.element_chunks(exactness):
        m = sel[sl]
        if not np.any(m):
            continue
        wt = w[m] * np.where(space.mesh.region[sl][m] == REGION_IN, 1.0 / sol.problem.beta_jump, 1.0)[:, None]
        c = coeffs[space.dofs[sl][m]]
        uh = np.einsum("qb,eb->eq", vals, c)
        gh = np.einsum("eqbi,eb->eqi", grads[m], c)
        u, g = reference(X[m]) if reference is not None else (np.zeros(uh.shape), np.zeros(gh.shape))
        du, dg = uh - u, gh - g
        e0 += np.sum(wt * np.abs(du) ** 2)
        e1 += np.sum(wt * np.sum(np.abs(dg) ** 2, axis=-1))
        r0 += np.sum(wt * np.abs(u) ** 2)
        r1 += np.sum(wt * np.sum(np.abs(g) ** 2, axis=-1))
    err_l2 = math.sqrt(e0)
    err_h1k = math.sqrt(e1 / k**2 + e0)
    return err_l2, err_h1k, math.sqrt(r0), math.sqrt(r1 / k**2 + r0)


def gram_matrices(space: Space, region="all", beta_jump: float = 1.0, exactness: int | None = None):
    """Mass and stiffness matrices over all dofs, restricted to the elements of ``region``.

    The inner region carries the ``1/beta_jump`` weight, as in ``assemble``.
    """
    sel = element_mask(space, region)
    acc = _Accumulator(space.n_all, ("M", "K"))
    for sl, X, w, vals, grads in space.element_chunks(exactness or min(2 * space.p + 3, MAX_EXACTNESS)):
        m = sel[sl]
        if not np.any(m):
            continue
        ww = w[m] * np.where(space.mesh.region[sl][m] == REGION_IN, 1.0 / beta_jump, 1.0)[:, None]
        g = grads[m]
        ne, nq, nb, _ = g.shape
        G2 = g.transpose(0, 2, 1, 3).reshape(ne, nb, nq * 2)
        GW2 = (g * ww[..., None, None]).transpose(0, 2, 1, 3).reshape(ne, nb, nq * 2)
        Mv = (vals[None] * ww[..., None]).transpose(0, 2, 1)
        acc.add(space.dofs[sl][m], M=Mv @ vals[None], K=GW2 @ G2.transpose(0, 2, 1))
    mats = acc.build()
    return mats["M"].real.tocsr(), mats["K"].real.tocsr()


def mie_reference(problem: ProblemSpec, mesh: Mesh):
    """Callable ``x -> (u_scat, grad u_scat)`` for a plane-wave problem on a disk."""
    sol = make_mie(problem.k, mesh.geometry.a, problem.data.direction)
    return lambda x: mie_eval(sol, x, strict=False, symmetry=mesh.symmetry)


def export_triplets(matrix, path) -> None:
    """Write a sparse matrix as ``i j re im`` lines."""
    C = sp.coo_matrix(matrix)
    order = np.lexsort((C.col, C.row))
    with open(Path(path), "w", encoding="utf-8") as fh:
        for i, j, v in zip(C.row[order], C.col[order], np.asarray(C.data, dtype=complex)[order]):
            fh.write(f"{i} {j} {float(v.real)!r} {float(v.imag)!r}\n")
