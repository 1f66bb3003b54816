"""Discrete versions of the constants and operators behind the error analysis.

* the smoothing operator ``S = psi(P)`` built from the generalized eigenpairs
  of the Hermitian part ``P`` of the system matrix against the mass matrix,
  and the coercive modification ``a~ = a + <S., .>``;
* the elliptic projection onto a nested coarse space;
* the solution-operator norm ``C_sol`` (L^2 -> H^1_k) and the adjoint
  approximability ``eta`` of a coarse space, both by power iteration;
* the regularity splitting ``u = u_0 + ... + u_{m-1} + r_m`` and the
  smoothing ratio ``||S (I - Pi~) v|| / ||(I - Pi~) v||``;
* continuity and Garding constants.

Vectors live on the free degrees of freedom of a ``Space``; the sesquilinear
form is ``a(u, v) = v^H A u`` and ``<u, v> = v^H M u``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .elements import make_basis
from .forms import ProblemSpec, Space, SystemBundle, assemble, assemble_hermitian_part, gram_matrices
from .pml import ellipticity_constant
from .solver import NotPositiveDefiniteError, SparseLu, operator_norm_power

MAX_DENSE = 6000
DEFAULT_DELTA = 0.1


class CoercivityError(ArithmeticError):
    """The modified form failed to be coercive."""


class HierarchyError(ValueError):
    """Spaces are not nested as required."""


def psi(x, delta: float = DEFAULT_DELTA):
    """Spectral cutoff ``max(1 + delta - x, 0)``; ``x + psi(x) >= 1`` for every ``x``."""
    return np.maximum(1.0 + delta - np.asarray(x, dtype=float), 0.0)


def _dense(A):
    return A.toarray() if sp.issparse(A) else np.asarray(A)


# ---------------------------------------------------------------------------
# smoothing operator


@dataclass(frozen=True, eq=False)
class SpectralBundle:
    """Low part of the eigen-decomposition ``P Phi = M Phi Lambda`` and the smoothing data.

    Only eigenpairs with ``lambda < 1 + delta`` are stored: ``psi`` vanishes
    above that, so the others do not enter ``S`` (and satisfy
    ``lambda + psi(lambda) >= 1`` trivially).  ``S`` is the matrix of the form
    ``<S u, v> = v^H S u``, i.e. ``S = (M Phi) psi(Lambda) (M Phi)^H``, and
    ``A_tilde = A + S``.
    """

    bundle: SystemBundle
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray = field(repr=False)
    delta: float
    psi_values: np.ndarray = field(repr=False)
    S: np.ndarray = field(repr=False)
    A_tilde: np.ndarray = field(repr=False)
    c_tilde: float

    @property
    def rank(self) -> int:
        return int(np.count_nonzero(self.psi_values > 0))

    def apply_S(self, v):
        """Coefficients of the function ``S v`` in the space (``psi(P) v``)."""
        Phi = self.eigenvectors
        return Phi @ (self.psi_values * (Phi.conj().T @ (self.bundle.M @ v)))

    def s_norm(self, v) -> float:
        """``||S v||_M``."""
        c = self.eigenvectors.conj().T @ (self.bundle.M @ v)
        return float(np.sqrt(np.sum((self.psi_values * np.abs(c)) ** 2)))


def build_smoothing(bundle: SystemBundle, delta: float = DEFAULT_DELTA) -> SpectralBundle:
    """Dense spectral construction of ``S = psi(P)`` and the coercivity certificate.

    ``P = (A + A^H) / 2`` is the matrix of ``Re a``.  ``c_tilde`` is the
    smallest eigenvalue of ``(Re A~, G)`` with ``Re A~ = P + S``; it must be
    positive.
    """
    n = bundle.n
    if n > MAX_DENSE:
        raise ValueError(f"dense eigensolve limited to n <= {MAX_DENSE}, got n = {n}")
    if not delta > 0:
        raise ValueError("delta must be positive")
    A = _dense(bundle.A).astype(complex)
    P = 0.5 * (A + A.conj().T)
    M = _dense(bundle.M).astype(float)
    G = _dense(bundle.G).astype(float)
    try:
        lam, phi = sla.eigh(P, M, subset_by_value=(-np.inf, 1.0 + delta))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"eigensolve failed: {exc}") from exc
    vals = psi(lam, delta)
    MPhi = M @ phi
    S = (MPhi * vals) @ MPhi.conj().T
    S = 0.5 * (S + S.conj().T)
    At = A + S
    c_tilde = float(sla.eigh(0.5 * (At + At.conj().T), G, eigvals_only=True, subset_by_index=[0, 0])[0])
    if not c_tilde > 0:
        raise CoercivityError(f"coercivity violated: smallest eigenvalue of Re a~ relative to G is {c_tilde:.3e}")
    return SpectralBundle(bundle, lam, phi, float(delta), vals, S, At, c_tilde)


def coercivity_slack(sb: SpectralBundle, n_samples: int = 100, seed: int = 0) -> float:
    """Largest violation of ``Re a~(v, v) >= ||v||_M^2`` over random ``v`` (relative to ``||v||_M^2``).

    Returns ``max(0, max_v (||v||_M^2 - Re a~(v, v)) / ||v||_M^2)``.
    """
    rng = np.random.default_rng(seed)
    M = sb.bundle.M
    worst = 0.0
    for _ in range(n_samples):
        v = rng.standard_normal(sb.bundle.n) + 1j * rng.standard_normal(sb.bundle.n)
        re = float(np.real(np.vdot(v, sb.A_tilde @ v)))
        m = float(np.real(np.vdot(v, M @ v)))
        worst = max(worst, (m - re) / m)
    return worst


# ---------------------------------------------------------------------------
# nested spaces


def _ancestors(fine_mesh, coarse_mesh):
    """Coarse element containing each fine element (through the parent chain)."""
    anc = np.arange(fine_mesh.n_triangles)
    mesh = fine_mesh
    while mesh is not coarse_mesh:
        if mesh.parent is None or mesh.coarse is None or not mesh.nested:
            raise HierarchyError("spaces are not nested: fine mesh is not a straight refinement of the coarse mesh")
        anc = mesh.parent[anc]
        mesh = mesh.coarse
    return anc


def prolongation(coarse: Space, fine: Space, free: bool = True):
    """Sparse matrix mapping coarse coefficients to fine coefficients of the same function."""
    if coarse.p != fine.p:
        raise HierarchyError("spaces must have the same degree")
    if coarse.curved or fine.curved:
        raise HierarchyError("curved spaces are not nested")
    anc = _ancestors(fine.mesh, coarse.mesh)
    # one owning (element, local node) per fine dof
    _, first = np.unique(fine.dofs.ravel(), return_index=True)
    el, loc = np.divmod(first, fine.basis.size)
    x = fine.coords[fine.dofs[el, loc]]
    corners = coarse.mesh.corners[anc[el]]
    # barycentric -> reference coordinates in the coarse element
    d1, d2 = corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    r = x - corners[:, 0]
    xi = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
    eta = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
    basis = make_basis(coarse.p)
    rows, cols, vals = [], [], []
    for s in range(0, len(xi), 50_000):
        sl = slice(s, s + 50_000)
        V, _ = basis.eval(np.column_stack([xi[sl], eta[sl]]))
        fd = fine.dofs[el[sl], loc[sl]]
        cd = coarse.dofs[anc[el[sl]]]
        keep = np.abs(V) > 1e-14
        rows.append(np.broadcast_to(fd[:, None], V.shape)[keep])
        cols.append(cd[keep])
        vals.append(V[keep])
    P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(fine.n_all, coarse.n_all))
    if not free:
        return P
    Pf = P[fine.free][:, coarse.free].tocsr()
    # coarse free functions must vanish on the fine constrained boundary
    leak = P[fine.constrained][:, coarse.free]
    if leak.nnz and np.abs(leak.data).max() > 1e-12:
        raise HierarchyError("coarse free functions do not vanish on the fine constrained boundary")
    return Pf


def coarse_interpolant(coarse: Space, fine: Space, v):
    """Coarse nodal interpolant of a fine free-dof vector ``v`` (values at the coarse nodes)."""
    v_all = np.zeros(fine.n_all, dtype=complex)
    v_all[fine.free] = v
    tree = cKDTree(fine.coords)
    dist, idx = tree.query(coarse.coords[coarse.free])
    scale = np.abs(fine.coords).max()
    if np.any(dist > 1e-9 * scale):
        raise HierarchyError("coarse nodes are not fine nodes")
    return v_all[idx]


# ---------------------------------------------------------------------------
# elliptic projection


@dataclass(frozen=True, eq=False)
class Projection:
    coarse_coeffs: np.ndarray
    fine_coeffs: np.ndarray  # the projection expressed in the fine space
    residual: float  # max_w |a~(w, v - Pi v)| / ||w||_G over coarse basis directions, relative
    quasi_optimality: float  # ||(I - Pi~) v||_G / ||(I - I_h) v||_G


def _g_norm(G, v) -> float:
    return float(np.sqrt(max(np.real(np.vdot(v, G @ v)), 0.0)))


def elliptic_projection(sb: SpectralBundle, coarse: Space, v, P=None) -> Projection:
    """``Pi~ v`` on the coarse space: ``a~(w, Pi~ v) = a~(w, v)`` for all coarse ``w``.

    With ``w = P c_w`` and ``a~(w, z) = z^H A~ w`` the defining equations
    read ``P^H A~^H P c = P^H A~^H v``.
    """
    fine = sb.bundle.space
    P = prolongation(coarse, fine) if P is None else P
    P = _dense(P)
    G = _dense(sb.bundle.G)
    v = np.asarray(v, dtype=complex)
    AP = sb.A_tilde @ P  # columns: A~ applied to the coarse basis
    c = np.linalg.solve(AP.conj().T @ P, AP.conj().T @ v)
    w = P @ c
    e = v - w
    err = _g_norm(G, e)
    # Galerkin orthogonality residual |a~(w_j, e)| / (||A~|| ||w_j||_G ||e||_G)
    gnorms = np.sqrt(np.real(np.einsum("ij,ij->j", P.conj(), G @ P)))
    scale = np.abs(sb.A_tilde).max() * max(err, 1e-300)
    residual = float((np.abs(AP.conj().T @ e) / gnorms).max() / scale) if err > 0 else 0.0
    best = _g_norm(G, v - P @ coarse_interpolant(coarse, fine, v))
    qo = err / best if best > 0 else (0.0 if err == 0 else math.inf)
    return Projection(c, w, residual, qo)


# ---------------------------------------------------------------------------
# operator norms


def estimate_csol(problem: ProblemSpec, space: Space, bundle: SystemBundle | None = None, tol: float = 1e-4,
                  seed: int = 0, maxiter: int = 500, weighted: bool = True) -> float:
    """Norm of ``g -> A^{-1} M g`` from ``L^2`` (mass matrix) to ``H^1_k`` (``G``).

    With ``weighted=False`` the ``L^2`` pairing and both norms drop the
    ``1/beta_jump`` weight of the inner region (identical when ``beta_jump = 1``).
    """
    bundle = bundle or assemble(problem, space, with_load=False)
    lu, M, G = bundle.lu, bundle.M, bundle.G
    if not weighted and problem.beta_jump != 1.0:
        free = space.free
        Mu, Ku = gram_matrices(space, "all", 1.0)
        M = Mu[free][:, free].tocsr()
        G = (Ku[free][:, free] / problem.k**2 + M).tocsr()
    return operator_norm_power(lambda g: lu.solve(M @ g), M, G, tol=tol,
                               apply_adjoint=lambda y: M @ lu.solve(y, trans="H"), seed=seed, maxiter=maxiter)


def estimate_eta(problem: ProblemSpec, coarse: Space, fine: Space, fine_bundle: SystemBundle | None = None,
                 tol: float = 1e-4, seed: int = 0, maxiter: int = 500) -> float:
    """Adjoint approximability of the coarse space measured in the fine space.

    ``sup_g ||(I - Pi_G) R* g||_G / ||g||_M`` with ``R* g`` the fine adjoint
    solution (``A^H u = M g``) and ``Pi_G`` the ``G``-orthogonal projection
    onto the (prolonged) coarse space.
    """
    bundle = fine_bundle or assemble(problem, fine, with_load=False)
    P = prolongation(coarse, fine)
    G, M, lu = bundle.G, bundle.M, bundle.lu
    GP = (G @ P).tocsc()
    C = SparseLu((P.conj().T @ GP).tocsc())

    def proj(w):
        return P @ C.solve(GP.conj().T @ w)

    def proj_h(w):  # Euclidean adjoint of proj
        return GP @ C.solve(P.conj().T @ w, trans="H")

    def fwd(g):
        u = lu.solve(M @ g, trans="H")
        return u - proj(u)

    def adj(y):
        z = y - proj_h(y)
        return M @ lu.solve(z)

    if P.shape[1] == P.shape[0]:
        return 0.0
    return operator_norm_power(fwd, M, G, tol=tol, apply_adjoint=adj, seed=seed, maxiter=maxiter)


def continuity_constant(bundle: SystemBundle, tol: float = 1e-6, seed: int = 0) -> float:
    """``C_cont = max |a(u, v)| / (||u||_G ||v||_G)``: the norm of ``G^{-1} A`` in the ``G`` inner product."""
    A, G = bundle.A, bundle.G
    Glu = SparseLu(G)
    return operator_norm_power(lambda x: Glu.solve(A @ x), G, G, tol=tol,
                               apply_adjoint=lambda y: A.conj().T @ Glu.solve(y), seed=seed)


def garding_constants(bundle: SystemBundle) -> tuple[float, float]:
    """``(C_G1, C_G2)`` with ``Re a(v, v) >= C_G1 ||v||_G^2 - C_G2 ||v||_M^2``.

    ``C_G1`` is the ellipticity lower bound of the coefficient matrix (the
    PML constant ``A_-``, times ``1/beta_jump`` weights already inside ``G``);
    ``C_G2`` is then the smallest admissible value, the largest eigenvalue of
    ``(C_G1 G - P, M)`` (dense, so ``n <= MAX_DENSE``).
    """
    problem = bundle.problem
    geom = bundle.space.mesh.geometry
    r_max = geom.R_tr * math.sqrt(2) if geom is not None else 1.0
    c1 = ellipticity_constant(problem.pml if problem.truncation == "pml" else None, r_max)
    if problem.a_out is not None or problem.a_in != 1.0:
        c1 = c1 * 0.5  # conservative for variable coefficients; refined by the eigenvalue below
    if bundle.n > MAX_DENSE:
        raise ValueError(f"dense eigensolve limited to n <= {MAX_DENSE}")
    P = _dense(assemble_hermitian_part(bundle.A)).astype(complex)
    G = _dense(bundle.G)
    M = _dense(bundle.M)
    top = sla.eigh(c1 * G - P, M, eigvals_only=True, subset_by_index=[bundle.n - 1, bundle.n - 1])[0]
    return float(c1), float(max(top, 0.0))


# ---------------------------------------------------------------------------
# regularity splitting and smoothing ratio


@dataclass(frozen=True, eq=False)
class Splitting:
    u: np.ndarray
    parts: list  # u_0, ..., u_m
    remainders: list  # r_0, ..., r_m with r_j = u - sum_{i<j} u_i
    table: list  # dict rows: name, norm_G, norm_H2k
    reconstruction_error: float


class _H2Surrogate:
    """Discrete ``k^{-2}|v|_{H^2}`` seminorm: the gradient is recovered by an
    ``L^2`` projection onto the space and differentiated element-wise."""

    def __init__(self, space: Space, k: float):
        from .forms import _Accumulator

        acc = _Accumulator(space.n_all, ("M", "K", "Bx", "By"))
        for sl, X, w, vals, grads in space.element_chunks(2 * space.p + 1):
            Mv = (vals[None] * w[..., None]).transpose(0, 2, 1)
            Mass = Mv @ vals[None]
            ne, nq, nb, _ = grads.shape
            G2 = grads.transpose(0, 2, 1, 3).reshape(ne, nb, nq * 2)
            GW2 = (grads * w[..., None, None]).transpose(0, 2, 1, 3).reshape(ne, nb, nq * 2)
            K = GW2 @ G2.transpose(0, 2, 1)
            Bx = Mv @ grads[..., 0]
            By = Mv @ grads[..., 1]
            acc.add(space.dofs[sl], M=Mass, K=K, Bx=Bx, By=By)
        m = acc.build()
        self.space, self.k = space, k
        self.M, self.K, self.Bx, self.By = (m[n].real.tocsc() for n in ("M", "K", "Bx", "By"))
        self.Mlu = SparseLu(self.M)

    def __call__(self, v_free) -> float:
        v = self.space.expand(v_free)
        gx = self.Mlu.solve(self.Bx @ v)
        gy = self.Mlu.solve(self.By @ v)
        s = np.real(np.vdot(gx, self.K @ gx) + np.vdot(gy, self.K @ gy))
        return float(np.sqrt(max(s, 0.0))) / self.k**2


def regularity_splitting(sb: SpectralBundle, g, m_max: int, ell: int | None = None) -> Splitting:
    """Split ``u = R* g`` into ``u_0 + ... + u_{m-1} + r_m`` using the coercive form.

    ``a~(v, u_0) = <v, g>`` and ``a~(v, u_j) = <S v, u_{j-1}>``, i.e.
    ``A~^H u_0 = M g`` and ``A~^H u_j = S u_{j-1}``.  ``ell`` (if given)
    enforces ``m_max <= floor(ell / 2)``.
    """
    if m_max < 0:
        raise ValueError("m_max must be nonnegative")
    if ell is not None and m_max > ell // 2:
        raise ValueError(f"m_max must not exceed floor(ell/2) = {ell // 2}")
    bundle = sb.bundle
    g = np.asarray(g, dtype=complex)
    M, G = bundle.M, bundle.G
    u = bundle.lu.solve(M @ g, trans="H")
    lu_t = sla.lu_factor(sb.A_tilde.conj().T)
    parts = []
    rhs = M @ g
    for j in range(m_max + 1):
        uj = sla.lu_solve(lu_t, rhs)
        parts.append(uj)
        rhs = sb.S @ uj
    remainders = [u - sum(parts[:j], np.zeros_like(u)) for j in range(m_max + 1)]
    h2 = _H2Surrogate(bundle.space, bundle.problem.k)
    table = [{"name": "u", "norm_G": _g_norm(G, u), "norm_H2k": h2(u)}]
    for j, uj in enumerate(parts):
        table.append({"name": f"u_{j}", "norm_G": _g_norm(G, uj), "norm_H2k": h2(uj)})
    for j, rj in enumerate(remainders):
        table.append({"name": f"r_{j}", "norm_G": _g_norm(G, rj), "norm_H2k": h2(rj)})
    un = max(_g_norm(G, u), 1e-300)
    recon = max((_g_norm(G, u - sum(parts[:j], np.zeros_like(u)) - remainders[j]) / un
                 for j in range(m_max + 1)), default=0.0)
    return Splitting(u, parts, remainders, table, float(recon))


def stp_ratio(sb: SpectralBundle, coarse_spaces, v) -> list[float]:
    """``||S (I - Pi~) v||_M / ||(I - Pi~) v||_G`` for each coarse space (0 when ``v`` is reproduced)."""
    G = sb.bundle.G
    out = []
    for coarse in coarse_spaces:
        proj = elliptic_projection(sb, coarse, v)
        e = np.asarray(v, dtype=complex) - proj.fine_coeffs
        den = _g_norm(G, e)
        scale = max(_g_norm(G, np.asarray(v, dtype=complex)), 1e-300)
        out.append(0.0 if den <= 1e-12 * scale else sb.s_norm(e) / den)
    return out


# ---------------------------------------------------------------------------
# report


@dataclass
class ConstantsReport:
    k: float
    h: float
    p: int
    theta: float
    c_cont: float = float("nan")
    c_g1: float = float("nan")
    c_g2: float = float("nan")
    a_minus: float = float("nan")
    c_tilde: float = float("nan")
    csol: float = float("nan")
    eta: float = float("nan")

    def as_dict(self):
        return dict(self.__dict__)


def constants_report(bundle: SystemBundle, coarse: Space | None = None, delta: float = DEFAULT_DELTA,
                     seed: int = 0) -> ConstantsReport:
    """Measure all constants for one assembled cell (dense parts need ``n <= MAX_DENSE``)."""
    problem = bundle.problem
    mesh = bundle.space.mesh
    geom = mesh.geometry
    theta = problem.pml.theta if problem.pml is not None else 0.0
    rep = ConstantsReport(problem.k, mesh.h_max, problem.p, theta)
    r_max = geom.R_tr * math.sqrt(2) if geom is not None else 1.0
    rep.a_minus = ellipticity_constant(problem.pml if problem.truncation == "pml" else None, r_max)
    rep.c_cont = continuity_constant(bundle, seed=seed)
    rep.csol = estimate_csol(problem, bundle.space, bundle, seed=seed)
    if bundle.n <= MAX_DENSE:
        rep.c_g1, rep.c_g2 = garding_constants(bundle)
        rep.c_tilde = build_smoothing(bundle, delta).c_tilde
    if coarse is not None:
        rep.eta = estimate_eta(problem, coarse, bundle.space, bundle, seed=seed)
    return rep
