"""Complex linear algebra: banded LU, sparse LU, Hermitian eigenproblems, operator norms.

The banded path wraps LAPACK ``?gbtrf``/``?gbtrs`` (partial pivoting) and adds
one step of iterative refinement.  Large finite-element systems go through
``scipy.sparse.linalg.splu`` by default; both expose the same ``solve``
interface including conjugate-transpose solves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import lapack


class SingularMatrixError(ArithmeticError):
    """Exactly zero pivot encountered during factorization."""

    def __init__(self, pivot: int):
        super().__init__(f"matrix is singular: zero pivot at index {pivot}")
        self.pivot = pivot


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Gram matrix of a generalized eigenproblem is not positive definite."""


class ConvergenceError(RuntimeError):
    """Iteration failed to reach its tolerance."""

    def __init__(self, message: str, gap: float = float("nan")):
        super().__init__(message)
        self.gap = gap


# ---------------------------------------------------------------------------
# banded storage


@dataclass(frozen=True, eq=False)
class BandedMatrix:
    """Square matrix in LAPACK band storage: ``ab[ku + i - j, j] = A[i, j]``."""

    n: int
    kl: int
    ku: int
    ab: np.ndarray

    @classmethod
    def from_triplets(cls, n, rows, cols, vals, kl=None, ku=None):
        rows = np.asarray(rows, dtype=int)
        cols = np.asarray(cols, dtype=int)
        vals = np.asarray(vals)
        d = rows - cols
        obs_kl = int(max(d.max(initial=0), 0))
        obs_ku = int(max((-d).max(initial=0), 0))
        kl = obs_kl if kl is None else kl
        ku = obs_ku if ku is None else ku
        if kl < obs_kl or ku < obs_ku:
            raise ValueError("entries fall outside the requested bandwidth")
        dtype = np.result_type(vals.dtype, np.float64)
        ab = np.zeros((kl + ku + 1, n), dtype=dtype)
        np.add.at(ab, (ku + rows - cols, cols), vals)
        return cls(n, kl, ku, ab)

    @classmethod
    def from_sparse(cls, A):
        A = sp.coo_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError("banded matrices must be square")
        return cls.from_triplets(A.shape[0], A.row, A.col, A.data)

    @classmethod
    def from_dense(cls, A):
        A = np.asarray(A)
        i, j = np.nonzero(A)
        return cls.from_triplets(A.shape[0], i, j, A[i, j])

    def to_triplets(self):
        band, cols = np.nonzero(self.ab)
        rows = band - self.ku + cols
        return rows, cols, self.ab[band, cols]

    def to_sparse(self):
        r, c, v = self.to_triplets()
        return sp.csr_matrix((v, (r, c)), shape=(self.n, self.n))

    def to_dense(self):
        return self.to_sparse().toarray()

    def matvec(self, x):
        x = np.asarray(x)
        y = np.zeros(self.n, dtype=np.result_type(self.ab.dtype, x.dtype))
        for b in range(self.kl + self.ku + 1):
            off = b - self.ku  # i - j
            if off >= 0:
                y[off:] += self.ab[b, : self.n - off] * x[: self.n - off]
            else:
                y[: self.n + off] += self.ab[b, -off:] * x[-off:]
        return y


@dataclass(frozen=True, eq=False)
class LuFactorization:
    """Partial-pivoted band LU; ``growth`` is max|U| / max|A|."""

    matrix: BandedMatrix
    lu: np.ndarray
    piv: np.ndarray
    growth: float

    def _raw(self, b, trans):
        getrs = lapack.get_lapack_funcs("gbtrs", (self.lu,))
        x, info = getrs(self.lu, self.matrix.kl, self.matrix.ku, b, self.piv, trans=trans)
        if info != 0:
            raise RuntimeError(f"gbtrs failed with info={info}")
        return x

    def solve(self, b, trans: str = "N", refine: int = 1):
        """Solve ``A x = b`` (``trans='N'``) or ``A^H x = b`` (``trans='H'``)."""
        code = {"N": 0, "T": 1, "H": 2}[trans]
        b = np.asarray(b)
        if self.lu.dtype.kind != "c" and b.dtype.kind == "c":
            return self.solve(b.real, trans, refine) + 1j * self.solve(b.imag, trans, refine)
        dtype = np.result_type(self.lu.dtype, b.dtype)
        b = b.astype(dtype, copy=False)
        x = self._raw(b, code)
        if refine:
            A = self.matrix.to_sparse()
            op = {0: A, 1: A.T, 2: A.conj().T}[code]
            for _ in range(refine):
                x = x + self._raw(b - op @ x, code)
        return x


def factor_banded(A: BandedMatrix) -> LuFactorization:
    dtype = np.result_type(A.ab.dtype, np.float64)
    work = np.zeros((2 * A.kl + A.ku + 1, A.n), dtype=dtype)
    work[A.kl:] = A.ab
    gbtrf = lapack.get_lapack_funcs("gbtrf", (work,))
    lu, piv, info = gbtrf(work, A.kl, A.ku)
    if info > 0:
        raise SingularMatrixError(int(info) - 1)
    if info < 0:
        raise ValueError(f"gbtrf: illegal argument {-info}")
    amax = np.abs(A.ab).max(initial=0.0)
    growth = float(np.abs(lu[: A.kl + A.ku + 1]).max(initial=0.0) / amax) if amax > 0 else 1.0
    return LuFactorization(A, lu, piv, growth)


def factor_solve(A, b):
    """Solve ``A x = b`` with a banded LU and one refinement step."""
    if not isinstance(A, BandedMatrix):
        A = BandedMatrix.from_sparse(A) if sp.issparse(A) else BandedMatrix.from_dense(A)
    return factor_banded(A).solve(b)


# ---------------------------------------------------------------------------
# sparse factorization used for the finite-element systems


class SparseLu:
    """Sparse LU (SuperLU, COLAMD ordering) with ``solve(b, trans)``."""

    def __init__(self, A):
        A = sp.csc_matrix(A)
        if A.dtype.kind != "c":
            A = A.astype(np.float64)
        self.matrix = A
        try:
            self._lu = spla.splu(A, permc_spec="COLAMD")
        except RuntimeError as exc:
            if "singular" in str(exc).lower():
                raise SingularMatrixError(-1) from exc
            raise

    @property
    def shape(self):
        return self.matrix.shape

    def solve(self, b, trans: str = "N"):
        b = np.asarray(b)
        if self.matrix.dtype.kind != "c" and b.dtype.kind == "c":
            return self.solve(b.real, trans) + 1j * self.solve(b.imag, trans)
        return self._lu.solve(np.ascontiguousarray(b), trans=trans)


def factorize(A, method: str = "sparse"):
    """Factor a square matrix; ``method`` is ``'sparse'`` (SuperLU) or ``'banded'``."""
    if method == "sparse":
        return SparseLu(A)
    if method == "banded":
        A = sp.csr_matrix(A)
        perm = sp.csgraph.reverse_cuthill_mckee(A, symmetric_mode=True)
        return _PermutedBanded(A, perm)
    raise ValueError(f"unknown factorization method {method!r}")


class _PermutedBanded:
    def __init__(self, A, perm):
        self.perm = perm
        self.inv = np.argsort(perm)
        self.factor = factor_banded(BandedMatrix.from_sparse(A[perm][:, perm]))

    def solve(self, b, trans: str = "N"):
        b = np.asarray(b)
        x = self.factor.solve(b[self.perm], trans=trans)
        return x[self.inv]


# ---------------------------------------------------------------------------
# eigenproblems and operator norms


def hermitian_generalized_eig(P, M, subset_by_index=None):
    """Eigenpairs of ``P phi = lam M phi`` with ``M``-orthonormal eigenvectors.

    Returns ascending eigenvalues and the matrix of eigenvectors.
    """
    P = P.toarray() if sp.issparse(P) else np.asarray(P)
    M = M.toarray() if sp.issparse(M) else np.asarray(M)
    try:
        lam, phi = sla.eigh(P, M, subset_by_index=subset_by_index, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"M is not positive definite: {exc}") from exc
    return lam, phi


class _GramSolver:
    def __init__(self, G):
        self.G = G
        if sp.issparse(G):
            self._lu = SparseLu(G)
            self.solve = self._lu.solve
        else:
            cho = sla.cho_factor(np.asarray(G))
            self.solve = lambda b: sla.cho_solve(cho, b)


def _as_operator(op):
    if callable(op) and not hasattr(op, "shape"):
        return op, None
    if isinstance(op, spla.LinearOperator):
        return op.matvec, op.rmatvec
    A = op if sp.issparse(op) else np.asarray(op)
    AH = A.conj().T
    return (lambda x: A @ x), (lambda y: AH @ y)


def operator_norm_power(apply, gram_in, gram_out, tol: float = 1e-6, apply_adjoint=None,
                        seed: int = 0, maxiter: int = 500, x0=None, return_vector=False):
    """Largest singular value of ``T`` from ``(C^n, gram_in)`` to ``(C^m, gram_out)``.

    Power iteration on ``N = gram_in^{-1} T^H gram_out T``, which is
    self-adjoint and nonnegative in the ``gram_in`` inner product; the
    estimate is the square root of its Rayleigh quotient.  ``T^H`` is the
    Euclidean adjoint: pass ``apply_adjoint`` if ``apply`` is a plain callable.

    Stops when successive estimates differ by less than ``tol`` relative.
    """
    fwd, adj = _as_operator(apply)
    if apply_adjoint is not None:
        adj = apply_adjoint
    if adj is None:
        raise ValueError("apply_adjoint is required when apply is a plain callable")
    Gin = _GramSolver(gram_in)
    n = gram_in.shape[0]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n) if x0 is None else np.asarray(x0, dtype=complex)
    sigma_old = None
    gap = float("inf")
    for it in range(maxiter):
        nx = np.sqrt(np.real(np.vdot(x, gram_in @ x)))
        if nx == 0:
            return (0.0, x) if return_vector else 0.0
        x = x / nx
        y = fwd(x)
        gy = gram_out @ y
        sigma2 = np.real(np.vdot(y, gy))
        sigma = float(np.sqrt(max(sigma2, 0.0)))
        if sigma == 0.0:
            return (0.0, x) if return_vector else 0.0
        if sigma_old is not None:
            gap = abs(sigma - sigma_old) / sigma
            if gap < tol:
                return (sigma, x) if return_vector else sigma
        sigma_old = sigma
        x = Gin.solve(adj(gy))
    raise ConvergenceError(f"power iteration did not converge in {maxiter} iterations (last gap {gap:.3e})", gap)
