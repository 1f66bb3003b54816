"""Reference-triangle Lagrange bases, quadrature rules and (iso)parametric maps.

The reference triangle has vertices (0, 0), (1, 0), (0, 1).  Barycentric
coordinates are ordered ``(l0, l1, l2) = (1 - x - y, x, y)`` so that vertex ``i``
of the reference triangle is where ``li = 1``.

Local node ordering of a degree-p basis:

* the three vertices,
* ``p - 1`` nodes on each local edge (0, 1), (1, 2), (2, 0), listed from the
  first to the second vertex of the edge,
* the ``(p - 1)(p - 2) / 2`` interior nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

MAX_DEGREE = 4
MAX_EXACTNESS = 12

LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))


class InvertedElementError(ValueError):
    """Raised when a geometric map has a non-positive Jacobian determinant."""


def lattice_indices(p: int) -> np.ndarray:
    """Barycentric multi-indices ``(i0, i1, i2)`` with ``i0 + i1 + i2 = p``, in local node order."""
    idx = [(p, 0, 0), (0, p, 0), (0, 0, p)]
    for a, b in LOCAL_EDGES:
        for i in range(1, p):
            m = [0, 0, 0]
            m[a] = p - i
            m[b] = i
            idx.append(tuple(m))
    for i1 in range(1, p):
        for i2 in range(1, p - i1):
            idx.append((p - i1 - i2, i1, i2))
    return np.array(idx, dtype=int)


def _silvester(i: int, p: int, lam: np.ndarray):
    """Silvester factor prod_{m<i} (p*lam - m)/(m+1) and its derivative in lam."""
    val = np.ones_like(lam)
    der = np.zeros_like(lam)
    for m in range(i):
        fac = (p * lam - m) / (m + 1)
        der = der * fac + val * p / (m + 1)
        val = val * fac
    return val, der


@dataclass(frozen=True)
class ReferenceBasis:
    """Degree-p Lagrange basis on the equispaced lattice of the reference triangle."""

    p: int
    multi: np.ndarray = field(repr=False)
    nodes: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.multi)

    def eval(self, points):
        """Shape values ``(nq, nb)`` and reference gradients ``(nq, nb, 2)`` at ``points``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        x, y = pts[:, 0], pts[:, 1]
        lam = (1.0 - x - y, x, y)
        p = self.p
        # R[c][i] = (value, derivative) of the Silvester factor of order i in lam[c]
        R = [[_silvester(i, p, lam[c]) for i in range(p + 1)] for c in range(3)]
        nq, nb = len(pts), self.size
        vals = np.empty((nq, nb))
        grads = np.empty((nq, nb, 2))
        # d lam / d(x, y)
        dlam = ((-1.0, -1.0), (1.0, 0.0), (0.0, 1.0))
        for j, (i0, i1, i2) in enumerate(self.multi):
            v0, d0 = R[0][i0]
            v1, d1 = R[1][i1]
            v2, d2 = R[2][i2]
            vals[:, j] = v0 * v1 * v2
            g0, g1, g2 = d0 * v1 * v2, v0 * d1 * v2, v0 * v1 * d2
            for c in range(2):
                grads[:, j, c] = g0 * dlam[0][c] + g1 * dlam[1][c] + g2 * dlam[2][c]
        return vals, grads


def make_basis(p: int) -> ReferenceBasis:
    if not isinstance(p, (int, np.integer)) or not 1 <= p <= MAX_DEGREE:
        raise ValueError(f"unsupported polynomial degree {p!r}; need 1 <= p <= {MAX_DEGREE}")
    multi = lattice_indices(int(p))
    nodes = multi[:, 1:].astype(float) / p
    return ReferenceBasis(int(p), multi, nodes)


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __len__(self):
        return len(self.weights)


def _symmetric_rule(degree: int):
    if degree <= 1:
        return np.array([[1 / 3, 1 / 3]]), np.array([0.5])
    if degree == 2:
        pts = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        return pts, np.full(3, 1 / 6)
    # 7-point rule of Radon, degree 5
    s = math.sqrt(15.0)
    a1, a2 = (6 - s) / 21, (6 + s) / 21
    w1, w2 = (155 - s) / 2400, (155 + s) / 2400
    pts = np.array([
        [1 / 3, 1 / 3],
        [a1, a1], [1 - 2 * a1, a1], [a1, 1 - 2 * a1],
        [a2, a2], [1 - 2 * a2, a2], [a2, 1 - 2 * a2],
    ])
    return pts, np.array([9 / 80, w1, w1, w1, w2, w2, w2])


def _collapsed_rule(degree: int):
    n = (degree + 2) // 2
    s, ws = roots_legendre(n)
    s, ws = (s + 1) / 2, ws / 2
    u, wu = roots_jacobi(n, 1.0, 0.0)
    t, wt = (u + 1) / 2, wu / 4
    S, T = np.meshgrid(s, t, indexing="ij")
    W = np.outer(ws, wt)
    pts = np.column_stack([(S * (1 - T)).ravel(), T.ravel()])
    return pts, W.ravel()


def make_quadrature(exactness: int) -> QuadratureRule:
    """Positive-weight rule on the reference triangle exact up to total degree ``exactness``.

    Degrees 1, 2 and 3-5 use the classical fully symmetric rules (centroid,
    three-point, seven-point Radon); higher degrees use a collapsed
    Gauss-Legendre x Gauss-Jacobi product rule.
    """
    if not 0 <= exactness <= MAX_EXACTNESS:
        raise ValueError(f"unsupported quadrature exactness {exactness}; need 0..{MAX_EXACTNESS}")
    if exactness <= 5:
        pts, w = _symmetric_rule(exactness)
        deg = {0: 1, 1: 1, 2: 2}.get(exactness, 5)
    else:
        pts, w = _collapsed_rule(exactness)
        deg = 2 * ((exactness + 2) // 2) - 1
    return QuadratureRule(pts, w, deg)


def gauss_line(n: int):
    """Gauss-Legendre points and weights on [0, 1]."""
    t, w = roots_legendre(n)
    return (t + 1) / 2, w / 2


# ---------------------------------------------------------------------------
# geometric maps


def affine_nodes(vertices: np.ndarray, basis: ReferenceBasis) -> np.ndarray:
    """Lattice nodes ``(ne, nb, 2)`` of straight triangles with corner array ``(ne, 3, 2)``."""
    lam = basis.multi / basis.p
    return np.einsum("bi,eic->ebc", lam, vertices)


def arc_point(center, radius, x_start, x_end, s):
    """Points at fraction ``s`` along the short circular arc from ``x_start`` to ``x_end``."""
    a0 = np.arctan2(x_start[..., 1] - center[..., 1], x_start[..., 0] - center[..., 0])
    a1 = np.arctan2(x_end[..., 1] - center[..., 1], x_end[..., 0] - center[..., 0])
    da = np.mod(a1 - a0 + np.pi, 2 * np.pi) - np.pi
    ang = a0 + s * da
    return np.stack([center[..., 0] + radius * np.cos(ang), center[..., 1] + radius * np.sin(ang)], axis=-1)


def curved_nodes(vertices, basis, edge_local, centers, radii):
    """Isoparametric nodes for triangles owning one circular edge.

    ``edge_local[e]`` is the local edge index (0, 1, 2) that follows the arc
    with ``centers[e]``, ``radii[e]``.  The exact blended map
    ``x(l) = affine(l) + (la + lb) * (arc(s) - chord(s))``, ``s = lb / (la + lb)``
    is sampled at the lattice nodes, so edge nodes land on the arc and the
    interior nodes move smoothly with it.
    """
    lam = basis.multi / basis.p
    nodes = affine_nodes(vertices, basis)
    for loc, (ia, ib) in enumerate(LOCAL_EDGES):
        sel = np.nonzero(edge_local == loc)[0]
        if len(sel) == 0:
            continue
        la, lb = lam[:, ia], lam[:, ib]
        tot = la + lb
        mask = tot > 1e-14
        s = np.where(mask, lb / np.where(mask, tot, 1.0), 0.0)
        va = vertices[sel, ia][:, None, :]
        vb = vertices[sel, ib][:, None, :]
        c = centers[sel][:, None, :]
        r = radii[sel][:, None]
        arc = arc_point(c, r, va, vb, s[None, :])
        chord = (1 - s)[None, :, None] * va + s[None, :, None] * vb
        nodes[sel] += (tot[None, :, None] * mask[None, :, None]) * (arc - chord)
    return nodes


def map_points(geo_nodes: np.ndarray, basis: ReferenceBasis, ref_points, check=True):
    """Map reference points through per-element polynomial maps.

    Returns physical points ``(ne, nq, 2)``, Jacobians ``(ne, nq, 2, 2)`` with
    ``J[..., a, b] = d x_a / d xi_b`` and determinants ``(ne, nq)``.
    """
    vals, grads = basis.eval(ref_points)
    X = np.einsum("qb,ebc->eqc", vals, geo_nodes)
    J = np.einsum("qbj,ebi->eqij", grads, geo_nodes)
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    if check and np.any(det <= 0):
        bad = int(np.argmin(det.min(axis=1)))
        raise InvertedElementError(f"inverted element {bad}: det J = {det[bad].min():.3e}")
    return X, J, det


def map_triangle(nodes, basis: ReferenceBasis, point):
    """Map one reference point through one element; returns (x, J, detJ)."""
    X, J, det = map_points(np.asarray(nodes, dtype=float)[None], basis, np.atleast_2d(point))
    return X[0, 0], J[0, 0], float(det[0, 0])


def physical_gradients(J, det, ref_grads):
    """Physical basis gradients ``(ne, nq, nb, 2)`` from reference gradients ``(nq, nb, 2)``."""
    inv = np.empty_like(J)
    inv[..., 0, 0] = J[..., 1, 1] / det
    inv[..., 1, 1] = J[..., 0, 0] / det
    inv[..., 0, 1] = -J[..., 0, 1] / det
    inv[..., 1, 0] = -J[..., 1, 0] / det
    # grad_x phi = J^{-T} grad_xi phi
    return np.einsum("eqji,qbj->eqbi", inv, ref_grads)
