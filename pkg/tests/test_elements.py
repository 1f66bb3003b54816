import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hplab.elements import (InvertedElementError, affine_nodes, curved_nodes, make_basis, make_quadrature,
                            map_points, map_triangle)


def monomial_integral(a, b):
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


@pytest.mark.parametrize("exactness", range(0, 13))
def test_quadrature_integrates_monomials_exactly(exactness):
    q = make_quadrature(exactness)
    assert q.degree >= exactness
    x, y = q.points[:, 0], q.points[:, 1]
    for a in range(exactness + 1):
        for b in range(exactness + 1 - a):
            assert np.dot(q.weights, x**a * y**b) == pytest.approx(monomial_integral(a, b), rel=1e-13, abs=1e-16)


@pytest.mark.parametrize("exactness", range(0, 13))
def test_quadrature_weights_positive_and_sum_to_half(exactness):
    q = make_quadrature(exactness)
    assert np.all(q.weights > 0)
    assert abs(q.weights.sum() - 0.5) < 1e-14
    assert np.all(q.points >= 0) and np.all(q.points.sum(axis=1) <= 1)


def test_centroid_rule():
    q = make_quadrature(1)
    assert len(q) == 1
    np.testing.assert_allclose(q.points, [[1 / 3, 1 / 3]])
    np.testing.assert_allclose(q.weights, [0.5])


def test_unsupported_degrees_rejected():
    with pytest.raises(ValueError):
        make_quadrature(13)
    for p in (0, 5):
        with pytest.raises(ValueError):
            make_basis(p)


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_nodal_property(p):
    b = make_basis(p)
    assert b.size == (p + 1) * (p + 2) // 2
    vals, _ = b.eval(b.nodes)
    np.testing.assert_allclose(vals, np.eye(b.size), atol=1e-13)


def test_p1_is_barycentric():
    vals, grads = make_basis(1).eval([[1 / 3, 1 / 3]])
    np.testing.assert_allclose(vals, [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(grads[0], [[-1, -1], [1, 0], [0, 1]])


def test_p2_edge_midpoint_node():
    b = make_basis(2)
    m = np.array([[0.5, 0.5]])  # midpoint of the edge between reference vertices 1 and 2
    j = int(np.argmin(np.linalg.norm(b.nodes - m, axis=1)))
    vals, _ = b.eval(m)
    assert vals[0, j] == pytest.approx(1.0, abs=1e-14)
    assert np.max(np.abs(np.delete(vals[0], j))) < 1e-14


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_partition_of_unity(p):
    rng = np.random.default_rng(p)
    pts = rng.random((50, 2))
    pts = np.where(pts.sum(axis=1, keepdims=True) > 1, 1 - pts, pts)
    for where in (pts, make_quadrature(2 * p + 3).points):
        vals, grads = make_basis(p).eval(where)
        assert np.max(np.abs(vals.sum(axis=1) - 1)) < 1e-13
        assert np.max(np.abs(grads.sum(axis=1))) < 1e-12


@settings(max_examples=30, deadline=None)
@given(p=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_interpolation_reproduces_polynomials(p, seed):
    rng = np.random.default_rng(seed)
    coef = rng.standard_normal((p + 1, p + 1))

    def poly(x, y):
        return sum(coef[i, j] * x**i * y**j for i in range(p + 1) for j in range(p + 1 - i))

    b = make_basis(p)
    c = poly(b.nodes[:, 0], b.nodes[:, 1])
    pts = rng.random((20, 2)) * 0.5
    vals, _ = b.eval(pts)
    np.testing.assert_allclose(vals @ c, poly(pts[:, 0], pts[:, 1]), atol=1e-12 * (1 + np.abs(coef).sum()))


@pytest.mark.parametrize("p", [1, 2, 3])
def test_identity_and_scaled_maps(p):
    b = make_basis(p)
    tri = np.array([[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]])
    x, J, det = map_triangle(affine_nodes(tri, b)[0], b, [0.2, 0.3])
    np.testing.assert_allclose(x, [0.2, 0.3], atol=1e-15)
    np.testing.assert_allclose(J, np.eye(2), atol=1e-14)
    assert det == pytest.approx(1.0)
    X, J, det = map_points(affine_nodes(2 * tri, b), b, make_quadrature(5).points)
    np.testing.assert_allclose(det, 4.0)


def test_inverted_element_detected():
    b = make_basis(1)
    tri = np.array([[[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]])  # clockwise
    with pytest.raises(InvertedElementError, match="inverted element"):
        map_points(affine_nodes(tri, b), b, make_quadrature(1).points)


@pytest.mark.parametrize("p", [2, 3, 4])
def test_curved_edge_nodes_lie_on_arc(p):
    b = make_basis(p)
    t = math.radians(30)
    verts = np.array([[[1.0, 0.0], [math.cos(t), math.sin(t)], [0.5, 0.2]]])
    nodes = curved_nodes(verts, b, np.array([0]), np.zeros((1, 2)), np.array([1.0]))
    s = np.arange(p + 1) / p  # edge lattice nodes, where the map interpolates the arc
    X, _, det = map_points(nodes, b, np.column_stack([s, np.zeros_like(s)]))
    np.testing.assert_allclose(np.linalg.norm(X[0], axis=1), 1.0, atol=1e-12)
    if p == 2:
        mid = map_points(nodes, b, [[0.5, 0.0]])[0][0, 0]
        assert abs(np.linalg.norm(mid) - 1) < 1e-12
    # between the nodes the arc is approximated to O(h^(p+1))
    t = np.linspace(0, 1, 101)
    Xt = map_points(nodes, b, np.column_stack([t, np.zeros_like(t)]))[0][0]
    assert np.max(np.abs(np.linalg.norm(Xt, axis=1) - 1)) < 0.1 * (math.radians(30) ** (p + 1))
    assert np.all(det > 0)


@pytest.mark.parametrize("p", [1, 2, 3])
def test_interpolation_error_rate_for_sine(p):
    """H1 seminorm interpolation error of sin(k x) on a square decays like h^p."""
    k = 3.0
    errs, hs = [], []
    for n in (4, 8, 16):
        h = 1.0 / n
        xs = np.linspace(0, 1, n + 1)
        Xg, Yg = np.meshgrid(xs, xs, indexing="ij")
        idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
        v = np.column_stack([Xg.ravel(), Yg.ravel()])
        a, b_, c, d = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
        tris = np.concatenate([np.stack([a, b_, c], 1), np.stack([a, c, d], 1)])
        basis = make_basis(p)
        nodes = affine_nodes(v[tris], basis)
        coef = np.sin(k * nodes[..., 0])
        q = make_quadrature(2 * p + 3)
        X, J, det = map_points(nodes, basis, q.points)
        _, rg = basis.eval(q.points)
        inv = np.linalg.inv(J)
        g = np.einsum("eqji,qbj->eqbi", inv, rg)
        gh = np.einsum("eqbi,eb->eqi", g, coef)
        gx = k * np.cos(k * X[..., 0])
        err = np.sum(q.weights * det * ((gh[..., 0] - gx) ** 2 + gh[..., 1] ** 2))
        errs.append(math.sqrt(err))
        hs.append(h)
    rate = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert abs(rate - p) < 0.1
