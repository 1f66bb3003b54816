"""Block-structured triangulations of truncated exterior domains.

Annular bands between the obstacle and the truncation boundary are meshed as
mapped polar grids (one quadrilateral cell split into two triangles, with
alternating diagonals).  The square truncation is reached from the last circle
through a blended band along straight rays.  Vertices are numbered ring by
ring (radial-major), which keeps the matrix bandwidth near the angular count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

TAG_NONE, TAG_OBSTACLE, TAG_TRUNCATION, TAG_INTERFACE = 0, 1, 2, 3
TAG_NAMES = {TAG_NONE: "none", TAG_OBSTACLE: "obstacle", TAG_TRUNCATION: "truncation", TAG_INTERFACE: "interface"}
TAG_CODES = {v: k for k, v in TAG_NAMES.items()}
REGION_OUT, REGION_IN = 0, 1

OBSTACLE_KINDS = ("disk-dirichlet", "disk-neumann", "penetrable-annulus", "none")
TRUNCATION_SHAPES = ("disk", "square")


class GeometryError(ValueError):
    """Inconsistent geometry description."""


class UnresolvedGeometryError(GeometryError):
    """Mesh size too coarse to resolve the annular bands of the geometry."""


@dataclass(frozen=True)
class GeometrySpec:
    obstacle_kind: str = "disk-dirichlet"
    a: float = 1.0
    r_in_outer: float | None = None
    R_scat: float = 1.25
    R_pml_minus: float = 1.5
    R_pml_plus: float = 3.5
    R_tr: float = 2.0
    truncation_shape: str = "disk"

    def __post_init__(self):
        if self.obstacle_kind not in OBSTACLE_KINDS:
            raise GeometryError(f"obstacle_kind must be one of {OBSTACLE_KINDS}, got {self.obstacle_kind!r}")
        if self.truncation_shape not in TRUNCATION_SHAPES:
            raise GeometryError(f"truncation_shape must be one of {TRUNCATION_SHAPES}")
        a = 0.0 if self.obstacle_kind == "none" else self.a
        if not a < self.R_scat < self.R_pml_minus < self.R_tr:
            raise GeometryError(
                "radii must satisfy a < R_scat < R_pml_minus < R_tr "
                f"(got a={a}, R_scat={self.R_scat}, R_pml_minus={self.R_pml_minus}, R_tr={self.R_tr})"
            )
        if not self.R_pml_plus > self.R_pml_minus:
            raise GeometryError("R_pml_plus must exceed R_pml_minus")
        if self.obstacle_kind != "none" and self.a <= 0:
            raise GeometryError("obstacle radius a must be positive")
        if self.obstacle_kind == "penetrable-annulus":
            if self.r_in_outer is None or not self.a < self.r_in_outer < self.R_scat:
                raise GeometryError("penetrable-annulus needs a < r_in_outer < R_scat")
        elif self.r_in_outer is not None:
            raise GeometryError("r_in_outer is only meaningful for obstacle_kind='penetrable-annulus'")
        if self.obstacle_kind == "none" and self.truncation_shape != "square":
            raise GeometryError("obstacle_kind='none' is only supported with a square truncation")

    @property
    def has_obstacle(self) -> bool:
        return self.obstacle_kind != "none"

    def band_radii(self) -> list[float]:
        """Circles the mesh is fitted to, from the obstacle outward."""
        radii = [self.a]
        if self.obstacle_kind == "penetrable-annulus":
            radii.append(self.r_in_outer)
        radii += [self.R_scat, self.R_pml_minus]
        if self.truncation_shape == "disk":
            radii.append(self.R_tr)
        return radii


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    region: np.ndarray
    edges: np.ndarray  # tagged edges (i, j), i < j
    edge_tags: np.ndarray
    arcs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))  # edges following a circle
    arc_geom: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))  # (cx, cy, r)
    geometry: GeometrySpec | None = None
    parent: np.ndarray | None = None
    coarse: "Mesh | None" = field(default=None, repr=False)
    nested: bool = False
    symmetry: int = 0  # order of the rotation group about the origin mapping the mesh to itself (0: none)
    sector: bool = False  # one period (angles 0 .. 2 pi / symmetry) of a rotationally symmetric mesh

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    @cached_property
    def signed_areas(self) -> np.ndarray:
        c = self.corners
        d1, d2 = c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        c = self.corners
        return np.stack([np.linalg.norm(c[:, (i + 1) % 3] - c[:, i], axis=1) for i in range(3)], axis=1)

    @property
    def h_max(self) -> float:
        """Largest element diameter (longest edge of a straight triangle)."""
        return float(self.edge_lengths.max())

    @property
    def shape_ratios(self) -> np.ndarray:
        """Circumradius / inradius per triangle (2 for equilateral)."""
        L = self.edge_lengths
        area = np.abs(self.signed_areas)
        semi = L.sum(axis=1) / 2
        return L.prod(axis=1) * semi / (4 * area**2)

    @property
    def rho_max(self) -> float:
        return float(self.shape_ratios.max())

    @cached_property
    def edge_table(self):
        """Unique edges ``(ne, 2)`` and per-triangle edge indices ``(nt, 3)`` for local edges (0,1), (1,2), (2,0)."""
        t = self.triangles
        all_e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        all_e.sort(axis=1)
        uniq, inv = np.unique(all_e, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        return uniq, inv.reshape(3, -1).T.copy()

    def edge_lookup(self, pairs) -> np.ndarray:
        """Index into ``edge_table[0]`` of each (i, j) pair (any order); -1 if absent."""
        uniq, _ = self.edge_table
        pairs = np.sort(np.asarray(pairs, dtype=int).reshape(-1, 2), axis=1)
        key_u = uniq[:, 0].astype(np.int64) * (self.n_vertices + 1) + uniq[:, 1]
        key_p = pairs[:, 0].astype(np.int64) * (self.n_vertices + 1) + pairs[:, 1]
        pos = np.searchsorted(key_u, key_p)
        pos = np.clip(pos, 0, len(key_u) - 1)
        return np.where(key_u[pos] == key_p, pos, -1)

    def tagged(self, tag: str) -> np.ndarray:
        return self.edges[self.edge_tags == TAG_CODES[tag]]

    def straightened(self) -> "Mesh":
        """Same triangulation with arcs forgotten (polygonal geometry)."""
        return replace(self, arcs=np.zeros((0, 2), dtype=int), arc_geom=np.zeros((0, 3)), parent=None, coarse=None)


# ---------------------------------------------------------------------------
# construction


def _polar_cells(n_rings: int, n_cols: int, periodic: bool = True):
    """Triangles of a polar grid with ``n_rings`` rings of ``n_cols`` vertices each.

    Cell ``(i, j)`` joins rings ``i, i + 1`` and columns ``j, j + 1`` (wrapping
    around when ``periodic``); its diagonal alternates with the parity of
    ``i + j``.
    """
    n_cells = n_cols if periodic else n_cols - 1
    i, j = np.meshgrid(np.arange(n_rings - 1), np.arange(n_cells), indexing="ij")
    i, j = i.ravel(), j.ravel()
    jn = (j + 1) % n_cols
    A, B = i * n_cols + j, i * n_cols + jn
    C, D = (i + 1) * n_cols + jn, (i + 1) * n_cols + j
    even = ((i + j) % 2 == 0)[:, None]
    t1 = np.where(even, np.stack([A, D, C], 1), np.stack([A, D, B], 1))
    t2 = np.where(even, np.stack([A, C, B], 1), np.stack([B, D, C], 1))
    return np.stack([t1, t2], axis=1).reshape(-1, 3)


def _ring_edges(ring: int, n_cols: int, periodic: bool = True):
    j = np.arange(n_cols if periodic else n_cols - 1)
    e = np.stack([ring * n_cols + j, ring * n_cols + (j + 1) % n_cols], axis=1)
    e.sort(axis=1)
    return e


def _orient(vertices, tris):
    c = vertices[tris]
    d1, d2 = c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]
    neg = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    tris[neg] = tris[neg][:, [0, 2, 1]]
    return tris


def _square_mesh(geom: GeometrySpec, h_target: float) -> Mesh:
    R = geom.R_tr
    s = h_target / math.sqrt(2)
    n = max(2, math.ceil(2 * R / s))
    g = np.linspace(-R, R, n + 1)
    X, Y = np.meshgrid(g, g, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    tris = []
    for i in range(n):
        for j in range(n):
            v00, v10 = i * (n + 1) + j, (i + 1) * (n + 1) + j
            v01, v11 = v00 + 1, v10 + 1
            if (i + j) % 2 == 0:
                tris += [(v00, v10, v11), (v00, v11, v01)]
            else:
                tris += [(v00, v10, v01), (v10, v11, v01)]
    tris = _orient(verts, np.array(tris, dtype=int))
    bnd = []
    for k in range(n):
        bnd += [(k * (n + 1), (k + 1) * (n + 1)), (k * (n + 1) + n, (k + 1) * (n + 1) + n), (k, k + 1), (n * (n + 1) + k, n * (n + 1) + k + 1)]
    edges = np.sort(np.array(bnd, dtype=int), axis=1)
    return Mesh(verts, tris, np.zeros(len(tris), dtype=int), edges, np.full(len(edges), TAG_TRUNCATION),
                geometry=geom, nested=True)


def build_mesh(geom: GeometrySpec, h_target: float, n_theta: int | None = None) -> Mesh:
    """Conforming, interface-fitted, tagged mesh of the truncated domain.

    Parameters
    ----------
    geom : GeometrySpec
    h_target : float
        Target element diameter; the realized ``h_max`` lies in ``[h/2, 2h]``.
    n_theta : int, optional
        Override for the number of angular divisions (must be a multiple of 8
        for square truncation).  Used to keep the inner mesh identical while
        the outer radius changes.
    """
    if not h_target > 0:
        raise GeometryError("h_target must be positive")
    if not geom.has_obstacle:
        return _square_mesh(geom, h_target)
    return _polar_mesh(geom, h_target, n_theta, sector=False)


def build_sector(geom: GeometrySpec, h_target: float, n_theta: int | None = None) -> Mesh:
    """One rotational period of the disk-truncated mesh ``build_mesh`` would produce.

    The returned mesh covers the two angular cell columns between the polar
    angles ``0`` and ``2 pi / L`` (``L = n_theta / 2``, stored in
    ``mesh.symmetry``), with exactly the same rings, cells and diagonals as
    the full mesh.  Rotating it ``L`` times reproduces the full mesh; the
    vertices on the two bounding rays are the ones identified by the
    rotation.
    """
    if not h_target > 0:
        raise GeometryError("h_target must be positive")
    if not geom.has_obstacle or geom.truncation_shape != "disk":
        raise GeometryError("sector meshes need an obstacle and disk truncation")
    if n_theta is not None and n_theta % 2:
        raise GeometryError("n_theta must be even for a sector mesh")
    return _polar_mesh(geom, h_target, n_theta, sector=True)


def _polar_mesh(geom: GeometrySpec, h_target: float, n_theta: int | None, sector: bool) -> Mesh:
    radii = geom.band_radii()
    widths = np.diff(radii)
    if geom.truncation_shape == "square":
        widths = np.append(widths, geom.R_tr - radii[-1])
    if np.any(widths < h_target / 2):
        raise UnresolvedGeometryError(
            f"geometry unresolved: h_target={h_target} exceeds twice the narrowest band width {widths.min():.4g}"
        )
    s = h_target / math.sqrt(2)
    if n_theta is None:
        if geom.truncation_shape == "disk":
            n_theta = math.ceil(2 * math.pi * geom.R_tr / s)
        else:
            n_theta = math.ceil(4 * math.pi * geom.R_tr / s)
        n_theta = 8 * max(1, math.ceil(n_theta / 8))
    elif geom.truncation_shape == "square" and n_theta % 8:
        raise GeometryError("n_theta must be a multiple of 8 for square truncation")
    # a sector holds columns 0, 1 and the (unidentified) copy of column 2
    n_col = 3 if sector else n_theta
    phi = 2 * math.pi * np.arange(n_col) / n_theta
    ray = np.column_stack([np.cos(phi), np.sin(phi)])

    ring_r = [radii[0]]
    ring_kind = [TAG_OBSTACLE]
    band_region = []
    for b in range(len(radii) - 1):
        n = max(2, math.ceil((radii[b + 1] - radii[b]) / s))
        ring_r += list(np.linspace(radii[b], radii[b + 1], n + 1)[1:])
        ring_kind += [TAG_NONE] * (n - 1) + [TAG_INTERFACE]
        inside = geom.obstacle_kind == "penetrable-annulus" and radii[b + 1] <= geom.r_in_outer
        band_region += [REGION_IN if inside else REGION_OUT] * n
    pts = [r * ray for r in ring_r]
    if geom.truncation_shape == "disk":
        ring_kind[-1] = TAG_TRUNCATION
    else:
        far = geom.R_tr / np.maximum(np.abs(ray[:, 0]), np.abs(ray[:, 1]))
        n = max(2, math.ceil((math.sqrt(2) * geom.R_tr - radii[-1]) / s))
        for t in np.linspace(0, 1, n + 1)[1:]:
            pts.append(((1 - t) * radii[-1] + t * far)[:, None] * ray)
            ring_kind.append(TAG_NONE)
            ring_r.append(np.nan)
        ring_kind[-1] = TAG_TRUNCATION
        band_region += [REGION_OUT] * n
    verts = np.concatenate(pts)
    n_rings = len(pts)
    if sector:
        tris = _polar_cells(n_rings, n_col, periodic=False)
    else:
        tris = _polar_cells(n_rings, n_theta)
    tris = _orient(verts, tris)
    region = np.repeat(np.array(band_region, dtype=int), 2 * (n_col - 1 if sector else n_theta))

    edges, tags, arcs, arc_geom = [], [], [], []
    for i, kind in enumerate(ring_kind):
        if kind == TAG_NONE:
            continue
        e = _ring_edges(i, n_col, periodic=not sector)
        edges.append(e)
        tags.append(np.full(len(e), kind))
        if not np.isnan(ring_r[i]):
            arcs.append(e)
            arc_geom.append(np.tile([0.0, 0.0, ring_r[i]], (len(e), 1)))
    symmetric = geom.truncation_shape == "disk" and n_theta % 2 == 0
    return Mesh(
        verts, tris, region,
        np.concatenate(edges), np.concatenate(tags),
        np.concatenate(arcs) if arcs else np.zeros((0, 2), dtype=int),
        np.concatenate(arc_geom) if arc_geom else np.zeros((0, 3)),
        geometry=geom,
        symmetry=n_theta // 2 if symmetric else 0,
        sector=sector,
    )


def refine_uniform(mesh: Mesh, project: bool = True) -> Mesh:
    """Split every triangle into four through its edge midpoints.

    Midpoints of arc edges are pushed onto their circle when ``project`` is
    true.  With ``project=False`` the arcs are dropped and the refined mesh is
    an exact subdivision of the (polygonal) parent, so finite-element spaces
    on the two meshes are nested.
    """
    uniq, tri_e = mesh.edge_table
    nv = mesh.n_vertices
    mid = 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])
    keep_arcs = project and len(mesh.arcs) > 0
    if keep_arcs:
        ai = mesh.edge_lookup(mesh.arcs)
        c, r = mesh.arc_geom[:, :2], mesh.arc_geom[:, 2]
        d = mid[ai] - c
        mid[ai] = c + r[:, None] * d / np.linalg.norm(d, axis=1)[:, None]
    verts = np.concatenate([mesh.vertices, mid])
    t = mesh.triangles
    m01, m12, m20 = nv + tri_e[:, 0], nv + tri_e[:, 1], nv + tri_e[:, 2]
    children = np.stack([
        np.stack([t[:, 0], m01, m20], 1),
        np.stack([m01, t[:, 1], m12], 1),
        np.stack([m20, m12, t[:, 2]], 1),
        np.stack([m01, m12, m20], 1),
    ], axis=1)  # (nt, 4, 3)
    tris = children.reshape(-1, 3)
    region = np.repeat(mesh.region, 4)
    parent = np.repeat(np.arange(mesh.n_triangles), 4)

    def split(pairs):
        if len(pairs) == 0:
            return np.zeros((0, 2), dtype=int), np.zeros(0, dtype=int)
        m = nv + mesh.edge_lookup(pairs)
        halves = np.concatenate([np.stack([pairs[:, 0], m], 1), np.stack([m, pairs[:, 1]], 1)])
        return np.sort(halves, axis=1), np.concatenate([np.arange(len(pairs))] * 2)

    edges, src = split(mesh.edges)
    if keep_arcs:
        arcs, asrc = split(mesh.arcs)
        arc_geom = mesh.arc_geom[asrc]
    else:
        arcs, arc_geom = np.zeros((0, 2), dtype=int), np.zeros((0, 3))
    nested = not keep_arcs and (len(mesh.arcs) == 0 or not project)
    return Mesh(verts, tris, region, edges, mesh.edge_tags[src], arcs, arc_geom,
                geometry=mesh.geometry, parent=parent, coarse=mesh, nested=nested, symmetry=mesh.symmetry,
                sector=mesh.sector)


def hierarchy(mesh: Mesh, levels: int) -> list[Mesh]:
    """Nested sequence ``[coarse, ..., finest]`` of straight-sided uniform refinements."""
    meshes = [mesh.straightened()]
    for _ in range(levels):
        meshes.append(refine_uniform(meshes[-1], project=False))
    return meshes


# ---------------------------------------------------------------------------
# validation


def check_mesh(mesh: Mesh, rho_limit: float | None = None) -> None:
    """Raise ``GeometryError`` if orientation, conformity or tagging is broken."""
    if np.any(mesh.signed_areas <= 0):
        raise GeometryError(f"{int(np.sum(mesh.signed_areas <= 0))} triangles with non-positive orientation")
    uniq, tri_e = mesh.edge_table
    counts = np.bincount(tri_e.ravel(), minlength=len(uniq))
    if np.any(counts > 2):
        raise GeometryError("non-manifold edge shared by more than two triangles")
    if len(mesh.edges):
        idx = mesh.edge_lookup(mesh.edges)
        if np.any(idx < 0):
            raise GeometryError("tagged edge not present in the triangulation")
        bnd_tag = np.isin(mesh.edge_tags, [TAG_OBSTACLE, TAG_TRUNCATION])
        if np.any(counts[idx[bnd_tag]] != 1):
            raise GeometryError("boundary-tagged edge is interior")
        if np.any(counts[idx[mesh.edge_tags == TAG_INTERFACE]] != 2):
            raise GeometryError("interface-tagged edge lies on the boundary")
    if rho_limit is not None and mesh.rho_max > rho_limit:
        raise GeometryError(f"shape regularity {mesh.rho_max:.3g} exceeds {rho_limit}")


def boundary_edges(mesh: Mesh) -> np.ndarray:
    uniq, tri_e = mesh.edge_table
    counts = np.bincount(tri_e.ravel(), minlength=len(uniq))
    return uniq[counts == 1]


# ---------------------------------------------------------------------------
# I/O

HEADER = "helmholtz-mesh v1"


def write_mesh(mesh: Mesh, path) -> None:
    lines = [HEADER, f"vertices {mesh.n_vertices}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines.append(f"triangles {mesh.n_triangles}")
    lines += [f"{i} {j} {k} {r}" for (i, j, k), r in zip(mesh.triangles.tolist(), mesh.region.tolist())]
    lines.append(f"edges {len(mesh.edges)}")
    lines += [f"{i} {j} {TAG_NAMES[int(t)]}" for (i, j), t in zip(mesh.edges.tolist(), mesh.edge_tags.tolist())]
    lines.append(f"arcs {len(mesh.arcs)}")
    lines += [f"{i} {j} {cx!r} {cy!r} {r!r}" for (i, j), (cx, cy, r) in zip(mesh.arcs.tolist(), mesh.arc_geom.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_mesh(path) -> Mesh:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise ValueError(f"{path}: missing '{HEADER}' header")
    pos = 1

    def section(name):
        nonlocal pos
        key, count = lines[pos].split()
        if key != name:
            raise ValueError(f"{path}:{pos + 1}: expected section '{name}', found '{key}'")
        body = [ln.split() for ln in lines[pos + 1: pos + 1 + int(count)]]
        pos += 1 + int(count)
        return body

    verts = np.array([[float(v) for v in row] for row in section("vertices")]).reshape(-1, 2)
    tri_rows = section("triangles")
    tris = np.array([[int(v) for v in row[:3]] for row in tri_rows], dtype=int).reshape(-1, 3)
    region = np.array([int(row[3]) for row in tri_rows], dtype=int)
    edge_rows = section("edges")
    edges = np.array([[int(r[0]), int(r[1])] for r in edge_rows], dtype=int).reshape(-1, 2)
    tags = np.array([TAG_CODES[r[2]] for r in edge_rows], dtype=int)
    arc_rows = section("arcs")
    arcs = np.array([[int(r[0]), int(r[1])] for r in arc_rows], dtype=int).reshape(-1, 2)
    arc_geom = np.array([[float(v) for v in r[2:5]] for r in arc_rows]).reshape(-1, 3)
    return Mesh(verts, tris, region, edges, tags, arcs, arc_geom)  # symmetry is not stored


def write_vtk(mesh: Mesh, path, point_data: dict | None = None) -> None:
    """Legacy-ASCII VTK unstructured grid of the straight triangulation."""
    out = ["# vtk DataFile Version 3.0", "helmholtz mesh", "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {mesh.n_vertices} double"]
    out += [f"{x!r} {y!r} 0.0" for x, y in mesh.vertices.tolist()]
    out.append(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}")
    out += [f"3 {i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    out.append(f"CELL_TYPES {mesh.n_triangles}")
    out += ["5"] * mesh.n_triangles
    out += [f"CELL_DATA {mesh.n_triangles}", "SCALARS region int 1", "LOOKUP_TABLE default"]
    out += [str(r) for r in mesh.region.tolist()]
    if point_data:
        out.append(f"POINT_DATA {mesh.n_vertices}")
        for name, values in point_data.items():
            values = np.asarray(values)
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [repr(float(v)) for v in values.tolist()]
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")
