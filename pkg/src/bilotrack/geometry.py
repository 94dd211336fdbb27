"""2D triangular meshes, P1 basis queries, quadrature, and point functionals.

Meshes are conforming triangulations of convex polygons with piecewise-linear
(P1) elements. Point evaluation and Dirac-type load vectors are classical for
P1 because the discrete functions are continuous.
"""

from dataclasses import dataclass

import numpy as np

from .errors import PointOutsideDomainError

__all__ = [
    "Mesh",
    "QuadratureRule",
    "BarycentricLocation",
    "build_structured_mesh",
    "locate_point",
    "dirac_load_vector",
    "quadrature_rule",
    "boundary_distance",
    "write_vtk",
    "read_vtk",
    "write_mesh_text",
    "read_mesh_text",
]


@dataclass(frozen=True)
class BarycentricLocation:
    """A point expressed in barycentric coordinates of one triangle."""

    triangle_index: int
    lam: np.ndarray  # (3,), entries in [0, 1], summing to 1


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature on the reference triangle, points in barycentric form.

    Weights are in reference-measure convention: they sum to 1/2, so on a
    physical triangle T the rule reads ``int_T f = 2*|T| * sum_q w_q f(x_q)``.
    """

    degree: int
    points: np.ndarray  # (nq, 3)
    weights: np.ndarray  # (nq,)


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


class Mesh:
    """Immutable conforming triangulation with boundary flags.

    Parameters
    ----------
    vertices : (nv, 2) array
        Vertex coordinates.
    triangles : (nt, 3) int array
        Vertex indices, counterclockwise per triangle.
    boundary_flags : (nv,) bool array
        True exactly for vertices on the domain boundary.

    The constructor validates orientation (strictly positive signed areas),
    combinatorial conformity (each undirected edge shared by at most two
    triangles, each directed edge used once), agreement of the flags with the
    edge incidence, and absence of duplicate vertices. All derived data
    (areas, hat-function gradients, boundary edges) is precomputed; instances
    are safe to share across threads.
    """

    def __init__(self, vertices, triangles, boundary_flags):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        boundary_flags = np.ascontiguousarray(boundary_flags, dtype=bool)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise ValueError("vertices must be an (nv, 2) array")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise ValueError("triangles must be an (nt, 3) array")
        if boundary_flags.shape != (len(vertices),):
            raise ValueError("boundary_flags must have one entry per vertex")
        if not np.all(np.isfinite(vertices)):
            raise ValueError("vertex coordinates must be finite")
        if triangles.min(initial=0) < 0 or triangles.max(initial=-1) >= len(vertices):
            raise ValueError("triangle vertex index out of range")

        self.vertices = vertices
        self.triangles = triangles
        self.boundary_flags = boundary_flags
        self.num_vertices = len(vertices)
        self.num_triangles = len(triangles)

        v0 = vertices[triangles[:, 0]]
        e1 = vertices[triangles[:, 1]] - v0
        e2 = vertices[triangles[:, 2]] - v0
        det = _cross2(e1, e2)  # twice the signed area
        if np.any(det <= 0.0):
            bad = int(np.argmax(det <= 0.0))
            raise ValueError(
                "triangle %d has nonpositive signed area (not CCW?)" % bad
            )
        self.areas = 0.5 * det
        self.total_area = float(self.areas.sum())

        # gradients of the three hat functions on each triangle
        grads = np.empty((self.num_triangles, 3, 2))
        inv_det = 1.0 / det
        grads[:, 1, 0] = e2[:, 1] * inv_det
        grads[:, 1, 1] = -e2[:, 0] * inv_det
        grads[:, 2, 0] = -e1[:, 1] * inv_det
        grads[:, 2, 1] = e1[:, 0] * inv_det
        grads[:, 0] = -grads[:, 1] - grads[:, 2]
        self.grads = grads

        edge_vecs = np.stack(
            [e1, e2 - e1, -e2], axis=1
        )  # edges (0,1), (1,2), (2,0)
        edge_lens = np.hypot(edge_vecs[..., 0], edge_vecs[..., 1])
        self.longest_edge = edge_lens.max(axis=1)
        self.h_max = float(self.longest_edge.max())
        self.centroids = vertices[triangles].mean(axis=1)

        self._validate_conformity()

    def _validate_conformity(self):
        tris = self.triangles
        # duplicate vertices break the combinatorial conformity argument
        order = np.lexsort((self.vertices[:, 1], self.vertices[:, 0]))
        sv = self.vertices[order]
        if self.num_vertices > 1 and np.any(np.all(sv[1:] == sv[:-1], axis=1)):
            raise ValueError("mesh has duplicate vertex coordinates")

        directed = np.concatenate(
            [tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]
        )
        keys = directed[:, 0] * self.num_vertices + directed[:, 1]
        if len(np.unique(keys)) != len(keys):
            raise ValueError("a directed edge is used twice (non-conforming)")

        lo = directed.min(axis=1)
        hi = directed.max(axis=1)
        ukeys, counts = np.unique(lo * self.num_vertices + hi, return_counts=True)
        if counts.max(initial=0) > 2:
            raise ValueError("an edge is shared by more than two triangles")
        bkeys = ukeys[counts == 1]
        self.boundary_edges = np.column_stack(
            [bkeys // self.num_vertices, bkeys % self.num_vertices]
        )
        on_boundary = np.zeros(self.num_vertices, dtype=bool)
        on_boundary[self.boundary_edges.ravel()] = True
        if not np.array_equal(on_boundary, self.boundary_flags):
            raise ValueError(
                "boundary flags disagree with edge incidence "
                "(flagged interior vertex or unflagged boundary vertex)"
            )

    @property
    def interior_mask(self):
        return ~self.boundary_flags

    def barycentric_all(self, p):
        """Barycentric coordinates of ``p`` with respect to every triangle."""
        p = np.asarray(p, dtype=np.float64)
        d = p[None, :] - self.vertices[self.triangles[:, 0]]
        lam = np.empty((self.num_triangles, 3))
        lam[:, 1] = np.einsum("ij,ij->i", d, self.grads[:, 1])
        lam[:, 2] = np.einsum("ij,ij->i", d, self.grads[:, 2])
        lam[:, 0] = 1.0 - lam[:, 1] - lam[:, 2]
        return lam


def build_structured_mesh(n, domain=(0.0, 0.0, 1.0, 1.0)):
    """Criss-cross triangulation of an axis-aligned rectangle.

    Each of the n-by-n grid cells is split along its SW-NE diagonal, giving
    2*n^2 triangles on (n+1)^2 vertices. ``domain`` is (x0, y0, x1, y1).
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError("n must be a positive integer, got %r" % (n,))
    x0, y0, x1, y1 = map(float, domain)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("degenerate rectangle %r" % (domain,))

    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):  # column i, row j
        return j * (n + 1) + i

    tris = np.empty((2 * n * n, 3), dtype=np.int64)
    k = 0
    for j in range(n):
        for i in range(n):
            sw, se = vid(i, j), vid(i + 1, j)
            nw, ne = vid(i, j + 1), vid(i + 1, j + 1)
            tris[k] = (sw, se, ne)  # below the SW-NE diagonal
            tris[k + 1] = (sw, ne, nw)  # above it
            k += 2

    I, J = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    flags = (I == 0) | (I == n) | (J == 0) | (J == n)
    return Mesh(vertices, tris, flags.ravel())


def locate_point(mesh, p):
    """Find a triangle containing ``p`` and its barycentric coordinates.

    Ties on shared edges/vertices break to the lowest triangle index. Points
    farther than ``1e-12 * h_max`` outside the domain raise
    PointOutsideDomainError.
    """
    lam = mesh.barycentric_all(p)
    worst = lam.min(axis=1)
    # a barycentric deficit of eps on a triangle with edge length h is a
    # geometric distance of order eps*h
    tol = 1e-12 * mesh.h_max / mesh.longest_edge
    inside = worst >= -tol
    if not inside.any():
        raise PointOutsideDomainError(
            "point %s lies outside the mesh domain" % (np.asarray(p),)
        )
    idx = int(np.argmax(inside))
    lam_best = np.clip(lam[idx], 0.0, 1.0)
    lam_best /= lam_best.sum()
    return BarycentricLocation(triangle_index=idx, lam=lam_best)


def dirac_load_vector(mesh, p):
    """Nodal load vector of a Dirac functional at ``p``: entries phi_i(p).

    Dense (num_vertices,) vector with at most three nonzeros, summing to one
    (P1 partition of unity). This is the discrete image of the point source
    under duality with the P1 test space.
    """
    loc = locate_point(mesh, p)
    out = np.zeros(mesh.num_vertices)
    out[mesh.triangles[loc.triangle_index]] = loc.lam
    return out


# 6-point symmetric rule, exact through total degree 4 (used for degree=3).
# Two orbits (a, b, b) with all permutations; weights in sum-to-1/2 form.
_ORBIT_A1 = 0.10810301816807022736
_ORBIT_B1 = 0.44594849091596488632
_ORBIT_W1 = 0.11169079483900573285
_ORBIT_A2 = 0.81684757298045851308
_ORBIT_B2 = 0.09157621350977074346
_ORBIT_W2 = 0.05497587182766093382


def quadrature_rule(degree):
    """Reference-triangle rule exact for bivariate polynomials of ``degree``."""
    if degree == 1:
        pts = np.array([[1.0, 1.0, 1.0]]) / 3.0
        wts = np.array([0.5])
    elif degree == 2:
        pts = np.array(
            [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]
        )
        wts = np.full(3, 1.0 / 6.0)
    elif degree == 3:
        pts = []
        wts = []
        for a, b, w in (
            (_ORBIT_A1, _ORBIT_B1, _ORBIT_W1),
            (_ORBIT_A2, _ORBIT_B2, _ORBIT_W2),
        ):
            pts += [[a, b, b], [b, a, b], [b, b, a]]
            wts += [w, w, w]
        pts = np.array(pts)
        wts = np.array(wts)
    else:
        raise ValueError("unsupported quadrature degree %r (need 1, 2 or 3)" % degree)
    return QuadratureRule(degree=degree, points=pts, weights=wts)


def boundary_distance(mesh, p):
    """Distance from ``p`` to the polygonal boundary of the mesh."""
    p = np.asarray(p, dtype=np.float64)
    a = mesh.vertices[mesh.boundary_edges[:, 0]]
    b = mesh.vertices[mesh.boundary_edges[:, 1]]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", p[None, :] - a, ab) / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return float(np.min(np.hypot(*(p[None, :] - closest).T)))


def _fmt(x):
    return format(float(x), ".17g")


def write_mesh_text(mesh, path):
    """Plain-text mesh file: ``nv nt``, vertex lines ``x y flag``, 0-based cells."""
    with open(path, "w") as fh:
        fh.write("%d %d\n" % (mesh.num_vertices, mesh.num_triangles))
        for (x, y), flag in zip(mesh.vertices, mesh.boundary_flags):
            fh.write("%s %s %d\n" % (_fmt(x), _fmt(y), int(flag)))
        for i, j, k in mesh.triangles:
            fh.write("%d %d %d\n" % (i, j, k))


def read_mesh_text(path):
    """Read the plain-text node/element format written by write_mesh_text."""
    with open(path) as fh:
        tokens = fh.read().split()
    if len(tokens) < 2:
        raise ValueError("mesh file %s: missing header" % path)
    nv, nt = int(tokens[0]), int(tokens[1])
    need = 2 + 3 * nv + 3 * nt
    if len(tokens) != need:
        raise ValueError(
            "mesh file %s: expected %d tokens, found %d" % (path, need, len(tokens))
        )
    body = tokens[2:]
    verts = np.array(
        [[float(body[3 * i]), float(body[3 * i + 1])] for i in range(nv)]
    )
    flags = np.array([int(body[3 * i + 2]) != 0 for i in range(nv)])
    off = 3 * nv
    tris = np.array(
        [
            [int(body[off + 3 * i]), int(body[off + 3 * i + 1]), int(body[off + 3 * i + 2])]
            for i in range(nt)
        ],
        dtype=np.int64,
    )
    return Mesh(verts, tris, flags)


def write_vtk(mesh, path, point_data=None, cell_data=None, title="bilotrack fields"):
    """Legacy ASCII VTK export (UNSTRUCTURED_GRID, scalar POINT/CELL_DATA)."""
    point_data = point_data or {}
    cell_data = cell_data or {}
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n%s\nASCII\n" % title)
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write("POINTS %d double\n" % mesh.num_vertices)
        for x, y in mesh.vertices:
            fh.write("%s %s 0\n" % (_fmt(x), _fmt(y)))
        fh.write("CELLS %d %d\n" % (mesh.num_triangles, 4 * mesh.num_triangles))
        for i, j, k in mesh.triangles:
            fh.write("3 %d %d %d\n" % (i, j, k))
        fh.write("CELL_TYPES %d\n" % mesh.num_triangles)
        fh.write("5\n" * mesh.num_triangles)
        if point_data:
            fh.write("POINT_DATA %d\n" % mesh.num_vertices)
            for name, values in point_data.items():
                fh.write("SCALARS %s double 1\nLOOKUP_TABLE default\n" % name)
                fh.write("".join(_fmt(v) + "\n" for v in np.asarray(values)))
        if cell_data:
            fh.write("CELL_DATA %d\n" % mesh.num_triangles)
            for name, values in cell_data.items():
                fh.write("SCALARS %s double 1\nLOOKUP_TABLE default\n" % name)
                fh.write("".join(_fmt(v) + "\n" for v in np.asarray(values)))


def read_vtk(path):
    """Parse files produced by write_vtk; returns points, cells and data dicts."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    i = lines.index("DATASET UNSTRUCTURED_GRID")
    nv = int(lines[i + 1].split()[1])
    pts = np.array(
        [[float(t) for t in lines[i + 2 + k].split()[:2]] for k in range(nv)]
    )
    j = i + 2 + nv
    nt = int(lines[j].split()[1])
    cells = np.array(
        [[int(t) for t in lines[j + 1 + k].split()[1:]] for k in range(nt)],
        dtype=np.int64,
    )
    point_data, cell_data = {}, {}
    target, count = None, 0
    k = j + 1 + nt
    while k < len(lines):
        ln = lines[k]
        if ln.startswith("POINT_DATA"):
            target, count = point_data, nv
        elif ln.startswith("CELL_DATA"):
            target, count = cell_data, nt
        elif ln.startswith("SCALARS"):
            name = ln.split()[1]
            vals = np.array([float(lines[k + 2 + m]) for m in range(count)])
            target[name] = vals
            k += 1 + count
        k += 1
    return {"points": pts, "cells": cells, "point_data": point_data, "cell_data": cell_data}
