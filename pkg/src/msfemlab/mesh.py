"""Structured coarse triangulations of the unit square and their nested fine meshes.

A coarse mesh is refined element by element with uniform red refinement. All
elements share the refinement pattern of a single reference triangle, so the
fine topology is computed once per level and mapped affinely onto each
coarse element. The global fine mesh is the union of the element meshes with
vertices on shared coarse edges merged.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from msfemlab.errors import DegenerateElementError, InvalidArgumentError, OutOfDomainError

GEOM_TOL = 1e-12
BARY_TOL = 1e-10


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def triangle_geometry(coords):
    """Signed areas and P1 hat gradients for a stack of triangles.

    Args:
        coords: array of shape (T, 3, 2) with counterclockwise vertices.

    Returns:
        (areas, grads) with shapes (T,) and (T, 3, 2); ``grads[t, a]`` is the
        constant gradient of the hat function of local vertex ``a``.
    """
    coords = np.asarray(coords, dtype=float)
    e1 = coords[:, 1] - coords[:, 0]
    e2 = coords[:, 2] - coords[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    if np.any(np.abs(det) <= GEOM_TOL**2):
        bad = int(np.flatnonzero(np.abs(det) <= GEOM_TOL**2)[0])
        raise DegenerateElementError(f"triangle {bad} has zero area")
    # rows of the inverse Jacobian transpose give grad(lambda_1), grad(lambda_2)
    g1 = np.stack([e2[:, 1], -e2[:, 0]], axis=1) / det[:, None]
    g2 = np.stack([-e1[:, 1], e1[:, 0]], axis=1) / det[:, None]
    grads = np.stack([-g1 - g2, g1, g2], axis=1)
    return 0.5 * det, grads


class TriMesh:
    """Shared geometry for the triangle meshes below.

    Subclasses provide ``vertices`` (N, 2) and ``triangles`` (T, 3).
    """

    vertices: np.ndarray
    triangles: np.ndarray

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @cached_property
    def triangle_coords(self):
        return self.vertices[self.triangles]

    @cached_property
    def _geometry(self):
        return triangle_geometry(self.triangle_coords)

    @property
    def areas(self):
        return self._geometry[0]

    @property
    def gradients(self):
        return self._geometry[1]

    @cached_property
    def on_domain_boundary(self):
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return (
            (np.abs(x) <= GEOM_TOL)
            | (np.abs(x - 1.0) <= GEOM_TOL)
            | (np.abs(y) <= GEOM_TOL)
            | (np.abs(y - 1.0) <= GEOM_TOL)
        )

    def edges(self):
        """Unique undirected edges as a sorted (E, 2) array, plus use counts."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0, return_counts=True)

    @cached_property
    def _buckets(self):
        # uniform bucket grid over the unit square; each triangle is filed in
        # every bucket its (slightly padded) bounding box touches
        nb = max(1, int(np.ceil(np.sqrt(self.n_triangles / 2.0))))
        c = self.triangle_coords
        lo = np.clip(np.floor((c.min(axis=1) - BARY_TOL) * nb), 0, nb - 1).astype(np.int64)
        hi = np.clip(np.floor((c.max(axis=1) + BARY_TOL) * nb), 0, nb - 1).astype(np.int64)
        tri_ids, bucket_ids = [], []
        span = int((hi - lo).max()) + 1
        ids = np.arange(self.n_triangles)
        for di in range(span):
            for dj in range(span):
                bi, bj = lo[:, 0] + di, lo[:, 1] + dj
                ok = (bi <= hi[:, 0]) & (bj <= hi[:, 1])
                tri_ids.append(ids[ok])
                bucket_ids.append(bi[ok] * nb + bj[ok])
        tri_ids = np.concatenate(tri_ids)
        bucket_ids = np.concatenate(bucket_ids)
        order = np.lexsort((tri_ids, bucket_ids))
        tri_ids, bucket_ids = tri_ids[order], bucket_ids[order]
        counts = np.bincount(bucket_ids, minlength=nb * nb)
        width = int(counts.max())
        table = np.full((nb * nb, width), -1, dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot = np.arange(len(tri_ids)) - starts[bucket_ids]
        table[bucket_ids, slot] = tri_ids
        return nb, table

    def barycentric(self, tri, points):
        """Barycentric coordinates of ``points`` (P, 2) w.r.t. triangles ``tri`` (P,)."""
        c = self.triangle_coords[tri]
        g = self.gradients[tri]
        lam = np.einsum("pad,pd->pa", g, points - c[:, 0])
        lam[:, 0] = 1.0 - lam[:, 1] - lam[:, 2]
        return lam

    def locate_points(self, points):
        """Vectorized :func:`locate_point`; returns (triangle ids, barycentrics)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        outside = (
            (pts < -GEOM_TOL).any(axis=1)
            | (pts > 1.0 + GEOM_TOL).any(axis=1)
            | ~np.isfinite(pts).all(axis=1)
        )
        if outside.any():
            raise OutOfDomainError(f"point {pts[outside][0].tolist()} outside the unit square")
        nb, table = self._buckets
        b = np.clip(np.floor(pts * nb), 0, nb - 1).astype(np.int64)
        cand = table[b[:, 0] * nb + b[:, 1]]
        safe = np.where(cand >= 0, cand, 0)
        c0 = self.triangle_coords[safe, 0]
        g = self.gradients[safe]
        lam = np.einsum("pkad,pkd->pka", g, pts[:, None, :] - c0)
        lam[..., 0] = 1.0 - lam[..., 1] - lam[..., 2]
        inside = (cand >= 0) & (lam >= -BARY_TOL).all(axis=2)
        if not inside.any(axis=1).all():
            bad = pts[~inside.any(axis=1)][0]
            raise OutOfDomainError(f"no triangle contains point {bad.tolist()}")
        # candidate rows are sorted by triangle id, so the first hit is the lowest id
        k = np.argmax(inside, axis=1)
        rows = np.arange(len(pts))
        return cand[rows, k], lam[rows, k]

    def locate_point(self, p):
        """Triangle containing ``p`` and its barycentric coordinates.

        Points on shared edges or vertices resolve to the lowest triangle id.
        """
        tri, lam = self.locate_points(np.asarray(p, dtype=float)[None, :])
        return int(tri[0]), lam[0]


@dataclass(frozen=True, eq=False)
class CoarseMesh(TriMesh):
    vertices: np.ndarray
    triangles: np.ndarray
    interior_vertex_ids: np.ndarray
    n: int | None = None

    def local_to_global(self, K, a):
        """Global index of the vertex with local index ``a`` (0..2) in triangle ``K``."""
        return int(self.triangles[K, a])

    @property
    def H(self):
        """Mesh diameter (longest edge); sqrt(2)/n for structured meshes."""
        c = self.triangle_coords
        lengths = np.linalg.norm(c - np.roll(c, 1, axis=1), axis=2)
        return float(lengths.max())

    @property
    def spacing(self):
        """Grid spacing 1/n of a structured mesh (shortest edge otherwise)."""
        if self.n is not None:
            return 1.0 / self.n
        c = self.triangle_coords
        return float(np.linalg.norm(c - np.roll(c, 1, axis=1), axis=2).min())


@dataclass(frozen=True, eq=False)
class FineMesh(TriMesh):
    parent: int
    refinement_level: int
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_vertex_ids: np.ndarray
    barycentric_coords: np.ndarray
    to_global_fine: np.ndarray | None = None

    @cached_property
    def interior_vertex_ids(self):
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self.boundary_vertex_ids] = False
        return np.flatnonzero(mask)


@dataclass(frozen=True, eq=False)
class GlobalFineMesh(TriMesh):
    coarse: CoarseMesh
    refinement_level: int
    vertices: np.ndarray
    triangles: np.ndarray
    interior_vertex_ids: np.ndarray
    element_injections: np.ndarray

    @property
    def triangles_per_element(self):
        return 4**self.refinement_level

    @cached_property
    def parent_of_triangle(self):
        return np.repeat(np.arange(self.coarse.n_triangles), self.triangles_per_element)

    @property
    def h(self):
        """Fine grid spacing, 1/(n 2^r) for a structured coarse mesh."""
        return self.coarse.spacing / 2**self.refinement_level

    def fine_mesh(self, K):
        """The :class:`FineMesh` of coarse element ``K`` with its injection attached."""
        fine = refine_element(self.coarse, K, self.refinement_level)
        return FineMesh(
            parent=fine.parent,
            refinement_level=fine.refinement_level,
            vertices=fine.vertices,
            triangles=fine.triangles,
            boundary_vertex_ids=fine.boundary_vertex_ids,
            barycentric_coords=fine.barycentric_coords,
            to_global_fine=self.element_injections[K],
        )


def build_structured_coarse(n):
    """Uniform n-by-n mesh of the unit square, every square cut along the same diagonal."""
    if int(n) != n or n < 2:
        raise InvalidArgumentError(f"n must be an integer >= 2, got {n!r}")
    n = int(n)
    s = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(s, s, indexing="xy")
    vertices = np.stack([X.ravel(), Y.ravel()], axis=1)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    v00 = (i + (n + 1) * j).ravel()
    v10, v01, v11 = v00 + 1, v00 + n + 1, v00 + n + 2
    lower = np.stack([v00, v10, v11], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)
    ii, jj = np.meshgrid(np.arange(1, n), np.arange(1, n), indexing="xy")
    interior = (ii + (n + 1) * jj).ravel()
    return CoarseMesh(
        vertices=_frozen(vertices, float),
        triangles=_frozen(triangles, np.int64),
        interior_vertex_ids=_frozen(np.sort(interior), np.int64),
        n=n,
    )


def red_refine(points, triangles):
    """One red refinement step: each triangle splits into four via its edge midpoints.

    Existing points keep their indices; midpoints are appended in order of
    first appearance. Works for points of any dimension (e.g. barycentric).
    """
    points = list(map(tuple, np.asarray(points, dtype=float)))
    midpoint = {}
    out = []

    def mid(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in midpoint:
            midpoint[key] = len(points)
            pa, pb = points[a], points[b]
            points.append(tuple(0.5 * (x + y) for x, y in zip(pa, pb)))
        return midpoint[key]

    for a, b, c in np.asarray(triangles):
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
    return np.array(points), np.array(out, dtype=np.int64)


@lru_cache(maxsize=None)
def reference_refinement(r):
    """Level-``r`` red refinement of the reference triangle in barycentric coordinates."""
    bary = np.eye(3)
    tris = np.array([[0, 1, 2]], dtype=np.int64)
    for _ in range(r):
        bary, tris = red_refine(bary, tris)
    return _frozen(bary, float), _frozen(tris, np.int64)


def refine_element(mesh, K, r):
    """Fine mesh of coarse triangle ``K`` after ``r`` uniform red refinements."""
    if not 0 <= K < mesh.n_triangles:
        raise InvalidArgumentError(f"triangle id {K} out of range")
    if int(r) != r or r < 0:
        raise InvalidArgumentError(f"refinement level must be a non-negative integer, got {r!r}")
    bary, tris = reference_refinement(int(r))
    coords = bary @ mesh.vertices[mesh.triangles[K]]
    boundary = np.flatnonzero(bary.min(axis=1) <= GEOM_TOL)
    return FineMesh(
        parent=int(K),
        refinement_level=int(r),
        vertices=_frozen(coords, float),
        triangles=tris,
        boundary_vertex_ids=_frozen(boundary, np.int64),
        barycentric_coords=bary,
    )


def build_global_fine(mesh, r):
    """Conforming union of the level-``r`` fine meshes of every coarse element."""
    if int(r) != r or r < 0:
        raise InvalidArgumentError(f"refinement level must be a non-negative integer, got {r!r}")
    r = int(r)
    bary, tris = reference_refinement(r)
    nK, nloc = mesh.n_triangles, len(bary)
    local = np.einsum("la,kad->kld", bary, mesh.triangle_coords)
    # coarse vertices first so that r = 0 reproduces the coarse numbering
    allpts = np.concatenate([mesh.vertices, local.reshape(-1, 2)])
    keys = np.round(allpts / GEOM_TOL).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    # renumber by first appearance
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    gid = rank[inverse]
    vertices = allpts[first[order]]
    injections = gid[mesh.n_vertices :].reshape(nK, nloc)
    triangles = injections[:, tris].reshape(-1, 3)
    fine = GlobalFineMesh(
        coarse=mesh,
        refinement_level=r,
        vertices=_frozen(vertices, float),
        triangles=_frozen(triangles, np.int64),
        interior_vertex_ids=np.empty(0, dtype=np.int64),
        element_injections=_frozen(injections, np.int64),
    )
    interior = np.flatnonzero(~fine.on_domain_boundary)
    object.__setattr__(fine, "interior_vertex_ids", _frozen(interior, np.int64))
    return fine


def vertex_map(src, dst):
    """Index in ``dst`` of every vertex of ``src`` (matching coordinates).

    Raises InvalidArgumentError if some vertex of ``src`` is missing from ``dst``.
    """
    ks = np.round(src.vertices / GEOM_TOL).astype(np.int64)
    kd = np.round(dst.vertices / GEOM_TOL).astype(np.int64)
    view = np.dtype([("x", np.int64), ("y", np.int64)])
    ks = np.ascontiguousarray(ks).view(view).ravel()
    kd = np.ascontiguousarray(kd).view(view).ravel()
    order = np.argsort(kd)
    pos = np.searchsorted(kd[order], ks)
    pos = np.clip(pos, 0, len(kd) - 1)
    idx = order[pos]
    if not np.array_equal(kd[idx], ks):
        raise InvalidArgumentError("meshes do not share the vertex set")
    return idx
