"""Triangle surface meshes and the geometric primitives built on them.

Coordinates are in millimetres and stored as float64 arrays. Everything here
is a pure function of its inputs; meshes are never modified in place.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

MIN_TRIANGLE_AREA = 1e-12


class MeshError(ValueError):
    """Raised for invalid mesh input or a failed geometric precondition."""


class InvertedOrientationWarning(UserWarning):
    pass


def as_points(values, name="points") -> np.ndarray:
    """Return ``values`` as a finite float64 array of shape (n, 3)."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise MeshError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise MeshError(f"{name} contains non-finite values")
    return arr


def as_point(value, name="point") -> np.ndarray:
    arr = np.array(value, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise MeshError(f"{name} must have 3 components, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise MeshError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Indexed triangle mesh.

    Parameters
    ----------
    vertices : array_like, shape (V, 3)
        Vertex positions in mm.
    triangles : array_like of int, shape (F, 3)
        Vertex indices per triangle, counter-clockwise seen from outside.
    labels : array_like, optional
        Per-vertex tags (region ids etc.), carried through unchanged.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    labels: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        verts = as_points(self.vertices, "vertices") if len(self.vertices) else np.zeros((0, 3))
        tris = np.array(self.triangles, dtype=np.int64)
        if tris.size == 0:
            tris = tris.reshape(0, 3)
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise MeshError(f"triangles must have shape (F, 3), got {tris.shape}")
        if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
            raise MeshError("triangle index out of range")
        if tris.size:
            distinct = (
                (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
            )
            if not distinct.all():
                raise MeshError(f"degenerate triangle {int(np.flatnonzero(~distinct)[0])}: repeated index")
            areas = _triangle_areas(verts, tris)
            if areas.min() <= MIN_TRIANGLE_AREA:
                bad = int(np.argmin(areas))
                raise MeshError(f"degenerate triangle {bad}: area {areas[bad]:.3g} mm^2")
        labels = None
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape[0] != len(verts):
                raise MeshError("labels length must equal vertex count")
            labels.setflags(write=False)
        verts.setflags(write=False)
        tris.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "labels", labels)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def with_vertices(self, vertices) -> "SurfaceMesh":
        """Same connectivity and labels, new vertex positions."""
        return SurfaceMesh(vertices, self.triangles, self.labels)

    def diameter(self) -> float:
        """Bounding-box diagonal, a cheap stand-in for the true diameter."""
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def transformed(self, rotation, translation=(0.0, 0.0, 0.0)) -> "SurfaceMesh":
        R = np.asarray(rotation, dtype=np.float64)
        t = as_point(translation, "translation")
        return self.with_vertices(self.vertices @ R.T + t)

    def edges(self) -> np.ndarray:
        """Unique undirected edges, shape (E, 2), sorted."""
        if "edges" not in self._cache:
            e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
            e.sort(axis=1)
            self._cache["edges"] = np.unique(e, axis=0)
        return self._cache["edges"]

    def is_closed(self) -> bool:
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(len(counts)) and bool(np.all(counts == 2))

    def spatial_index(self) -> "TriangleIndex":
        if "index" not in self._cache:
            self._cache["index"] = TriangleIndex(self)
        return self._cache["index"]

    def check_registrable(self):
        if self.n_vertices < 4:
            raise MeshError(f"registration needs at least 4 vertices, got {self.n_vertices}")


def _triangle_areas(verts, tris):
    a = verts[tris[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(verts[tris[:, 1]] - a, verts[tris[:, 2]] - a), axis=1)


@dataclass(frozen=True)
class InteriorPointSet:
    """Sample points of subsurface structures (nodule, bronchi, vessels)."""

    points: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        pts = as_points(self.points, "interior points") if len(self.points) else np.zeros((0, 3))
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


def _dot(a, b):
    # elementwise so that batch shape never changes the rounding
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def closest_points_on_triangles(p, a, b, c):
    """Closest point on triangle (a, b, c) to p, batched over the leading axis.

    Region classification after Ericson, *Real-Time Collision Detection*.
    Returns the closest points (n, 3) and barycentric weights (n, 3) such that
    ``q = w0*a + w1*b + w2*c``.
    """
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    n = len(p)
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    bp = p - b
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    cp = p - c
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    v = np.zeros(n)
    w = np.zeros(n)
    done = np.zeros(n, dtype=bool)

    def take(mask, vv, ww):
        m = mask & ~done
        v[m] = vv[m] if np.ndim(vv) else vv
        w[m] = ww[m] if np.ndim(ww) else ww
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0) & (d2 <= 0), 0.0, 0.0)  # vertex a
        take((d3 >= 0) & (d4 <= d3), 1.0, 0.0)  # vertex b
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), d1 / (d1 - d3), np.zeros(n))  # edge ab
        take((d6 >= 0) & (d5 <= d6), 0.0, 1.0)  # vertex c
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.zeros(n), d2 / (d2 - d6))  # edge ac
        e_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        take((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 1.0 - e_bc, e_bc)  # edge bc
        denom = 1.0 / (va + vb + vc)
        take(np.ones(n, dtype=bool), vb * denom, vc * denom)  # face interior

    bary = np.stack([1.0 - v - w, v, w], axis=1)
    q = a + ab * v[:, None] + ac * w[:, None]
    return q, bary


@dataclass(frozen=True)
class ClosestPoints:
    """Batch result of a point-to-surface query."""

    points: np.ndarray  # (n, 3) closest surface points
    distances: np.ndarray  # (n,)
    triangles: np.ndarray  # (n,) triangle index hosting each closest point
    barycentric: np.ndarray  # (n, 3) weights over that triangle's vertices


def _closest_over_candidates(points, verts, tris, cand):
    """Evaluate every (point, candidate triangle) pair; pick the minimum.

    ``cand`` is (n, k) triangle ids, ascending within each row, -1 padded.
    Ties resolve to the lowest triangle id.
    """
    n, k = cand.shape
    valid = cand >= 0
    safe = np.where(valid, cand, 0)
    t = tris[safe.reshape(-1)]
    rep = np.repeat(points, k, axis=0)
    q, bary = closest_points_on_triangles(rep, verts[t[:, 0]], verts[t[:, 1]], verts[t[:, 2]])
    diff = rep - q
    d = np.sqrt(_dot(diff, diff)).reshape(n, k)
    d = np.where(valid, d, np.inf)
    best = np.argmin(d, axis=1)
    rows = np.arange(n)
    flat = rows * k + best
    return ClosestPoints(q[flat], d[rows, best], safe[rows, best], bary[flat])


def closest_points_brute_force(points, mesh: SurfaceMesh) -> ClosestPoints:
    """Exhaustive closest-point query over every triangle (reference oracle)."""
    if mesh.n_triangles == 0:
        raise MeshError("empty surface")
    pts = as_points(points)
    cand = np.broadcast_to(np.arange(mesh.n_triangles), (len(pts), mesh.n_triangles))
    out = []
    for lo in range(0, len(pts), 64):
        out.append(_closest_over_candidates(pts[lo:lo + 64], mesh.vertices, mesh.triangles, cand[lo:lo + 64]))
    return _concat(out)


def _concat(parts):
    return ClosestPoints(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                           ("points", "distances", "triangles", "barycentric")))


class TriangleIndex:
    """Exact closest-point acceleration over a fixed set of triangles.

    Triangles are indexed by their centroids in a k-d tree together with a
    bounding-sphere radius. A triangle whose centroid lies farther than
    ``best + r_max`` from the query cannot beat the current best, which
    bounds the candidate set without affecting the result.
    """

    def __init__(self, mesh: SurfaceMesh, k: int = 16):
        if mesh.n_triangles == 0:
            raise MeshError("empty surface")
        self.vertices = mesh.vertices
        self.triangles = mesh.triangles
        tri_pts = self.vertices[self.triangles]
        self.centroids = tri_pts.mean(axis=1)
        self.r_max = float(np.linalg.norm(tri_pts - self.centroids[:, None, :], axis=2).max())
        self.tree = cKDTree(self.centroids)
        self.k = min(k, mesh.n_triangles)

    def query(self, points) -> ClosestPoints:
        pts = as_points(points)
        if len(pts) == 0:
            return ClosestPoints(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, 3)))
        cdist, cand = self.tree.query(pts, k=self.k)
        cand = np.asarray(cand).reshape(len(pts), self.k)
        cdist = np.asarray(cdist).reshape(len(pts), self.k)
        res = _closest_over_candidates(pts, self.vertices, self.triangles, np.sort(cand, axis=1))
        if self.k == len(self.triangles):
            return res
        unresolved = np.flatnonzero(cdist[:, -1] <= res.distances + self.r_max)
        if len(unresolved) == 0:
            return res
        points_out = res.points.copy()
        dist_out = res.distances.copy()
        tri_out = res.triangles.copy()
        bary_out = res.barycentric.copy()
        radii = res.distances[unresolved] + self.r_max
        balls = self.tree.query_ball_point(pts[unresolved], radii)
        width = max(len(b) for b in balls)
        cand2 = np.full((len(unresolved), width), -1, dtype=np.int64)
        for row, ids in enumerate(balls):
            cand2[row, : len(ids)] = np.sort(ids)
        # padding (-1) sorts last once replaced by a large sentinel
        cand2 = np.where(cand2 < 0, np.iinfo(np.int64).max, cand2)
        cand2.sort(axis=1)
        cand2 = np.where(cand2 == np.iinfo(np.int64).max, -1, cand2)
        sub = _closest_over_candidates(pts[unresolved], self.vertices, self.triangles, cand2)
        points_out[unresolved] = sub.points
        dist_out[unresolved] = sub.distances
        tri_out[unresolved] = sub.triangles
        bary_out[unresolved] = sub.barycentric
        return ClosestPoints(points_out, dist_out, tri_out, bary_out)


def closest_points_on_surface(points, mesh: SurfaceMesh) -> ClosestPoints:
    """Batched closest points on ``mesh`` for every row of ``points``."""
    if mesh.n_triangles == 0:
        raise MeshError("empty surface")
    return mesh.spatial_index().query(points)


def closest_point_on_surface(p, mesh: SurfaceMesh) -> tuple[np.ndarray, float]:
    """Closest point of ``mesh`` to a single point ``p`` and its distance."""
    res = closest_points_on_surface(as_point(p).reshape(1, 3), mesh)
    return res.points[0], float(res.distances[0])


def adjacency_matrix(mesh: SurfaceMesh) -> sp.csr_matrix:
    e = mesh.edges()
    n = mesh.n_vertices
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def laplacian_operator(mesh: SurfaceMesh) -> sp.csr_matrix:
    """Uniform (umbrella) Laplacian ``L = I - D^-1 A`` as a sparse matrix."""
    if "laplacian" in mesh._cache:
        return mesh._cache["laplacian"]
    A = adjacency_matrix(mesh)
    deg = np.asarray(A.sum(axis=1)).ravel()
    if np.any(deg == 0):
        raise MeshError(f"isolated vertex {int(np.flatnonzero(deg == 0)[0])}")
    L = (sp.identity(mesh.n_vertices, format="csr") - sp.diags(1.0 / deg) @ A).tocsr()
    mesh._cache["laplacian"] = L
    return L


def discrete_laplacian(mesh: SurfaceMesh) -> np.ndarray:
    """Per-vertex umbrella vectors ``v_i - mean(one-ring of v_i)``, shape (V, 3).

    Uniform weights rather than cotangent ones; both approximate the mean
    curvature normal on near-regular meshes.
    """
    return laplacian_operator(mesh) @ mesh.vertices


def signed_volume(mesh: SurfaceMesh) -> float:
    """Divergence-theorem volume; positive for outward-facing triangles."""
    v = mesh.vertices[mesh.triangles]
    dets = _dot(v[:, 0], np.cross(v[:, 1], v[:, 2]))
    return math.fsum(dets) / 6.0


def mesh_volume(mesh: SurfaceMesh) -> float:
    """Enclosed volume in mm^3 of a closed mesh.

    Inverted orientation yields the absolute value together with an
    :class:`InvertedOrientationWarning`.
    """
    if mesh.n_triangles == 0 or not mesh.is_closed():
        raise MeshError("mesh not closed")
    vol = signed_volume(mesh)
    if vol < 0:
        warnings.warn("mesh has inward-facing orientation; returning |volume|", InvertedOrientationWarning, stacklevel=2)
    return abs(vol)


def apply_displacement(mesh: SurfaceMesh, displacement) -> SurfaceMesh:
    """Move every vertex by its displacement vector; connectivity is kept."""
    d = np.asarray(displacement, dtype=np.float64)
    if d.shape != mesh.vertices.shape:
        raise MeshError(f"displacement shape {d.shape} does not match vertices {mesh.vertices.shape}")
    if not np.all(np.isfinite(d)):
        raise MeshError("displacement contains non-finite values")
    return mesh.with_vertices(mesh.vertices + d)


# fixtures ---------------------------------------------------------------


def unit_cube() -> SurfaceMesh:
    """Axis-aligned unit cube [0, 1]^3, 8 vertices and 12 outward triangles."""
    v = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=float)
    t = [
        [0, 2, 1], [1, 2, 3],  # z = 0
        [4, 5, 6], [5, 7, 6],  # z = 1
        [0, 1, 4], [1, 5, 4],  # y = 0
        [2, 6, 3], [3, 6, 7],  # y = 1
        [0, 4, 2], [2, 4, 6],  # x = 0
        [1, 3, 5], [3, 7, 5],  # x = 1
    ]
    return SurfaceMesh(v, t)


_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
])


def _icosahedron():
    phi = (1.0 + 5.0 ** 0.5) / 2.0
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    return v / np.linalg.norm(v, axis=1, keepdims=True), _ICO_FACES.copy()


def geodesic_sphere(frequency: int, radius: float = 1.0) -> SurfaceMesh:
    """Icosahedron with every face split into ``frequency**2`` triangles.

    Vertex count is ``10 * frequency**2 + 2``; ``frequency = 2**k`` matches the
    usual k-fold subdivided icosphere.
    """
    if frequency < 1:
        raise MeshError("frequency must be >= 1")
    base, faces = _icosahedron()
    f = frequency
    key_to_id: dict = {}
    verts: list = []

    def vid(face, i, j):
        # lattice point (i, j) of face, i + j <= f; key is shared across faces via
        # the integer combination of the face's corner ids
        corners = faces[face]
        k = f - i - j
        weights = {}
        for c, wgt in zip(corners, (k, i, j)):
            if wgt:
                weights[int(c)] = weights.get(int(c), 0) + wgt
        key = tuple(sorted(weights.items()))
        if key not in key_to_id:
            key_to_id[key] = len(verts)
            p = sum(base[c] * wgt for c, wgt in weights.items()) / f
            verts.append(p)
        return key_to_id[key]

    tris = []
    for face in range(len(faces)):
        for i in range(f):
            for j in range(f - i):
                a, b, c = vid(face, i, j), vid(face, i + 1, j), vid(face, i, j + 1)
                tris.append([a, b, c])
                if i + j < f - 1:
                    tris.append([b, vid(face, i + 1, j + 1), c])
    v = np.array(verts)
    v = radius * v / np.linalg.norm(v, axis=1, keepdims=True)
    return SurfaceMesh(v, np.array(tris))


def icosphere(subdivisions: int, radius: float = 1.0) -> SurfaceMesh:
    return geodesic_sphere(2 ** subdivisions, radius)
