"""Exact closest-point queries against a triangle surface."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError
from .mesh import TriMesh

# feature codes returned by closest_point_on_triangles
INTERIOR = 0
EDGE_AB, EDGE_BC, EDGE_CA = 1, 2, 3
VERT_A, VERT_B, VERT_C = 4, 5, 6


def closest_point_on_triangles(q, a, b, c):
    """Closest points from `q[i]` to triangle ``(a[i], b[i], c[i])``.

    Vectorised version of the Voronoi-region walk from Ericson,
    *Real-Time Collision Detection* (5.1.5).

    Returns
    -------
    points : (n, 3) array
    feature : (n,) int array
        Which part of the triangle the closest point lies on (interior,
        one of the edges, or one of the corners).
    """
    q, a, b, c = (np.asarray(x, dtype=float) for x in (q, a, b, c))
    n = len(q)
    out = np.empty((n, 3))
    feat = np.full(n, -1, dtype=np.int8)
    todo = np.ones(n, dtype=bool)

    def dot(x, y):
        return np.einsum("ij,ij->i", x, y)

    ab, ac, ap = b - a, c - a, q - a
    d1, d2 = dot(ab, ap), dot(ac, ap)
    m = todo & (d1 <= 0) & (d2 <= 0)
    out[m], feat[m] = a[m], VERT_A
    todo &= ~m

    bp = q - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    m = todo & (d3 >= 0) & (d4 <= d3)
    out[m], feat[m] = b[m], VERT_B
    todo &= ~m

    vc = d1 * d4 - d3 * d2
    m = todo & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    if m.any():
        t = d1[m] / (d1[m] - d3[m])
        out[m], feat[m] = a[m] + t[:, None] * ab[m], EDGE_AB
    todo &= ~m

    cp = q - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    m = todo & (d6 >= 0) & (d5 <= d6)
    out[m], feat[m] = c[m], VERT_C
    todo &= ~m

    vb = d5 * d2 - d1 * d6
    m = todo & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    if m.any():
        t = d2[m] / (d2[m] - d6[m])
        out[m], feat[m] = a[m] + t[:, None] * ac[m], EDGE_CA
    todo &= ~m

    va = d3 * d6 - d5 * d4
    m = todo & (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    if m.any():
        t = (d4[m] - d3[m]) / ((d4[m] - d3[m]) + (d5[m] - d6[m]))
        out[m], feat[m] = b[m] + t[:, None] * (c[m] - b[m]), EDGE_BC
    todo &= ~m

    if todo.any():
        denom = 1.0 / (va[todo] + vb[todo] + vc[todo])
        v = vb[todo] * denom
        w = vc[todo] * denom
        out[todo] = a[todo] + ab[todo] * v[:, None] + ac[todo] * w[:, None]
        feat[todo] = INTERIOR
    return out, feat


class SurfaceIndex:
    """Closest-point queries on a fixed triangle mesh.

    Triangles are indexed by their centroids in a k-d tree; each triangle is
    bounded by a sphere around its centroid. A query first takes the best of
    a few nearby triangles as an upper bound ``d`` on the true distance and
    then tests every triangle whose bounding sphere can come closer than
    ``d`` -- so the answer is exact, not approximate.
    """

    def __init__(self, mesh: TriMesh, n_seed: int = 8):
        if mesh.n_faces == 0:
            raise ValidationError("cannot query an empty surface")
        self.mesh = mesh
        v, f = mesh.vertices, mesh.faces
        self._a, self._b, self._c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        cen = (self._a + self._b + self._c) / 3.0
        self._radius = np.max(np.linalg.norm(v[f] - cen[:, None, :], axis=2), axis=1)
        self._rmax = float(self._radius.max())
        self._tree = cKDTree(cen)
        self._n_seed = min(n_seed, mesh.n_faces)

    def _dist_to(self, q, faces):
        pts, feat = closest_point_on_triangles(q, self._a[faces], self._b[faces], self._c[faces])
        return np.linalg.norm(pts - q, axis=1), pts, feat

    def query(self, points):
        """Closest surface point for every query point.

        Returns
        -------
        dist : (n,) distances
        points : (n, 3) closest points
        face : (n,) index of the triangle hit (lowest index on exact ties)
        feature : (n,) feature code within that triangle
        """
        q = np.asarray(points, dtype=float).reshape(-1, 3)
        n = len(q)
        _, seed = self._tree.query(q, k=self._n_seed)
        seed = np.asarray(seed).reshape(n, -1)
        qq = np.repeat(q, seed.shape[1], axis=0)
        ds, _, _ = self._dist_to(qq, seed.ravel())
        upper = ds.reshape(n, -1).min(axis=1)

        cand = self._tree.query_ball_point(q, upper * (1 + 1e-9) + 1e-12 + self._rmax)
        lens = np.fromiter((len(c) for c in cand), dtype=np.int64, count=n)
        qi = np.repeat(np.arange(n), lens)
        fi = np.concatenate([np.asarray(c, dtype=np.int64) for c in cand]) if n else np.zeros(0, np.int64)
        # prune with the bounding sphere before the exact test
        cen_d = np.linalg.norm(self._tree.data[fi] - q[qi], axis=1)
        keep = cen_d - self._radius[fi] <= upper[qi] * (1 + 1e-9) + 1e-12
        qi, fi = qi[keep], fi[keep]
        d, pts, feat = self._dist_to(q[qi], fi)
        order = np.lexsort((fi, d, qi))
        qi, fi, d, pts, feat = qi[order], fi[order], d[order], pts[order], feat[order]
        first = np.flatnonzero(np.r_[True, qi[1:] != qi[:-1]])
        return d[first], pts[first], fi[first], feat[first]


def closest_points(points, mesh: TriMesh):
    """Convenience wrapper: distances and closest points on `mesh`."""
    d, pts, _, _ = SurfaceIndex(mesh).query(points)
    return d, pts
