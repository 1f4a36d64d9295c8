"""Triangle meshes and the discrete differential operators built on them.

All coordinates are in millimetres. Functions here are pure: they never
modify the arrays of the mesh they are given.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .errors import ValidationError

logger = logging.getLogger(__name__)

COT_CLAMP = 1e6


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Immutable triangle surface.

    Parameters
    ----------
    vertices : array_like, shape (p, 3)
        Vertex coordinates in mm.
    faces : array_like, shape (f, 3)
        Vertex indices; counter-clockwise order gives the outward normal.
    uv : array_like, shape (p, 2), optional
        Per-vertex texture coordinates, carried along untouched.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray | None = None

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64).reshape(-1, 3)
        f = _frozen(self.faces, np.int64).reshape(-1, 3)
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise ValidationError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValidationError("face repeats a vertex")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.uv is not None:
            uv = _frozen(self.uv, np.float64).reshape(-1, 2)
            if len(uv) != len(v):
                raise ValidationError("uv must have one entry per vertex")
            object.__setattr__(self, "uv", uv)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriMesh":
        """Same topology, new coordinates."""
        vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
        if len(vertices) != self.n_vertices:
            raise ValidationError("vertex count must not change")
        return TriMesh(vertices, self.faces, self.uv)

    def flipped(self) -> "TriMesh":
        """Reverse the winding of every face."""
        return TriMesh(self.vertices, self.faces[:, ::-1], self.uv)

    def __eq__(self, other):
        if not isinstance(other, TriMesh):
            return NotImplemented
        same_uv = (self.uv is None and other.uv is None) or (
            self.uv is not None and other.uv is not None and np.array_equal(self.uv, other.uv))
        return (np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.faces, other.faces) and same_uv)

    __hash__ = None

    def __repr__(self):
        return f"TriMesh(p={self.n_vertices}, f={self.n_faces})"


# ---------------------------------------------------------------------------
# per-face quantities

def face_cross(mesh: TriMesh) -> np.ndarray:
    """Unnormalised face normals, (b - a) x (c - a); length is twice the area."""
    v, f = mesh.vertices, mesh.faces
    return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])


def face_areas(mesh: TriMesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_cross(mesh), axis=1)


def face_normals(mesh: TriMesh) -> np.ndarray:
    c = face_cross(mesh)
    n = np.linalg.norm(c, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(n > 0, c / n, 0.0)
    return out


def surface_area(mesh: TriMesh) -> float:
    return float(face_areas(mesh).sum())


def face_centroids(mesh: TriMesh) -> np.ndarray:
    return mesh.vertices[mesh.faces].mean(axis=1)


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted vertex normals.

    Vertices without an incident face get the zero vector, which callers
    treat as "invalid".
    """
    c = face_cross(mesh)
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], c)
    n = np.linalg.norm(acc, axis=1, keepdims=True)
    bad = n[:, 0] == 0
    if bad.any():
        logger.warning("%d vertices without a defined normal", int(bad.sum()))
    n[bad] = 1.0
    acc /= n
    acc[bad] = 0.0
    return acc


# ---------------------------------------------------------------------------
# connectivity

def edges(mesh: TriMesh) -> np.ndarray:
    """Unique undirected edges as sorted pairs (i < j), lexicographic order."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def edge_face_counts(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Unique edges and how many faces use each one."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq, counts


def boundary_edges(mesh: TriMesh) -> np.ndarray:
    e, c = edge_face_counts(mesh)
    return e[c == 1]


def boundary_vertices(mesh: TriMesh) -> np.ndarray:
    """Boolean mask of vertices on a boundary edge."""
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    mask[boundary_edges(mesh).ravel()] = True
    return mask


def adjacency(mesh: TriMesh) -> sparse.csr_matrix:
    e = edges(mesh)
    p = mesh.n_vertices
    data = np.ones(2 * len(e))
    a = sparse.coo_matrix((data, (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(p, p))
    return a.tocsr()


def face_components(mesh: TriMesh) -> np.ndarray:
    """Connected-component label per face (faces sharing a vertex connect)."""
    f = mesh.faces
    nf = len(f)
    rows = np.repeat(np.arange(nf), 3)
    inc = sparse.csr_matrix((np.ones(3 * nf), (rows, f.ravel())), shape=(nf, mesh.n_vertices))
    _, labels = csgraph.connected_components(inc @ inc.T, directed=False)
    return labels


def euler_characteristic(mesh: TriMesh) -> int:
    used = np.unique(mesh.faces)
    return int(len(used) - len(edges(mesh)) + mesh.n_faces)


def is_closed(mesh: TriMesh) -> bool:
    _, c = edge_face_counts(mesh)
    return bool(np.all(c == 2))


def submesh(mesh: TriMesh, vertex_mask) -> tuple[TriMesh, np.ndarray]:
    """Restrict to a vertex subset.

    Keeps faces whose three vertices are all selected. Returns the new mesh
    and the original indices of its vertices (in increasing order).
    """
    vertex_mask = np.asarray(vertex_mask)
    if vertex_mask.dtype != bool:
        m = np.zeros(mesh.n_vertices, dtype=bool)
        m[vertex_mask] = True
        vertex_mask = m
    keep = np.flatnonzero(vertex_mask)
    remap = -np.ones(mesh.n_vertices, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    f = mesh.faces[np.all(vertex_mask[mesh.faces], axis=1)]
    uv = None if mesh.uv is None else mesh.uv[keep]
    return TriMesh(mesh.vertices[keep], remap[f], uv), keep


# ---------------------------------------------------------------------------
# cleanup

def clean(mesh: TriMesh, dedup_tol: float = 1e-6, min_component_fraction: float = 0.05) -> TriMesh:
    """Merge coincident vertices, drop degenerate faces and small islands.

    Vertices closer than `dedup_tol` are merged into the lowest-index member
    of their cluster. Connected components with fewer than
    ``min_component_fraction`` times the face count of the largest component
    are removed, then unreferenced vertices are dropped.
    """
    v = mesh.vertices
    p = len(v)
    rep = np.arange(p)
    if p and dedup_tol >= 0:
        pairs = cKDTree(v).query_pairs(r=dedup_tol, output_type="ndarray")
        if len(pairs):
            g = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(p, p))
            _, lab = csgraph.connected_components(g, directed=False)
            first = np.full(lab.max() + 1, p)
            np.minimum.at(first, lab, np.arange(p))
            rep = first[lab]
    f = rep[mesh.faces]
    ok = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    f = f[ok]
    if len(f):
        cr = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        scale = np.ptp(v, axis=0).max() if p else 0.0
        f = f[np.linalg.norm(cr, axis=1) > 1e-14 * max(scale, 1e-300) ** 2]
    # duplicate faces (same vertex set) collapse to one
    if len(f):
        key = np.sort(f, axis=1)
        _, first_idx = np.unique(key, axis=0, return_index=True)
        f = f[np.sort(first_idx)]
    if len(f):
        tmp = TriMesh(v, f)
        lab = face_components(tmp)
        sizes = np.bincount(lab)
        keep_comp = sizes >= min_component_fraction * sizes.max()
        f = f[keep_comp[lab]]
    if not len(f):
        raise ValidationError("clean removed every face")
    used = np.zeros(p, dtype=bool)
    used[f.ravel()] = True
    keep = np.flatnonzero(used)
    remap = -np.ones(p, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    uv = None if mesh.uv is None else mesh.uv[keep]
    return TriMesh(v[keep], remap[f], uv)


# ---------------------------------------------------------------------------
# operators

def _point_segment_dist(q, a, b):
    ab = b - a
    t = np.einsum("ij,ij->i", q - a, ab) / np.einsum("ij,ij->i", ab, ab)
    t = np.clip(t, 0.0, 1.0)
    return np.linalg.norm(q - (a + t[:, None] * ab), axis=1)


def _argmin_with_ties(d: np.ndarray, keys: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Row-wise argmin of `d`; near-equal distances resolved by smallest key.

    `keys` must be an integer array with the same shape as `d` that orders
    the candidates (lower wins).
    """
    dmin = d.min(axis=1, keepdims=True)
    tied = d <= dmin + rtol * np.maximum(dmin, 1e-300)
    big = np.iinfo(np.int64).max
    return np.argmin(np.where(tied, keys, big), axis=1)


def mass_matrix(mesh: TriMesh) -> sparse.csr_matrix:
    """Vertex/edge area weights used by the weighted PCA.

    Each face gives its whole area to the one vertex of the face nearest to
    the face centroid (diagonal entry) and to the one edge nearest to the
    centroid (both symmetric off-diagonal slots). Ties go to the lowest
    vertex index, respectively the lexicographically smallest edge.
    """
    v, f = mesh.vertices, mesh.faces
    area = face_areas(mesh)
    if np.any(area <= 0):
        raise ValidationError("mass_matrix: degenerate face")
    c = v[f].mean(axis=1)
    dv = np.linalg.norm(v[f] - c[:, None, :], axis=2)
    vi = f[np.arange(len(f)), _argmin_with_ties(dv, f)]

    e = np.stack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=1)
    e.sort(axis=2)
    de = np.stack([_point_segment_dist(c, v[e[:, k, 0]], v[e[:, k, 1]]) for k in range(3)], axis=1)
    # lexicographic edge order -> single integer key
    ekey = e[:, :, 0] * (mesh.n_vertices + 1) + e[:, :, 1]
    best = e[np.arange(len(f)), _argmin_with_ties(de, ekey)]

    p = mesh.n_vertices
    rows = np.concatenate([vi, best[:, 0], best[:, 1]])
    cols = np.concatenate([vi, best[:, 1], best[:, 0]])
    data = np.concatenate([area, area, area])
    return sparse.coo_matrix((data, (rows, cols)), shape=(p, p)).tocsr()


def expand_mass_matrix(m: sparse.spmatrix) -> sparse.csr_matrix:
    """Block-replicate a p x p mass matrix onto xyz-interleaved coordinates.

    ``M3[3i+a, 3j+b] = M[i, j]`` if ``a == b`` else 0, i.e. ``kron(M, I3)``.
    """
    return sparse.kron(sparse.csr_matrix(m), sparse.identity(3, format="csr"), format="csr")


def cotangent_laplacian(mesh: TriMesh) -> sparse.csr_matrix:
    """Cotangent Laplace-Beltrami operator (no area normalisation).

    ``L[i, j] = -(cot a_ij + cot b_ij) / 2`` for every edge and the diagonal
    makes each row sum to zero. The matrix is symmetric positive
    semidefinite for meshes without obtuse-angle pathologies.
    """
    v, f = mesh.vertices, mesh.faces
    p = mesh.n_vertices
    rows, cols, vals = [], [], []
    clamped = 0
    for k in range(3):
        i, j, o = f[:, (k + 1) % 3], f[:, (k + 2) % 3], f[:, k]
        a, b = v[i] - v[o], v[j] - v[o]
        cot = np.einsum("ij,ij->i", a, b) / np.linalg.norm(np.cross(a, b), axis=1)
        bad = ~np.isfinite(cot) | (np.abs(cot) > COT_CLAMP)
        if bad.any():
            clamped += int(bad.sum())
            cot = np.where(np.isnan(cot), COT_CLAMP, cot)
            cot = np.clip(cot, -COT_CLAMP, COT_CLAMP)
        w = -0.5 * cot
        rows += [i, j]
        cols += [j, i]
        vals += [w, w]
    if clamped:
        warnings.warn(f"cotangent_laplacian: {clamped} cotangents clamped to +-{COT_CLAMP:g}",
                      RuntimeWarning, stacklevel=2)
    off = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(p, p)).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sparse.diags(diag)).tocsr()


def incidence_matrix(mesh: TriMesh) -> sparse.csr_matrix:
    """Node-arc incidence matrix: one row per edge (i<j), -1 at i, +1 at j."""
    e = edges(mesh)
    ne = len(e)
    r = np.repeat(np.arange(ne), 2)
    c = e.ravel()
    d = np.tile([-1.0, 1.0], ne)
    return sparse.csr_matrix((d, (r, c)), shape=(ne, mesh.n_vertices))
