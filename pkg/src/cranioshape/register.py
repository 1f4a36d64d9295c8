"""Template-to-scan dense correspondence by non-rigid registration.

Three morphing methods share one correspondence search:

* :func:`nicp_affine` -- optimal-step non-rigid ICP with one affine
  transform per template vertex,
* :func:`nicp_translation` -- the same with translations only,
* :func:`two_stage_lbrp` -- two Laplace-Beltrami regularised projections
  with decreasing stiffness.

plus the morph quality metrics (landmark error, vertex-to-nearest-neighbour
distance, per-class surface-normal deviation).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from . import mesh as meshops
from .align import gpa
from .errors import NumericalError, ValidationError
from .mesh import TriMesh
from .scan import LANDMARK_NAMES, LandmarkSet
from .spatial import EDGE_AB, EDGE_BC, EDGE_CA, VERT_A, SurfaceIndex

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NicpConfig:
    """Schedule of the optimal-step NICP.

    Stiffness at outer iteration n is ``alpha0 * alpha_decay**n``; the
    landmark weight is 1 for ``n < landmark_iters`` and 0 afterwards.
    """

    n_iters: int = 80
    alpha0: float = 1e8
    alpha_decay: float = 0.8
    landmark_iters: int = 51
    inner_exit_eps: float = 100.0
    max_inner: int = 20
    normal_compat_max_deg: float = 45.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.n_iters <= 0 or self.alpha0 <= 0 or not 0 < self.alpha_decay <= 1:
            raise ValidationError("invalid stiffness schedule")
        if self.inner_exit_eps <= 0 or self.max_inner <= 0 or self.gamma <= 0:
            raise ValidationError("inner_exit_eps, max_inner and gamma must be positive")

    def alpha(self, n: int) -> float:
        return self.alpha0 * self.alpha_decay ** n

    def beta(self, n: int) -> float:
        return 1.0 if n < self.landmark_iters else 0.0


@dataclass(frozen=True)
class LbrpConfig:
    lambda1: float = 10.0
    lambda2: float = 0.1
    normal_compat_max_deg: float = 45.0
    use_landmarks: bool = True

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0 and self.lambda1 > self.lambda2):
            raise ValidationError("need lambda1 > lambda2 > 0")


@dataclass
class CorrespondenceSet:
    points: np.ndarray      # (p, 3) closest target points
    weights: np.ndarray     # (p,) 1.0 valid / 0.0 invalid
    distances: np.ndarray   # (p,)

    @property
    def validity_ratio(self) -> float:
        return float(self.weights.mean()) if len(self.weights) else 0.0


@dataclass
class MorphResult:
    morphed: TriMesh
    method: str
    diagnostics: list = field(default_factory=list)   # one dict per solve

    def summary(self) -> dict:
        last = self.diagnostics[-1] if self.diagnostics else {}
        return {"method": self.method, "solves": len(self.diagnostics),
                "final": {k: last[k] for k in sorted(last)}}


# ---------------------------------------------------------------------------
# correspondences

class TargetSurface:
    """Target mesh plus the cached data needed by the correspondence search."""

    def __init__(self, target: TriMesh):
        if target.n_faces == 0:
            raise ValidationError("empty target surface")
        self.mesh = target
        self.index = SurfaceIndex(target)
        self.face_normals = meshops.face_normals(target)
        be = meshops.boundary_edges(target)
        p = target.n_vertices
        self._bkeys = set((be[:, 0] * p + be[:, 1]).tolist())
        self.boundary_vertex = meshops.boundary_vertices(target)

    def on_boundary(self, face, feature) -> np.ndarray:
        f = self.mesh.faces[face]
        p = self.mesh.n_vertices
        out = np.zeros(len(face), dtype=bool)
        edge_slots = {EDGE_AB: (0, 1), EDGE_BC: (1, 2), EDGE_CA: (2, 0)}
        if not self._bkeys:
            return out
        for code, (i, j) in edge_slots.items():
            m = feature == code
            if m.any():
                a, b = f[m, i], f[m, j]
                keys = np.minimum(a, b) * p + np.maximum(a, b)
                out[m] = np.fromiter((k in self._bkeys for k in keys.tolist()), dtype=bool, count=len(keys))
        m = feature >= VERT_A
        if m.any():
            out[m] = self.boundary_vertex[f[m, feature[m] - VERT_A]]
        return out


def find_correspondences(morphed: TriMesh, target, max_angle: float = 45.0) -> CorrespondenceSet:
    """Closest target point for each template vertex, with validity flags.

    A correspondence is invalid when the template vertex normal and the
    normal of the hit target triangle differ by more than `max_angle`
    degrees, or when the hit lies on a boundary edge of the target.
    """
    tgt = target if isinstance(target, TargetSurface) else TargetSurface(target)
    dist, pts, face, feat = tgt.index.query(morphed.vertices)
    vn = meshops.vertex_normals(morphed)
    cosang = np.einsum("ij,ij->i", vn, tgt.face_normals[face])
    ok = cosang >= np.cos(np.deg2rad(max_angle))
    ok &= np.linalg.norm(vn, axis=1) > 0
    ok &= ~tgt.on_boundary(face, feat)
    return CorrespondenceSet(pts, ok.astype(float), dist)


def landmark_vertex_indices(mesh: TriMesh, lms: LandmarkSet) -> np.ndarray:
    """Nearest template vertex for each landmark (canonical order)."""
    d = np.linalg.norm(mesh.vertices[None, :, :] - lms.array()[:, None, :], axis=2)
    return np.argmin(d, axis=1)


# ---------------------------------------------------------------------------
# linear algebra

def _factor(n: sparse.spmatrix, what: str):
    try:
        return spla.splu(sparse.csc_matrix(n), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                         options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise NumericalError(f"{what}: singular normal equations ({exc})") from None


def _refined_solve(n, lu, rhs, what, tol):
    x = lu.solve(rhs)
    x = x + lu.solve(rhs - n @ x)
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"{what}: non-finite solution")
    r = rhs - n @ x
    berr = np.linalg.norm(r) / (spla.norm(n, 1) * np.linalg.norm(x) + np.linalg.norm(rhs) + 1e-300)
    if berr > tol:
        raise NumericalError(f"{what}: solve inaccurate (backward error {berr:.2e})")
    return x


def solve_spd(normal: sparse.spmatrix, rhs: np.ndarray, what: str = "system", tol: float = 1e-8) -> np.ndarray:
    """Direct sparse solve of SPD normal equations with one refinement step.

    The accuracy check is normwise backward error,
    ``|N x - b| / (|N| |x| + |b|) < tol``.
    """
    n = sparse.csc_matrix(normal)
    return _refined_solve(n, _factor(n, what), rhs, what, tol)


def solve_regularised(stiff: sparse.spmatrix, weight: float, data: sparse.spmatrix, rhs: np.ndarray,
                      block: int, what: str = "system", tol: float = 1e-8) -> np.ndarray:
    """Solve ``(weight**2 * stiff + data) x = rhs`` for a graph-Laplacian-like `stiff`.

    `stiff` must annihilate every vector that repeats one `block`-sized
    chunk on all nodes (a global affine map for the NICP, a global
    translation for Laplacian smoothing). Those directions are carried by a
    separate unknown and the rest is grounded at node 0, so the solve stays
    accurate for any stiffness weight: with huge weights the plain normal
    equations lose the global part to rounding.
    """
    n = stiff.shape[0]
    if n % block:
        raise ValueError("size not divisible by block")
    nodes = n // block
    stiff = sparse.csr_matrix(stiff)
    data = sparse.csr_matrix(data)
    # Z: global modes, J: everything except node 0
    z = sparse.kron(np.ones((nodes, 1)), sparse.identity(block), format="csr")
    keep = np.arange(block, n)
    ny = (weight ** 2 * stiff + data)[keep][:, keep]
    qz = (data @ z).toarray()
    b = qz[keep]
    zq = z.T @ qz
    rhs = np.asarray(rhs, dtype=float).reshape(n, -1)
    lu = _factor(ny, what)
    sol = _refined_solve(sparse.csc_matrix(ny), lu, np.hstack([b, rhs[keep]]), what, tol)
    z1, z2 = sol[:, :block], sol[:, block:]
    schur = zq - b.T @ z1
    rc = z.T @ rhs - b.T @ z2
    try:
        c = np.linalg.solve(schur, rc)
    except np.linalg.LinAlgError:
        raise NumericalError(f"{what}: global part undetermined (singular Schur complement)") from None
    if np.linalg.cond(schur) > 1e14:
        raise NumericalError(f"{what}: global part undetermined (Schur complement condition "
                             f"{np.linalg.cond(schur):.1e})")
    x = z @ c
    x[keep] += z2 - z1 @ c
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"{what}: non-finite solution")
    return x


# ---------------------------------------------------------------------------
# NICP

class _NicpProblem:
    """The stacked least-squares system for the affine NICP.

    Unknowns X (4p x 3) hold one transposed 3x4 affine per vertex; the
    displacement matrix D maps X to deformed positions, D X = [v 1] X.
    """

    def __init__(self, template: TriMesh, lm_idx, gamma: float):
        v = template.vertices
        p = len(v)
        self.p = p
        inc = meshops.incidence_matrix(template)
        g = sparse.diags([1.0, 1.0, 1.0, gamma])
        self.stiff = sparse.kron(inc, g, format="csr")                # (4 n_e, 4p)
        self.stiff_normal = (self.stiff.T @ self.stiff).tocsr()
        hom = np.hstack([v, np.ones((p, 1))])
        rows = np.repeat(np.arange(p), 4)
        cols = np.arange(4 * p)
        self.D = sparse.csr_matrix((hom.ravel(), (rows, cols)), shape=(p, 4 * p))
        self.lm_idx = np.asarray(lm_idx)
        self.DL = self.D[self.lm_idx]

    def identity(self) -> np.ndarray:
        blk = np.vstack([np.eye(3), np.zeros((1, 3))])
        return np.tile(blk, (self.p, 1))

    def energy(self, x, alpha, w, u, beta, ul) -> dict:
        es = float(np.sum((alpha * (self.stiff @ x)) ** 2))
        ed = float(np.sum((w[:, None] * (self.D @ x - u)) ** 2))
        el = float(np.sum((beta * (self.DL @ x - ul)) ** 2))
        return {"stiffness": es, "data": ed, "landmark": el, "total": es + ed + el}

    def solve(self, alpha, w, u, beta, ul, what) -> np.ndarray:
        if not np.any(w > 0) and beta == 0:
            raise NumericalError(f"{what}: no valid correspondences and no landmark term")
        wd = sparse.diags(w) @ self.D
        data = wd.T @ wd
        rhs = wd.T @ (w[:, None] * u)
        if beta > 0:
            dl = beta * self.DL
            data = data + dl.T @ dl
            rhs = rhs + dl.T @ (beta * ul)
        return solve_regularised(self.stiff_normal, alpha, data, rhs, 4, what)


def _prepare(template, target, template_lms, target_lms, cfg):
    if template_lms is None or target_lms is None:
        raise ValidationError("template and target landmarks are required")
    lm_idx = template_lms if not isinstance(template_lms, LandmarkSet) \
        else landmark_vertex_indices(template, template_lms)
    ul = target_lms.array() if isinstance(target_lms, LandmarkSet) else np.asarray(target_lms, float)
    tgt = target if isinstance(target, TargetSurface) else TargetSurface(target)
    return np.asarray(lm_idx), ul, tgt


def nicp_affine(template: TriMesh, target, template_lms, target_lms,
                cfg: NicpConfig = NicpConfig(), check_monotone: bool = False) -> MorphResult:
    """Optimal-step NICP with per-vertex affine transforms.

    `template_lms` may be a :class:`LandmarkSet` (mapped to nearest template
    vertices) or an index array. With ``check_monotone`` every solve also
    verifies that the cost at fixed correspondences did not increase.
    """
    lm_idx, ul, tgt = _prepare(template, target, template_lms, target_lms, cfg)
    prob = _NicpProblem(template, lm_idx, cfg.gamma)
    x = prob.identity()
    diags = []
    cur = template
    for n in range(cfg.n_iters):
        alpha, beta = cfg.alpha(n), cfg.beta(n)
        for j in range(cfg.max_inner):
            corr = find_correspondences(cur, tgt, cfg.normal_compat_max_deg)
            what = f"nicp_affine outer {n} inner {j}"
            x_new = prob.solve(alpha, corr.weights, corr.points, beta, ul, what)
            e_new = prob.energy(x_new, alpha, corr.weights, corr.points, beta, ul)
            rec = {"outer": n, "inner": j, "alpha": alpha, "beta": beta,
                   "validity": corr.validity_ratio, **e_new}
            if check_monotone:
                e_old = prob.energy(x, alpha, corr.weights, corr.points, beta, ul)["total"]
                rec["total_before"] = e_old
                if e_new["total"] > e_old * (1 + 1e-9) + 1e-12:
                    raise NumericalError(f"{what}: cost increased {e_old!r} -> {e_new['total']!r}")
            change = float(np.linalg.norm(x_new - x))
            rec["change"] = change
            diags.append(rec)
            x = x_new
            cur = template.with_vertices(prob.D @ x)
            if change < cfg.inner_exit_eps:
                break
    return MorphResult(cur, "nicp-a", diags)


def nicp_translation(template: TriMesh, target, template_lms, target_lms,
                     cfg: NicpConfig = NicpConfig(), check_monotone: bool = False) -> MorphResult:
    """NICP with one translation per template vertex."""
    lm_idx, ul, tgt = _prepare(template, target, template_lms, target_lms, cfg)
    v0 = template.vertices
    p = len(v0)
    inc = meshops.incidence_matrix(template)
    lap = (inc.T @ inc).tocsr()
    sel = sparse.csr_matrix((np.ones(len(lm_idx)), (np.arange(len(lm_idx)), lm_idx)), shape=(len(lm_idx), p))
    x = np.zeros((p, 3))
    diags = []
    cur = template

    def energy(x, alpha, w, u, beta):
        es = float(np.sum((alpha * (inc @ x)) ** 2))
        ed = float(np.sum((w[:, None] * (x - (u - v0))) ** 2))
        el = float(np.sum((beta * (sel @ x - (ul - v0[lm_idx]))) ** 2))
        return {"stiffness": es, "data": ed, "landmark": el, "total": es + ed + el}

    for n in range(cfg.n_iters):
        alpha, beta = cfg.alpha(n), cfg.beta(n)
        for j in range(cfg.max_inner):
            corr = find_correspondences(cur, tgt, cfg.normal_compat_max_deg)
            w = corr.weights
            what = f"nicp_translation outer {n} inner {j}"
            if not np.any(w > 0) and beta == 0:
                raise NumericalError(f"{what}: no valid correspondences and no landmark term")
            data = sparse.diags(w ** 2) + beta ** 2 * (sel.T @ sel)
            rhs = (w ** 2)[:, None] * (corr.points - v0) + beta ** 2 * (sel.T @ (ul - v0[lm_idx]))
            x_new = solve_regularised(lap, alpha, data, rhs, 1, what)
            e_new = energy(x_new, alpha, w, corr.points, beta)
            rec = {"outer": n, "inner": j, "alpha": alpha, "beta": beta,
                   "validity": corr.validity_ratio, **e_new}
            if check_monotone:
                e_old = energy(x, alpha, w, corr.points, beta)["total"]
                rec["total_before"] = e_old
                if e_new["total"] > e_old * (1 + 1e-9) + 1e-12:
                    raise NumericalError(f"{what}: cost increased {e_old!r} -> {e_new['total']!r}")
            change = float(np.linalg.norm(x_new - x))
            rec["change"] = change
            diags.append(rec)
            x = x_new
            cur = template.with_vertices(v0 + x)
            if change < cfg.inner_exit_eps:
                break
    return MorphResult(cur, "nicp-t", diags)


# ---------------------------------------------------------------------------
# Laplace-Beltrami regularised projection

def lbrp_project(template: TriMesh, L0: sparse.spmatrix, target, lam: float,
                 corr: CorrespondenceSet, rest: np.ndarray | None = None) -> TriMesh:
    """One regularised projection onto the valid correspondences.

    Minimises ``|lam L0 (X - X0)|^2 + |S_X X - S_Y Y|^2`` where `X0` are the
    vertices of `rest` (default: `template`) and the selectors keep the
    valid entries of `corr`. Solved for the displacement ``X - X0`` so the
    right-hand side never carries the large ``lam**2`` factor.
    """
    x0 = template.vertices if rest is None else np.asarray(rest, float)
    valid = corr.weights > 0
    if not valid.any():
        raise NumericalError("lbrp_project: no valid correspondences")
    p = len(x0)
    s = sparse.diags(valid.astype(float))
    rhs = s @ (np.where(valid[:, None], corr.points, 0.0) - np.where(valid[:, None], x0, 0.0))
    delta = solve_regularised((L0.T @ L0).tocsr(), lam, s, rhs, 1, "lbrp_project")
    if delta.shape != (p, 3):
        raise NumericalError("lbrp_project: unexpected solution shape")
    return template.with_vertices(x0 + delta)


def two_stage_lbrp(template: TriMesh, target, template_lms=None, target_lms=None,
                   cfg: LbrpConfig = LbrpConfig()) -> MorphResult:
    """Coarse-then-fine projection: stiffness ``lambda1`` then ``lambda2``.

    The Laplacian always comes from the undeformed template. When landmarks
    are given (and ``cfg.use_landmarks``) the landmark vertices are pinned
    to the target landmarks as always-valid correspondences.
    """
    tgt = target if isinstance(target, TargetSurface) else TargetSurface(target)
    L0 = meshops.cotangent_laplacian(template)
    lm_idx = ul = None
    if cfg.use_landmarks and template_lms is not None and target_lms is not None:
        lm_idx, ul, _ = _prepare(template, tgt, template_lms, target_lms, cfg)
    diags = []
    cur = template
    for stage, lam in enumerate((cfg.lambda1, cfg.lambda2), 1):
        corr = find_correspondences(cur, tgt, cfg.normal_compat_max_deg)
        if lm_idx is not None:
            corr.points = corr.points.copy()
            corr.points[lm_idx] = ul
            corr.weights = corr.weights.copy()
            corr.weights[lm_idx] = 1.0
        cur = lbrp_project(template, L0, tgt, lam, corr, rest=template.vertices)
        diags.append({"stage": stage, "lambda": lam, "validity": corr.validity_ratio,
                      "v2nn": v2nn_distance(cur, tgt)})
    return MorphResult(cur, "2s-lbrp", diags)


MORPH_METHODS = {"nicp-a": nicp_affine, "nicp-t": nicp_translation, "2s-lbrp": two_stage_lbrp}


# ---------------------------------------------------------------------------
# metrics

def landmark_error(morphed: TriMesh, template_lm_indices, target_lms: LandmarkSet) -> float:
    """Mean Euclidean distance between landmark vertices and target landmarks."""
    idx = np.asarray(template_lm_indices)
    pts = target_lms.array() if isinstance(target_lms, LandmarkSet) else np.asarray(target_lms, float)
    if len(idx) != len(LANDMARK_NAMES) or len(pts) != len(LANDMARK_NAMES):
        raise ValidationError("landmark_error needs all ten landmarks")
    return float(np.linalg.norm(morphed.vertices[idx] - pts, axis=1).mean())


def v2nn_distance(morphed: TriMesh, target) -> float:
    """Mean distance from each morphed vertex to the target surface."""
    idx = target.index if isinstance(target, TargetSurface) else SurfaceIndex(target)
    d, _, _, _ = idx.query(morphed.vertices)
    return float(d.mean())


def surface_normal_deviation(morphs_by_class, align: bool = True, per_class: bool = False):
    """Per-class normal consistency of corresponded morphs, in degrees.

    For each class the morphs are rigidly aligned (GPA), the per-vertex
    class mean normal is formed, and the angles of each morph's vertex
    normals to it are averaged over morphs and vertices. Classes are
    combined weighted by their member counts. `align=False` skips GPA.
    With `per_class` the per-class scores are returned as well.
    """
    total, weight = 0.0, 0
    scores = {}
    for label, morphs in morphs_by_class.items():
        meshes = [m.morphed if isinstance(m, MorphResult) else m for m in morphs]
        if len(meshes) < 2:
            warnings.warn(f"surface_normal_deviation: class {label} has < 2 members, skipped",
                          RuntimeWarning, stacklevel=2)
            continue
        faces = meshes[0].faces
        pts = np.stack([m.vertices for m in meshes])
        if align:
            pts = gpa(pts).aligned
        normals = np.stack([meshops.vertex_normals(TriMesh(x, faces)) for x in pts])
        mean_n = normals.sum(axis=0)
        mean_n /= np.maximum(np.linalg.norm(mean_n, axis=1, keepdims=True), 1e-300)
        cos = np.clip(np.einsum("kij,ij->ki", normals, mean_n), -1.0, 1.0)
        score = float(np.degrees(np.arccos(cos)).mean())
        scores[label] = score
        total += score * len(meshes)
        weight += len(meshes)
    if weight == 0:
        raise ValidationError("no class with at least two morphs")
    return (total / weight, scores) if per_class else total / weight
