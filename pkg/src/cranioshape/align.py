"""Landmark alignment, midsagittal mirroring and rigid generalized Procrustes."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .mesh import TriMesh
from .scan import MIDLINE_LANDMARKS, PAIRED_LANDMARKS, LandmarkSet, Scan

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * R @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-10 or np.linalg.det(r) < 0:
            raise ValidationError("rotation must be orthonormal with det +1")
        if not self.scale > 0:
            raise ValidationError("scale must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return self.scale * pts @ self.rotation.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(rt, -(rt @ self.translation) / self.scale, 1.0 / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self o other`` (apply `other` first)."""
        return SimilarityTransform(self.rotation @ other.rotation,
                                   self.scale * self.rotation @ other.translation + self.translation,
                                   self.scale * other.scale)


@dataclass(frozen=True)
class RigidTransform(SimilarityTransform):
    """Rotation plus translation; the scale is fixed at 1."""

    def __post_init__(self):
        super().__post_init__()
        if self.scale != 1.0:
            raise ValidationError("rigid transforms have unit scale")


def _kabsch(src, dst, allow_scale: bool):
    """Optimal rotation (and scale) mapping centred `src` onto centred `dst`."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    u, s, vt = np.linalg.svd(b.T @ a)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    corr = np.diag([1.0, 1.0, d])
    r = u @ corr @ vt
    scale = 1.0
    if allow_scale:
        var = np.sum(a * a)
        if var == 0:
            raise ValidationError("degenerate source configuration")
        scale = float(np.sum(s * np.diag(corr)) / var)
    t = mu_d - scale * r @ mu_s
    return r, t, scale


def _check_config(pts):
    c = pts - pts.mean(axis=0)
    sv = np.linalg.svd(c, compute_uv=False)
    if len(pts) < 3 or sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise ValidationError("point configuration is collinear or degenerate")


def procrustes_similarity(src: LandmarkSet, dst: LandmarkSet) -> SimilarityTransform:
    """Least-squares similarity transform taking `src` landmarks onto `dst`."""
    a = src.array() if isinstance(src, LandmarkSet) else np.asarray(src, dtype=float)
    b = dst.array() if isinstance(dst, LandmarkSet) else np.asarray(dst, dtype=float)
    if a.shape != b.shape:
        raise ValidationError("landmark sets differ in size")
    _check_config(a)
    _check_config(b)
    r, t, s = _kabsch(a, b, allow_scale=True)
    return SimilarityTransform(r, t, s)


def apply_similarity(t: SimilarityTransform, mesh: TriMesh) -> TriMesh:
    return mesh.with_vertices(t.apply(mesh.vertices))


# ---------------------------------------------------------------------------
# mirroring

def midsagittal_plane(lms: LandmarkSet) -> tuple[np.ndarray, np.ndarray]:
    """Total-least-squares plane through the pair midpoints and midline points.

    Returns ``(point_on_plane, unit_normal)`` with the normal oriented along
    ``t_r - t_l``.
    """
    pts = [0.5 * (lms[a] + lms[b]) for a, b in PAIRED_LANDMARKS]
    pts += [lms[n] for n in MIDLINE_LANDMARKS]
    pts = np.array(pts)
    centre = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - centre)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise NumericalError("midsagittal plane fit is rank deficient")
    normal = vt[2]
    if normal @ (lms["t_r"] - lms["t_l"]) < 0:
        normal = -normal
    return centre, normal


def reflect_points(points, centre, normal) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    return pts - 2.0 * ((pts - centre) @ normal)[..., None] * normal


def mirror_scan(scan: Scan, suffix: str = "_mirrored") -> Scan:
    """Reflect a scan across its landmark-fitted midsagittal plane.

    Face winding is reversed so normals stay outward and left/right landmark
    names are exchanged. Mirroring a mirrored scan returns the original
    geometry and identity.
    """
    centre, normal = midsagittal_plane(scan.landmarks)
    verts = reflect_points(scan.mesh.vertices, centre, normal)
    mesh = TriMesh(verts, scan.mesh.faces[:, ::-1], scan.mesh.uv)
    lms = LandmarkSet.from_array(reflect_points(scan.landmarks.array(), centre, normal)).swapped_pairs()
    if scan.mirrored:
        sid = scan.twin_id
        return Scan(mesh, lms, scan.diagnosis, sid, scan.age_days, False, scan.subject_id, dict(scan.meta))
    sid = scan.subject_id + suffix
    return Scan(mesh, lms, scan.diagnosis, sid, scan.age_days, True, scan.subject_id, dict(scan.meta))


# ---------------------------------------------------------------------------
# GPA

@dataclass
class GPAResult:
    aligned: np.ndarray            # (n, p, 3)
    mean: np.ndarray               # (p, 3)
    transforms: list               # RigidTransform per input shape
    n_iter: int
    converged: bool
    objective: list                # sum of squared distances to the mean, per iteration


def rigid_align(shape, reference) -> RigidTransform:
    """Rotation + translation taking `shape` onto `reference` (Kabsch)."""
    r, t, _ = _kabsch(np.asarray(shape, float), np.asarray(reference, float), allow_scale=False)
    return RigidTransform(r, t)


def gpa(shapes, tol: float = 1e-6, max_iter: int = 50) -> GPAResult:
    """Rigid generalized Procrustes analysis (rotation + translation only).

    Scale is deliberately left untouched. The mean starts as the first shape
    (centred at the origin) and the loop stops once the mean moves less than
    `tol` mm per vertex on average.
    """
    x = np.asarray(shapes, dtype=float)
    if x.ndim != 3 or x.shape[0] < 2 or x.shape[2] != 3:
        raise ValidationError("gpa needs at least two (p, 3) shapes of equal size")
    if not np.all(np.isfinite(x)):
        raise ValidationError("gpa: non-finite coordinates")
    n = len(x)
    mean = x[0] - x[0].mean(axis=0)
    aligned = x.copy()
    transforms = [RigidTransform()] * n
    objective = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        for i in range(n):
            transforms[i] = rigid_align(x[i], mean)
            aligned[i] = transforms[i].apply(x[i])
        new_mean = aligned.mean(axis=0)
        # the mean of rigidly aligned shapes can drift off the origin; pin it
        new_mean -= new_mean.mean(axis=0)
        objective.append(float(np.sum((aligned - new_mean) ** 2)))
        move = np.linalg.norm(new_mean - mean, axis=1).mean()
        mean = new_mean
        if move < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"gpa did not converge in {max_iter} iterations", RuntimeWarning, stacklevel=2)
    # final pass so the returned shapes are aligned to the returned mean
    for i in range(n):
        transforms[i] = rigid_align(x[i], mean)
        aligned[i] = transforms[i].apply(x[i])
    return GPAResult(aligned, mean, list(transforms), it, converged, objective)
