"""Weighted-PCA point distribution models.

A model stores the mean shape, M3-orthonormal components and their
variances. Shapes are written as ``x = mean + V diag(sqrt(lam)) alpha`` so a
coefficient of 1 is one standard deviation along that component.
"""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse

from . import mesh as meshops
from .align import gpa, rigid_align
from .errors import ChecksumError, MeshFormatError, NumericalError, ValidationError
from .scan import DiagnosisClass, LandmarkSet

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
EIG_RTOL = 1e-12

# component counts of the published model release
RELEASE_PROFILE = {"full": 100, "control": 30, "sagittal": 30, "metopic": 25, "coronal": 15}


def _ro(a, dtype=np.float64):
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ShapeModel:
    """Point distribution model.

    Attributes
    ----------
    mean : (3p,) array
        Mean shape, xyz interleaved per vertex.
    components : (3p, k) array
        M3-orthonormal principal directions.
    eigenvalues : (k,) array
        Variances in mm^2, descending.
    mass : (p, p) sparse matrix
        Mass matrix of the (masked) template used at build time.
    faces : (f, 3) int array
        Topology of the modelled region.
    vertex_mask : (p,) int array or None
        Template vertex index of each model vertex for sub-region models.
    class_label : DiagnosisClass or None
    n_train : int
        Number of shapes the model was built from.
    """

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    mass: sparse.csr_matrix
    faces: np.ndarray
    vertex_mask: np.ndarray | None = None
    class_label: DiagnosisClass | None = None
    n_train: int = 0

    def __post_init__(self):
        mean = _ro(self.mean).ravel()
        comps = _ro(self.components).reshape(len(mean), -1)
        lam = _ro(self.eigenvalues).ravel()
        if len(mean) % 3:
            raise ValidationError("mean length must be a multiple of 3")
        if comps.shape[1] != len(lam):
            raise ValidationError("components and eigenvalues disagree on k")
        if np.any(lam <= 0) or np.any(np.diff(lam) > 0):
            raise ValidationError("eigenvalues must be positive and descending")
        p = len(mean) // 3
        mass = sparse.csr_matrix(self.mass)
        if mass.shape != (p, p):
            raise ValidationError("mass matrix does not match the vertex count")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "faces", _ro(self.faces, np.int64).reshape(-1, 3))
        if self.vertex_mask is not None:
            vm = _ro(self.vertex_mask, np.int64).ravel()
            if len(vm) != p:
                raise ValidationError("vertex_mask length must equal the model vertex count")
            object.__setattr__(self, "vertex_mask", vm)
        if self.class_label is not None:
            object.__setattr__(self, "class_label", DiagnosisClass.parse(self.class_label))

    @property
    def p(self) -> int:
        return len(self.mean) // 3

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    @property
    def mass_expanded(self) -> sparse.csr_matrix:
        return meshops.expand_mass_matrix(self.mass)

    @property
    def mean_shape(self) -> np.ndarray:
        return self.mean.reshape(-1, 3)

    def restrict(self, shape) -> np.ndarray:
        """Pick the model's vertices out of a full-template shape.

        Shapes that already have the model's vertex count pass through.
        """
        x = np.asarray(shape, dtype=float)
        lead = x.shape[:-2]
        x = x.reshape(*lead, -1, 3)
        if x.shape[-2] == self.p:
            return x
        if self.vertex_mask is None or x.shape[-2] <= self.vertex_mask.max():
            raise ValidationError(f"shape has {x.shape[-2]} vertices, model has {self.p}")
        return x[..., self.vertex_mask, :]


# ---------------------------------------------------------------------------
# building

def _sign_fix(v: np.ndarray) -> np.ndarray:
    """Flip columns so their largest-magnitude entry is positive."""
    if v.shape[1] == 0:
        return v
    idx = np.argmax(np.abs(v), axis=0)
    s = np.sign(v[idx, np.arange(v.shape[1])])
    s[s == 0] = 1.0
    return v * s


def _ritz_refine(v, xzm, m3):
    """Re-orthonormalise `v` in the M3 inner product and redo the eigensolve.

    Columns that belong to tiny Gram eigenvalues come out of the Gram trick
    with orthogonality errors of order eps * lam_1 / lam_i; one
    Rayleigh-Ritz pass on their span restores M3-orthonormality to
    rounding level without changing the subspace.
    """
    s = v.T @ (m3 @ v)
    chol = np.linalg.cholesky(0.5 * (s + s.T))
    v1 = np.linalg.solve(chol, v.T).T
    y = v1.T @ (m3 @ xzm)
    mu, q = np.linalg.eigh(y @ y.T)
    order = np.argsort(mu)[::-1]
    mu, q = mu[order], q[:, order]
    good = mu > EIG_RTOL * mu[0]
    return v1 @ q[:, good], mu[good]


def cranial_mask(vertices, landmarks: LandmarkSet, offset_mm: float = 10.0) -> np.ndarray:
    """Indices of the vertices above the cranial base plane.

    The plane passes through t_l, t_r and se and is shifted `offset_mm`
    superiorly; "superior" is the side facing away from the chin (gn).
    """
    v = np.asarray(vertices, dtype=float)
    a, b, c = landmarks["t_l"], landmarks["t_r"], landmarks["se"]
    n = np.cross(b - a, c - a)
    nn = np.linalg.norm(n)
    if nn == 0:
        raise ValidationError("t_l, t_r and se are collinear")
    n /= nn
    if n @ (landmarks["gn"] - a) > 0:
        n = -n
    return np.flatnonzero((v - a) @ n > offset_mm)


def _restrict_mass(mass, mask):
    m = sparse.csr_matrix(mass)
    return m[mask][:, mask].tocsr()


def build_model(shapes, mass, faces=None, mask=None, keep=None, align: bool = False,
                class_label=None) -> ShapeModel:
    """Weighted PCA of corresponded shapes.

    Parameters
    ----------
    shapes : array_like, shape (n, p, 3)
        Corresponded shapes, normally GPA-aligned already.
    mass : sparse (p, p)
        Template mass matrix.
    faces : (f, 3) int array, optional
        Template faces; restricted to the mask when one is given.
    mask : int array, optional
        Template vertices to keep. The data and mass matrix are cut down to
        these vertices and GPA is rerun on the cut data.
    keep : int or float, optional
        Component count (int) or variance fraction in (0, 1] (float).
    align : bool
        Run rigid GPA before the decomposition.
    """
    x = np.asarray(shapes, dtype=float)
    if x.ndim == 2:
        x = x.reshape(len(x), -1, 3)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValidationError("shapes must have shape (n, p, 3)")
    if len(x) < 2:
        raise ValidationError("build_model needs at least two shapes")
    if not np.all(np.isfinite(x)):
        raise ValidationError("build_model: non-finite coordinates")
    mass = sparse.csr_matrix(mass)
    if mass.shape != (x.shape[1], x.shape[1]):
        raise ValidationError("mass matrix does not match the vertex count")
    faces = np.zeros((0, 3), np.int64) if faces is None else np.asarray(faces, np.int64)
    if mask is not None:
        mask = np.unique(np.asarray(mask, dtype=np.int64))
        if len(mask) == 0:
            raise ValidationError("empty vertex mask")
        sub, _ = meshops.submesh(meshops.TriMesh(x[0], faces), mask)
        faces = sub.faces
        x = x[:, mask]
        mass = _restrict_mass(mass, mask)
        align = True
    if align:
        x = gpa(x).aligned
    n, p, _ = x.shape
    mean = x.mean(axis=0).ravel()
    xzm = (x.reshape(n, -1) - mean).T                 # (3p, n)
    m3 = meshops.expand_mass_matrix(mass)
    g = xzm.T @ (m3 @ xzm)
    g = 0.5 * (g + g.T)
    lam_g, u = np.linalg.eigh(g)
    order = np.argsort(lam_g)[::-1]
    lam_g, u = lam_g[order], u[:, order]
    top = lam_g[0] if len(lam_g) else 0.0
    if top > 0 and lam_g[-1] < -1e-8 * top:
        warnings.warn("weighted Gram matrix has negative eigenvalues (indefinite mass matrix?); "
                      "they are dropped", RuntimeWarning, stacklevel=2)
    good = lam_g > EIG_RTOL * top if top > 0 else np.zeros(len(lam_g), bool)
    lam_g, u = lam_g[good], u[:, good]
    v = xzm @ (u / np.sqrt(lam_g))
    if len(lam_g):
        v, lam_g = _ritz_refine(v, xzm, m3)
    v = _sign_fix(v)
    lam = lam_g / (n - 1)
    model = ShapeModel(mean, v, lam, mass, faces, mask, class_label, n)
    if keep is not None:
        model = truncate(model, keep)
    return model


# ---------------------------------------------------------------------------
# using a model

def reconstruct(model: ShapeModel, alpha) -> np.ndarray:
    """Shape (p, 3) for coefficients `alpha`; missing trailing entries are 0."""
    a = np.asarray(alpha, dtype=float).ravel()
    if len(a) > model.k:
        raise ValidationError(f"{len(a)} coefficients for a model with {model.k} components")
    j = len(a)
    x = model.mean + model.components[:, :j] @ (np.sqrt(model.eigenvalues[:j]) * a)
    return x.reshape(-1, 3)


def project(model: ShapeModel, shape, n_components: int | None = None) -> np.ndarray:
    """M3-weighted least-squares coefficients of `shape`.

    The shape must already be in the model's frame (see :func:`align_to_model`).
    Accepts a single (p, 3) shape or a stack (n, p, 3).
    """
    x = model.restrict(shape)
    single = x.ndim == 2
    x = x.reshape(-1, 3 * model.p)
    j = model.k if n_components is None else int(n_components)
    if not 0 <= j <= model.k:
        raise ValidationError(f"n_components must lie in [0, {model.k}]")
    lam = model.eigenvalues[:j]
    if np.any(lam <= 0):
        raise NumericalError("cannot project onto a zero-variance component")
    d = (x - model.mean).T
    a = (model.components[:, :j].T @ (model.mass_expanded @ d)).T / np.sqrt(lam)
    return a[0] if single else a


def align_to_model(model: ShapeModel, shape) -> np.ndarray:
    """Rigidly align one shape (or a stack) to the model mean."""
    x = model.restrict(shape)
    if x.ndim == 2:
        return rigid_align(x, model.mean_shape).apply(x)
    return np.stack([rigid_align(s, model.mean_shape).apply(s) for s in x])


def sample(model: ShapeModel, rng_seed: int, clamp_sigma: float = 3.0, n: int | None = None):
    """Random coefficients ``N(0, I)`` clipped to ``+-clamp_sigma`` and their shapes.

    Returns ``(alpha, shape)``; with `n` given both carry a leading axis.
    """
    rng = np.random.default_rng(rng_seed)
    size = (model.k,) if n is None else (int(n), model.k)
    a = np.clip(rng.standard_normal(size), -clamp_sigma, clamp_sigma)
    if n is None:
        return a, reconstruct(model, a)
    return a, np.stack([reconstruct(model, ai) for ai in a])


def compactness(model: ShapeModel, j=None):
    """Fraction of the model's variance in the first `j` components.

    With `j` omitted the whole curve ``j = 1..k`` is returned.
    """
    lam = model.eigenvalues
    total = lam.sum()
    curve = np.cumsum(lam) / total if total > 0 else np.ones(len(lam))
    if j is None:
        return curve
    j = int(j)
    if not 0 <= j <= model.k:
        raise ValidationError(f"j must lie in [0, {model.k}]")
    return 0.0 if j == 0 else float(curve[j - 1])


def truncate(model: ShapeModel, keep) -> ShapeModel:
    """Keep the leading components.

    `keep` is a component count (int) or a variance fraction (float in
    (0, 1]); a fraction keeps the smallest ``j`` whose compactness reaches it.
    """
    if isinstance(keep, (bool, np.bool_)):
        raise ValidationError("keep must be a count or a fraction")
    if isinstance(keep, (int, np.integer)):
        j = int(keep)
        if j <= 0:
            raise ValidationError("component count must be positive")
        if j > model.k:
            raise ValidationError(f"cannot keep {j} components of {model.k}")
    else:
        frac = float(keep)
        if not 0 < frac <= 1:
            raise ValidationError("variance fraction must lie in (0, 1]")
        curve = compactness(model)
        j = int(np.searchsorted(curve, frac - 1e-12) + 1)
        j = min(j, model.k)
    return replace(model, components=model.components[:, :j], eigenvalues=model.eigenvalues[:j])


def release_truncate(model: ShapeModel, name: str) -> ShapeModel:
    """Truncate to the component count of the release profile entry `name`."""
    try:
        j = RELEASE_PROFILE[name.lower()]
    except KeyError:
        raise ValidationError(f"no release profile entry {name!r}") from None
    if model.k < j:
        warnings.warn(f"model has only {model.k} components, release profile asks for {j}",
                      RuntimeWarning, stacklevel=2)
        return model
    return truncate(model, j)


# ---------------------------------------------------------------------------
# model quality

def _per_vertex_error(a, b) -> np.ndarray:
    return np.linalg.norm(np.asarray(a) - np.asarray(b), axis=-1).mean(axis=-1)


def generalization(shapes, mass, j, faces=None, align: bool = False):
    """Leave-one-out reconstruction error in mm.

    For each shape a model is built from the others, the held-out shape is
    projected onto its first `j` components and reconstructed, and the
    mean per-vertex Euclidean error is recorded. `j` may be an int or a
    sequence; the result matches. With ``align=True`` every LOO model runs
    GPA and the held-out shape is rigidly aligned to its mean.
    """
    x = np.asarray(shapes, dtype=float)
    n = len(x)
    if n < 3:
        raise ValidationError("generalization needs at least three shapes")
    js = np.atleast_1d(np.asarray(j, dtype=int))
    errs = np.zeros((n, len(js)))
    for i in range(n):
        rest = np.delete(x, i, axis=0)
        m = build_model(rest, mass, faces, align=align)
        held = align_to_model(m, x[i]) if align else x[i]
        a = project(m, held)
        for c, jj in enumerate(js):
            jj = min(int(jj), m.k)
            rec = reconstruct(m, a[:jj])
            errs[i, c] = _per_vertex_error(rec, held)
    out = errs.mean(axis=0)
    return float(out[0]) if np.ndim(j) == 0 else out


def specificity(model: ShapeModel, shapes, j, n_samples: int = 100, seed: int = 0):
    """Mean distance from random model instances to the closest training shape.

    Instances use the first `j` components (int or sequence). Distances are
    mean per-vertex Euclidean errors; `shapes` must be in the model frame.
    """
    train = model.restrict(shapes).reshape(-1, model.p, 3)
    js = np.atleast_1d(np.asarray(j, dtype=int))
    a, _ = sample(model, seed, n=n_samples)
    out = np.zeros(len(js))
    for c, jj in enumerate(js):
        jj = min(int(jj), model.k)
        d = []
        for ai in a:
            inst = reconstruct(model, ai[:jj])
            d.append(_per_vertex_error(train, inst).min())
        out[c] = float(np.mean(d))
    return float(out[0]) if np.ndim(j) == 0 else out


# ---------------------------------------------------------------------------
# persistence

def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, arr, dtype) -> None:
    np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tofile(path)


def _read(path: Path, dtype) -> np.ndarray:
    try:
        return np.fromfile(path, dtype=np.dtype(dtype).newbyteorder("<"))
    except OSError as exc:
        raise MeshFormatError(f"{path}: {exc}") from exc


def save_model(model: ShapeModel, directory) -> Path:
    """Write the model container (manifest plus raw little-endian arrays)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    upper = sparse.triu(model.mass, k=1).tocoo()
    order = np.lexsort((upper.col, upper.row))
    files = {
        "mean.f64": (model.mean, "f8"),
        "components.f64": (model.components, "f8"),
        "eigenvalues.f64": (model.eigenvalues, "f8"),
        "mass_diag.f64": (model.mass.diagonal(), "f8"),
        "mass_offdiag.idx": (np.stack([upper.row[order], upper.col[order]], axis=1), "u4"),
        "mass_offdiag.f64": (upper.data[order], "f8"),
        "faces.u32": (model.faces, "u4"),
    }
    if model.vertex_mask is not None:
        files["mask.u32"] = (model.vertex_mask, "u4")
    for name, (arr, dt) in files.items():
        _write(d / name, arr, dt)
    manifest = {
        "format_version": FORMAT_VERSION,
        "p": model.p,
        "k": model.k,
        "n_train": int(model.n_train),
        "class_label": None if model.class_label is None else model.class_label.label,
        "vertex_mask": model.vertex_mask is not None,
        "n_faces": int(len(model.faces)),
        "n_mass_offdiag": int(len(order)),
        "sha256": {name: _sha(d / name) for name in sorted(files)},
    }
    _write_manifest(d, manifest)
    return d


def _write_manifest(d: Path, manifest: dict) -> None:
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def add_overlay(directory, files: dict, info: dict | None = None) -> None:
    """Store extra checksummed arrays in an existing model container.

    `files` maps file names to ``(array, dtype)``; `info` is kept in the
    manifest under ``"overlay"``.
    """
    d = Path(directory)
    manifest = read_manifest(d)
    for name, (arr, dt) in files.items():
        _write(d / name, arr, dt)
        manifest["sha256"][name] = _sha(d / name)
    manifest["overlay"] = dict(info or {}, files=sorted(files))
    _write_manifest(d, manifest)


def read_manifest(directory) -> dict:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except OSError as exc:
        raise MeshFormatError(f"{d}: cannot read manifest ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise MeshFormatError(f"{d}: invalid manifest ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise MeshFormatError(f"{d}: unsupported format_version {manifest.get('format_version')!r}")
    return manifest


def verified_file(directory, manifest: dict, name: str, dtype) -> np.ndarray:
    """Read one checksummed array from a model container."""
    path = Path(directory) / name
    want = manifest["sha256"].get(name)
    if want is None:
        raise MeshFormatError(f"{name} is not listed in the manifest")
    if not path.exists():
        raise MeshFormatError(f"{path}: missing")
    if _sha(path) != want:
        raise ChecksumError(f"{path}: checksum mismatch")
    return _read(path, dtype)


def load_model(directory) -> ShapeModel:
    """Read a container written by :func:`save_model`."""
    d = Path(directory)
    man = read_manifest(d)
    p, k = int(man["p"]), int(man["k"])

    def get(name, dt):
        return verified_file(d, man, name, dt)

    mean = get("mean.f64", "f8")
    comps = get("components.f64", "f8")
    lam = get("eigenvalues.f64", "f8")
    if mean.size != 3 * p or comps.size != 3 * p * k or lam.size != k:
        raise MeshFormatError(f"{d}: array sizes disagree with the manifest")
    diag = get("mass_diag.f64", "f8")
    idx = get("mass_offdiag.idx", "u4").reshape(-1, 2).astype(np.int64)
    off = get("mass_offdiag.f64", "f8")
    if len(idx) != len(off) or len(diag) != p:
        raise MeshFormatError(f"{d}: inconsistent mass matrix files")
    rows = np.concatenate([np.arange(p), idx[:, 0], idx[:, 1]])
    cols = np.concatenate([np.arange(p), idx[:, 1], idx[:, 0]])
    mass = sparse.coo_matrix((np.concatenate([diag, off, off]), (rows, cols)), shape=(p, p)).tocsr()
    faces = get("faces.u32", "u4").reshape(-1, 3).astype(np.int64)
    mask = get("mask.u32", "u4").astype(np.int64) if man.get("vertex_mask") else None
    label = man.get("class_label")
    return ShapeModel(mean, comps.reshape(3 * p, k), lam, mass, faces, mask,
                      None if label is None else DiagnosisClass.parse(label), int(man["n_train"]))
