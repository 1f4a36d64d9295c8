"""Parametric infant-head phantoms with the four diagnosis patterns.

Heads are star-shaped surfaces ``x(u) = r(u) * u`` over unit directions
``u``. The radius is a superellipsoid multiplied by smooth bump fields for
facial features and by a class-specific deformation field. Axes: +x is the
patient's left, +y anterior, +z superior; the origin sits inside the head.

Every phantom is triangulated independently (seeded point set on the
sphere, convex hull), so two phantoms never share vertex correspondence.
The ten landmarks are inserted as mesh vertices and therefore lie exactly on
the surface.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import ConvexHull, cKDTree

from .align import midsagittal_plane
from .errors import ValidationError
from .mesh import TriMesh
from .scan import LANDMARK_NAMES, DiagnosisClass, LandmarkSet, Scan


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


LANDMARK_DIRECTIONS = {
    "t_l": _unit([1.0, 0.02, -0.12]),
    "t_r": _unit([-1.0, 0.02, -0.12]),
    "se": _unit([0.0, 1.0, 0.02]),
    "ex_l": _unit([0.38, 1.0, 0.0]),
    "ex_r": _unit([-0.38, 1.0, 0.0]),
    "sn": _unit([0.0, 1.0, -0.33]),
    "ls": _unit([0.0, 1.0, -0.45]),
    "obs_l": _unit([1.0, -0.03, 0.02]),
    "obs_r": _unit([-1.0, -0.03, 0.02]),
    "gn": _unit([0.0, 0.8, -0.85]),
}

_SHAPE = dict(half_width=0.43, half_length=0.5, half_height=0.42, exponent=2.2)


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one phantom head.

    `resolution` is a subdivision level: the surface gets about
    ``10 * 4**resolution + 2`` vertices (non-integer levels are allowed).
    `face` holds three facial shape factors in [-1, 1] (nose, chin, ears)
    that vary independently of the cranial deformation. `side` selects the
    affected side (+1 left, -1 right) for the asymmetric patterns and is
    drawn from the seed when omitted. `mesh_seed` overrides the seed used
    for the triangulation only.
    """

    diagnosis: DiagnosisClass = DiagnosisClass.CONTROL
    severity: float = 0.0
    size_mm: float = 140.0
    resolution: float = 3.0
    jitter_mm: float = 0.0
    seed: int = 0
    side: int | None = None
    face: tuple = (0.0, 0.0, 0.0)
    mesh_seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.severity <= 1.0:
            raise ValidationError("severity must lie in [0, 1]")
        if self.resolution < 2:
            raise ValidationError("resolution must be >= 2")
        if self.size_mm <= 0 or self.jitter_mm < 0:
            raise ValidationError("size_mm must be positive and jitter_mm non-negative")
        object.__setattr__(self, "diagnosis", DiagnosisClass.parse(self.diagnosis))
        object.__setattr__(self, "face", tuple(float(f) for f in self.face))
        if len(self.face) != 3:
            raise ValidationError("face needs three factors")

    @property
    def n_vertices(self) -> int:
        return int(round(10 * 4 ** self.resolution)) + 2


# ---------------------------------------------------------------------------
# radial field

def _bump(u, centre, width):
    d2 = np.sum((u - _unit(centre)) ** 2, axis=-1)
    return np.exp(-d2 / (2 * width ** 2))


def _smoothstep(x):
    return 0.5 * (1.0 + np.tanh(x))


def _cranial_weight(u):
    return _smoothstep((u[..., 2] + 0.1) / 0.25)


def _base_log_radius(u, face):
    hw, hl, hh, e = (_SHAPE[k] for k in ("half_width", "half_length", "half_height", "exponent"))
    r = (np.abs(u[..., 0] / hw) ** e + np.abs(u[..., 1] / hl) ** e + np.abs(u[..., 2] / hh) ** e) ** (-1 / e)
    nose, chin, ears = face
    log_r = np.log(r)
    log_r += (0.10 + 0.04 * nose) * _bump(u, [0, 1, -0.25], 0.10)
    log_r += (0.07 + 0.03 * chin) * _bump(u, [0, 0.8, -0.8], 0.16)
    log_r += 0.03 * _bump(u, [0, 1, 0.08], 0.22)
    for sx in (1.0, -1.0):
        log_r += (0.06 + 0.025 * ears) * _bump(u, [sx, -0.1, -0.3], 0.09)
        log_r += 0.03 * _bump(u, [sx * 0.45, 1.0, -0.12], 0.14)   # cheeks
    return log_r


def class_deformation(u, diagnosis: DiagnosisClass, severity: float, side: int) -> np.ndarray:
    """Log-radius offset of the class-specific deformity at directions `u`."""
    u = np.asarray(u, dtype=float)
    ux, uy, uz = u[..., 0], u[..., 1], u[..., 2]
    wc = _cranial_weight(u)
    s = severity
    if diagnosis == DiagnosisClass.SAGITTAL:
        # scaphocephaly: long and narrow
        return s * wc * (0.16 * uy ** 2 - 0.14 * ux ** 2)
    if diagnosis == DiagnosisClass.METOPIC:
        # trigonocephaly: keel-shaped forehead with narrowed temples
        front = np.maximum(uy, 0.0) ** 2 * wc
        return s * front * (0.10 * np.exp(-(ux / 0.2) ** 2) - 0.22 * ux ** 2)
    if diagnosis == DiagnosisClass.CORONAL:
        # unilateral: ipsilateral fronto-orbital flattening, contralateral
        # bossing, plus shortened and heightened vault
        flat = -0.12 * _bump(u, [side * 0.55, 0.7, 0.45], 0.3)
        boss = 0.06 * _bump(u, [-side * 0.55, 0.7, 0.45], 0.3)
        vault = wc * (-0.08 * uy ** 2 + 0.08 * np.maximum(uz, 0.0) ** 2)
        return s * (flat + boss + vault)
    # control: mild positional occipital flattening
    return -0.3 * s * 0.08 * _bump(u, [side * 0.5, -0.8, 0.2], 0.3)


def head_radius(u, spec: PhantomSpec, side: int) -> np.ndarray:
    log_r = _base_log_radius(u, spec.face) + class_deformation(u, spec.diagnosis, spec.severity, side)
    return spec.size_mm * np.exp(log_r)


# ---------------------------------------------------------------------------
# triangulation

def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = np.pi * (1 + 5 ** 0.5) * i
    rho = np.sqrt(1 - z * z)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def _random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def sphere_triangulation(n_vertices: int, seed: int):
    """Seeded near-uniform triangulation of the unit sphere.

    The landmark directions are always vertices ``0..9`` (canonical
    landmark order). Returns ``(directions, faces)`` with outward winding.
    """
    rng = np.random.default_rng(seed)
    lm_dirs = np.array([LANDMARK_DIRECTIONS[n] for n in LANDMARK_NAMES])
    n_free = max(n_vertices - len(lm_dirs), 20)
    pts = _fibonacci_sphere(n_free) @ _random_rotation(rng).T
    spacing = np.sqrt(4 * np.pi / n_free)
    pts = _unit(pts + 0.2 * spacing * rng.standard_normal(pts.shape))
    near = cKDTree(lm_dirs).query(pts)[0] < 0.5 * spacing
    pts = np.vstack([lm_dirs, pts[~near]])
    hull = ConvexHull(pts)
    faces = hull.simplices.astype(np.int64)
    a, b, c = pts[faces[:, 0]], pts[faces[:, 1]], pts[faces[:, 2]]
    outward = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) > 0
    faces[~outward] = faces[~outward][:, ::-1]
    return pts, faces


def _stable_seed(*parts) -> int:
    h = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def generate_phantom(spec: PhantomSpec, subject_id: str | None = None, age_days: int = 180) -> Scan:
    """Build one landmarked, watertight phantom scan from `spec`."""
    rng = np.random.default_rng(_stable_seed("phantom", spec.seed))
    side = spec.side if spec.side is not None else (1 if rng.random() < 0.5 else -1)
    mesh_seed = spec.mesh_seed if spec.mesh_seed is not None else spec.seed
    dirs, faces = sphere_triangulation(spec.n_vertices, _stable_seed("mesh", mesh_seed))
    r = head_radius(dirs, spec, side)
    if spec.jitter_mm > 0:
        r = r + spec.jitter_mm * rng.standard_normal(len(r))
    verts = r[:, None] * dirs
    mesh = TriMesh(verts, faces)
    lms = LandmarkSet.from_array(verts[: len(LANDMARK_NAMES)])
    sid = subject_id or f"{spec.diagnosis.label.lower()}_{spec.seed}"
    meta = {"severity": spec.severity, "side": side, "size_mm": spec.size_mm,
            "jitter_mm": spec.jitter_mm, "face": list(spec.face), "seed": spec.seed}
    return Scan(mesh, lms, spec.diagnosis, sid, age_days, meta=meta)


def make_template(resolution: float = 3.0, seed: int = 0) -> Scan:
    """Neutral, noise-free head used as the registration template."""
    return generate_phantom(PhantomSpec(DiagnosisClass.CONTROL, 0.0, resolution=resolution,
                                        seed=seed, side=1), subject_id="template")


@dataclass(frozen=True)
class CorpusConfig:
    severity_range: tuple = (0.4, 1.0)
    size_range: tuple = (125.0, 155.0)
    jitter_range: tuple = (0.0, 0.3)
    resolution: float = 3.5
    face_spread: float = 1.0
    age_range: tuple = (30, 365)


def corpus_specs(per_class, seed: int = 0, config: CorpusConfig | None = None) -> list[tuple]:
    """``(spec, subject_id, age_days)`` for every scan of a corpus.

    `per_class` maps diagnosis (enum, name or label) to a count. Scans are
    ordered by class then index; subject ids are ``<class>_<index>`` and
    each scan's random draws come from a hash of the root seed and its id.
    """
    cfg = config or CorpusConfig()
    out = []
    for key, count in sorted(((DiagnosisClass.parse(k), int(v)) for k, v in dict(per_class).items())):
        for i in range(count):
            sid = f"{key.label.lower()}_{i:03d}"
            rng = np.random.default_rng(_stable_seed("corpus", seed, sid))
            spec = PhantomSpec(
                diagnosis=key,
                severity=float(rng.uniform(*cfg.severity_range)),
                size_mm=float(rng.uniform(*cfg.size_range)),
                resolution=cfg.resolution,
                jitter_mm=float(rng.uniform(*cfg.jitter_range)),
                seed=_stable_seed("spec", seed, sid),
                side=1 if rng.random() < 0.5 else -1,
                face=tuple(np.clip(cfg.face_spread * rng.uniform(-1, 1, 3), -1, 1)),
            )
            age = int(rng.integers(cfg.age_range[0], cfg.age_range[1] + 1))
            out.append((spec, sid, age))
    return out


def _generate(item) -> Scan:
    spec, sid, age = item
    return generate_phantom(spec, subject_id=sid, age_days=age)


def generate_corpus(per_class, seed: int = 0, config: CorpusConfig | None = None) -> list[Scan]:
    """Labelled phantom corpus, deterministic in `seed` (see :func:`corpus_specs`)."""
    return [_generate(item) for item in corpus_specs(per_class, seed, config)]


def phantom_spec_of(scan: Scan) -> PhantomSpec:
    """Recover the generating spec stored in a phantom's metadata."""
    m = scan.meta
    return PhantomSpec(scan.diagnosis, m["severity"], m["size_mm"], jitter_mm=m["jitter_mm"],
                       seed=m["seed"], side=m["side"], face=tuple(m["face"]))


def resample(scan: Scan, resolution: float, mesh_seed: int, jitter_mm: float | None = None) -> Scan:
    """Same head, independently retriangulated (ground-truth surface kept)."""
    spec = replace(phantom_spec_of(scan), resolution=resolution, mesh_seed=mesh_seed)
    if jitter_mm is not None:
        spec = replace(spec, jitter_mm=jitter_mm)
    return generate_phantom(spec, subject_id=scan.subject_id, age_days=scan.age_days)


# ---------------------------------------------------------------------------
# measurements used by tests and demos

def cephalic_index(scan: Scan) -> float:
    """Maximum cranial width over maximum length, above the sellion level."""
    v = scan.mesh.vertices
    top = v[v[:, 2] > scan.landmarks["se"][2] + 10.0]
    return float(np.ptp(top[:, 0]) / np.ptp(top[:, 1]))


def frontal_asymmetry(scan: Scan) -> float:
    """Signed fronto-temporal asymmetry in mm.

    Mean distance from the midsagittal plane of the left half of the upper
    forehead minus that of the right half. Negative when the left side is
    flattened.
    """
    lms = scan.landmarks
    centre, lateral = midsagittal_plane(lms)        # lateral points towards t_r
    mid_t = 0.5 * (lms["t_l"] + lms["t_r"])
    ant = lms["se"] - mid_t
    ant -= (ant @ lateral) * lateral
    ant /= np.linalg.norm(ant)
    up = np.cross(lateral, ant)
    up *= np.sign(up @ (lms["se"] - lms["gn"]))
    rel = scan.mesh.vertices - mid_t
    depth = np.ptp(rel @ ant)
    sel = (rel @ ant > 0.25 * depth) & (rel @ up > 10.0)
    side = (scan.mesh.vertices[sel] - centre) @ lateral
    return float(-side[side < 0].mean() - side[side > 0].mean())
