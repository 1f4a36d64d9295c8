"""Corpus-level stages: storage, preprocessing, morphing, model building, features.

Every stage is a deterministic function of its inputs. Scan-level stages
take a `jobs` argument; results are always returned in input order, so the
degree of parallelism never changes a number.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mesh as meshops
from .align import apply_similarity, gpa, mirror_scan, procrustes_similarity
from .classify import FeatureSet, assign_folds, stratified_cv, sweep_components
from .errors import MeshFormatError, ValidationError
from .meshio import dump_json, load_landmarks, load_mesh, save_mesh
from .register import (LbrpConfig, NicpConfig, TargetSurface, landmark_error, landmark_vertex_indices,
                       nicp_affine, nicp_translation, two_stage_lbrp, v2nn_distance)
from .scan import DiagnosisClass, Scan
from .ssm import ShapeModel, align_to_model, build_model, cranial_mask, project

logger = logging.getLogger(__name__)


def parallel_map(fn, items, jobs: int = 1) -> list:
    """Ordered map over `items`, optionally in worker processes."""
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=int(jobs)) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# storage

def save_scan(scan: Scan, directory) -> Path:
    """Write ``<id>.ply`` and ``<id>.json`` (landmarks plus metadata)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_mesh(scan.mesh, d / f"{scan.subject_id}.ply")
    doc = {"landmarks": scan.landmarks.to_json()["landmarks"], **scan.metadata(), "meta": scan.meta}
    dump_json(doc, d / f"{scan.subject_id}.json")
    return d / f"{scan.subject_id}.ply"


def load_scan(path) -> Scan:
    """Read a scan from ``<id>.ply`` and its sibling ``<id>.json``."""
    path = Path(path)
    side = path.with_suffix(".json")
    lms = load_landmarks(side)
    try:
        doc = json.loads(side.read_text())
        return Scan(load_mesh(path), lms, DiagnosisClass.parse(doc.get("diagnosis", "control")),
                    doc.get("subject_id", path.stem), int(doc.get("age_days", 0)),
                    bool(doc.get("mirrored", False)), doc.get("twin_id"), doc.get("meta", {}))
    except (KeyError, TypeError) as exc:
        raise MeshFormatError(f"{side}: bad scan metadata ({exc})") from exc


def save_corpus(scans, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in scans:
        save_scan(s, d)
    dump_json({"scans": [s.subject_id for s in scans]}, d / "corpus.json")
    return d


def load_corpus(directory) -> list[Scan]:
    """Scans listed in ``corpus.json`` (or every PLY with a JSON sidecar)."""
    d = Path(directory)
    index = d / "corpus.json"
    if index.exists():
        ids = json.loads(index.read_text())["scans"]
    else:
        ids = sorted(p.stem for p in d.glob("*.ply") if p.with_suffix(".json").exists())
    if not ids:
        raise MeshFormatError(f"{d}: no scans found")
    return [load_scan(d / f"{sid}.ply") for sid in ids]


# ---------------------------------------------------------------------------
# preprocessing

def preprocess_scan(scan: Scan, dedup_tol: float = 1e-6, min_component_fraction: float = 0.05) -> Scan:
    return scan.with_mesh(meshops.clean(scan.mesh, dedup_tol, min_component_fraction))


def preprocess(scans, mirror: bool = True, dedup_tol: float = 1e-6,
               min_component_fraction: float = 0.05) -> list[Scan]:
    """Clean every scan and, with `mirror`, follow each by its mirrored twin."""
    out = []
    for s in scans:
        c = preprocess_scan(s, dedup_tol, min_component_fraction)
        out.append(c)
        if mirror and not c.mirrored:
            out.append(mirror_scan(c))
    return out


# ---------------------------------------------------------------------------
# morphing

@dataclass
class MorphRecord:
    subject_id: str
    vertices: np.ndarray
    metrics: dict
    diagnostics: list = field(default_factory=list)


def morph_scan(template: Scan, scan: Scan, method: str = "nicp-a", nicp: NicpConfig | None = None,
               lbrp: LbrpConfig | None = None) -> MorphRecord:
    """Landmark Procrustes initialisation followed by one morphing method."""
    lm_idx = landmark_vertex_indices(template.mesh, template.landmarks)
    init = apply_similarity(procrustes_similarity(template.landmarks, scan.landmarks), template.mesh)
    target = TargetSurface(scan.mesh)
    if method == "nicp-a":
        res = nicp_affine(init, target, lm_idx, scan.landmarks, nicp or NicpConfig())
    elif method == "nicp-t":
        res = nicp_translation(init, target, lm_idx, scan.landmarks, nicp or NicpConfig())
    elif method == "2s-lbrp":
        res = two_stage_lbrp(init, target, lm_idx, scan.landmarks, lbrp or LbrpConfig())
    else:
        raise ValidationError(f"unknown morphing method {method!r}")
    metrics = {"landmark_error": landmark_error(res.morphed, lm_idx, scan.landmarks),
               "v2nn": v2nn_distance(res.morphed, target)}
    return MorphRecord(scan.subject_id, np.array(res.morphed.vertices), metrics, res.diagnostics)


def _morph_task(args):
    return morph_scan(*args)


def morph_corpus(template: Scan, scans, method: str = "nicp-a", nicp: NicpConfig | None = None,
                 lbrp: LbrpConfig | None = None, jobs: int = 1) -> list[MorphRecord]:
    return parallel_map(_morph_task, [(template, s, method, nicp, lbrp) for s in scans], jobs)


def save_morphs(records, scans, template: Scan, directory, method: str = "") -> Path:
    """Morphed templates as PLY plus per-scan metadata/diagnostics JSON."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for rec, scan in zip(records, scans):
        save_mesh(template.mesh.with_vertices(rec.vertices), d / f"{rec.subject_id}.ply")
        dump_json({**scan.metadata(), "metrics": rec.metrics, "iterations": len(rec.diagnostics),
                   "final": rec.diagnostics[-1] if rec.diagnostics else {}},
                  d / f"{rec.subject_id}.json")
    dump_json({"scans": [r.subject_id for r in records], "method": method}, d / "corpus.json")
    return d


def morph_method(directory) -> str:
    """Method name recorded by :func:`save_morphs` (directory name as fallback)."""
    d = Path(directory)
    try:
        return json.loads((d / "corpus.json").read_text()).get("method") or d.name
    except (OSError, json.JSONDecodeError):
        return d.name


@dataclass
class MorphSet:
    """Corresponded shapes (n, p, 3) with the metadata of their scans."""

    shapes: np.ndarray
    labels: list
    subject_ids: list
    mirrored: list
    twin_ids: list
    faces: np.ndarray
    metrics: list = field(default_factory=list)

    def subset(self, sel) -> "MorphSet":
        idx = np.flatnonzero(sel) if np.asarray(sel).dtype == bool else np.asarray(sel)
        pick = [int(i) for i in idx]
        return MorphSet(self.shapes[pick], [self.labels[i] for i in pick], [self.subject_ids[i] for i in pick],
                        [self.mirrored[i] for i in pick], [self.twin_ids[i] for i in pick], self.faces,
                        [self.metrics[i] for i in pick] if self.metrics else [])

    @classmethod
    def from_records(cls, records, scans, faces) -> "MorphSet":
        return cls(np.stack([r.vertices for r in records]), [s.diagnosis for s in scans],
                   [s.subject_id for s in scans], [s.mirrored for s in scans], [s.twin_id for s in scans],
                   np.asarray(faces), [r.metrics for r in records])


def load_morphs(directory) -> MorphSet:
    d = Path(directory)
    try:
        ids = json.loads((d / "corpus.json").read_text())["scans"]
    except OSError as exc:
        raise MeshFormatError(f"{d}: missing corpus.json ({exc})") from exc
    shapes, labels, mirrored, twins, metrics = [], [], [], [], []
    faces = None
    for sid in ids:
        m = load_mesh(d / f"{sid}.ply")
        if faces is None:
            faces = m.faces
        elif not np.array_equal(faces, m.faces):
            raise ValidationError(f"{sid}: morph topology differs from the others")
        doc = json.loads((d / f"{sid}.json").read_text())
        shapes.append(m.vertices)
        labels.append(DiagnosisClass.parse(doc["diagnosis"]))
        mirrored.append(bool(doc["mirrored"]))
        twins.append(doc.get("twin_id"))
        metrics.append(doc.get("metrics", {}))
    return MorphSet(np.stack(shapes), labels, list(ids), mirrored, twins, faces, metrics)


# ---------------------------------------------------------------------------
# models and features

def build_models(morphs: MorphSet, template: Scan, cranial: bool = True, submodels: bool = True,
                 keep=None) -> dict[str, ShapeModel]:
    """Full model, per-class submodels and the cranial model (each with its own GPA)."""
    mass = meshops.mass_matrix(template.mesh)
    models = {"full": build_model(gpa(morphs.shapes).aligned, mass, morphs.faces, keep=keep)}
    if submodels:
        labels = np.array([int(c) for c in morphs.labels])
        for c in sorted(set(labels.tolist())):
            sel = labels == c
            if sel.sum() < 2:
                logger.warning("class %s has fewer than two shapes; no submodel", DiagnosisClass(c).label)
                continue
            models[DiagnosisClass(c).label.lower()] = build_model(
                gpa(morphs.shapes[sel]).aligned, mass, morphs.faces, keep=keep, class_label=c)
    if cranial:
        mask = cranial_mask(template.mesh.vertices, template.landmarks)
        models["cranial"] = build_model(morphs.shapes, mass, morphs.faces, mask=mask, keep=keep)
    return models


def extract_features(model: ShapeModel, morphs: MorphSet) -> FeatureSet:
    """Coefficients of every morph in `model` (after rigid alignment to its mean)."""
    alpha = project(model, align_to_model(model, morphs.shapes))
    return FeatureSet(alpha, morphs.labels, morphs.subject_ids, morphs.mirrored, morphs.twin_ids)


def rebuild_features(morphs: MorphSet, template: Scan):
    """Per-fold feature function for the strict protocol.

    The cranial model is rebuilt from the training shapes of each fold only;
    every sample is then projected into that fold's model. Results are
    cached per training set.
    """
    mass = meshops.mass_matrix(template.mesh)
    mask = cranial_mask(template.mesh.vertices, template.landmarks)
    cache = {}

    def features(train_idx):
        key = np.asarray(train_idx, dtype=np.int64).tobytes()
        if key not in cache:
            m = build_model(morphs.shapes[train_idx], mass, morphs.faces, mask=mask)
            cache[key] = project(m, align_to_model(m, morphs.shapes))
        return cache[key]

    return features


def classify_morphs(morphs: MorphSet, model: ShapeModel, classifier: str = "lda", max_components: int = 100,
                    n_folds: int = 10, seed: int = 0, rebuild_per_fold: bool = False,
                    template: Scan | None = None):
    """Component sweep plus CV report; optionally with per-fold model rebuilds."""
    feats = extract_features(model, morphs)
    if not rebuild_per_fold:
        return sweep_components(feats, classifier, max_components, n_folds, seed)
    if template is None:
        raise ValidationError("rebuilding the model per fold needs the template")
    fn = rebuild_features(morphs, template)
    folds = assign_folds(feats, n_folds, seed)
    best = None
    curve = []
    top = min(max_components, feats.n_components)
    for m in range(1, top + 1):
        rep = stratified_cv(feats, classifier, n_folds, m, seed, folds, fold_features=fn)
        curve.append((m, rep.accuracy))
        if best is None or rep.accuracy > best.accuracy:
            best = rep
    best.curve = curve
    return best.chosen_components, best


def default_jobs() -> int:
    return max(1, os.cpu_count() or 1)
