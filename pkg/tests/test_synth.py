import numpy as np
import pytest

from cranioshape import mesh as meshops
from cranioshape import synth
from cranioshape.errors import ValidationError
from cranioshape.scan import LANDMARK_NAMES, DiagnosisClass
from cranioshape.spatial import closest_points


def _phantom(diagnosis, severity=1.0, side=1, **kw):
    kw.setdefault("resolution", 3.0)
    return synth.generate_phantom(synth.PhantomSpec(diagnosis, severity, side=side, **kw))


def test_sphere_triangulation_is_closed_and_outward():
    dirs, faces = synth.sphere_triangulation(300, seed=5)
    mesh = meshops.TriMesh(dirs, faces)
    assert len(meshops.boundary_edges(mesh)) == 0
    # Euler characteristic of a sphere
    assert mesh.n_vertices - len(meshops.edges(mesh)) + mesh.n_faces == 2
    n = meshops.face_normals(mesh)
    centres = dirs[faces].mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", n, centres) > 0)


def test_landmarks_are_the_first_vertices():
    dirs, _ = synth.sphere_triangulation(200, seed=1)
    expected = np.array([synth.LANDMARK_DIRECTIONS[n] for n in LANDMARK_NAMES])
    np.testing.assert_allclose(dirs[:10], expected / np.linalg.norm(expected, axis=1, keepdims=True))


def test_vertex_count_follows_resolution():
    spec = synth.PhantomSpec(resolution=3.0)
    assert spec.n_vertices == 642
    scan = synth.generate_phantom(spec)
    assert abs(scan.mesh.n_vertices - 642) < 0.05 * 642


def test_phantom_is_deterministic():
    a = synth.generate_corpus({"metopic": 2}, seed=11)
    b = synth.generate_corpus({"metopic": 2}, seed=11)
    for x, y in zip(a, b):
        assert x.mesh == y.mesh
        np.testing.assert_array_equal(x.landmarks.array(), y.landmarks.array())


def test_corpus_ids_and_order():
    corpus = synth.generate_corpus({"sagittal": 2, "control": 1}, seed=0, config=synth.CorpusConfig(resolution=2.5))
    assert [s.subject_id for s in corpus] == ["control_000", "sagittal_000", "sagittal_001"]
    assert [s.diagnosis for s in corpus] == [DiagnosisClass.CONTROL] + [DiagnosisClass.SAGITTAL] * 2


def test_landmarks_lie_on_the_surface():
    scan = _phantom("coronal", 0.7)
    d, _ = closest_points(scan.landmarks.array(), scan.mesh)
    assert d.max() < 1e-9


def test_sagittal_lowers_cephalic_index():
    control = synth.cephalic_index(_phantom("control", 0.0))
    assert synth.cephalic_index(_phantom("sagittal", 1.0)) < control - 0.05
    assert synth.cephalic_index(_phantom("sagittal", 0.5)) < control


def test_metopic_narrows_temples_more_than_back():
    ctrl = _phantom("control", 0.0).mesh.vertices
    met = _phantom("metopic", 1.0).mesh.vertices
    u = ctrl / np.linalg.norm(ctrl, axis=1, keepdims=True)
    front_side = (u[:, 1] > 0.5) & (np.abs(u[:, 0]) > 0.4) & (u[:, 2] > 0.2)
    back = u[:, 1] < -0.5
    ratio = np.linalg.norm(met, axis=1) / np.linalg.norm(ctrl, axis=1)
    assert ratio[front_side].mean() < 0.98
    np.testing.assert_allclose(ratio[back], 1.0, atol=1e-12)


@pytest.mark.parametrize("side", [1, -1])
def test_coronal_flattens_the_chosen_side(side):
    # same triangulation for both heads, so sampling noise cancels
    kw = dict(resolution=3.5, mesh_seed=0)
    base = synth.frontal_asymmetry(_phantom("control", 0.0, **kw))
    asym = synth.frontal_asymmetry(_phantom("coronal", 1.0, side=side, **kw)) - base
    assert np.sign(asym) == -side
    assert abs(asym) > 2.0


def test_neutral_head_field_is_mirror_symmetric():
    dirs, _ = synth.sphere_triangulation(500, seed=2)
    spec = synth.PhantomSpec("control", 0.0)
    np.testing.assert_allclose(synth.head_radius(dirs * [-1, 1, 1], spec, 1),
                               synth.head_radius(dirs, spec, 1), rtol=1e-12)


def test_resample_keeps_the_surface():
    scan = _phantom("sagittal", 0.8)
    other = synth.resample(scan, 3.2, mesh_seed=99)
    assert other.mesh.n_vertices != scan.mesh.n_vertices
    d, _ = closest_points(other.mesh.vertices, scan.mesh)
    assert np.median(d) < 1.0
    np.testing.assert_allclose(other.landmarks.array(), scan.landmarks.array(), atol=1e-9)


def test_spec_validation():
    with pytest.raises(ValidationError):
        synth.PhantomSpec(severity=1.5)
    with pytest.raises(ValidationError):
        synth.PhantomSpec(resolution=1.0)
    with pytest.raises(ValidationError):
        synth.PhantomSpec(face=(0.0, 0.0))
