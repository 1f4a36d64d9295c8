import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cranioshape import edit, ssm
from cranioshape import mesh as meshops
from cranioshape.errors import ValidationError
from cranioshape.scan import DiagnosisClass


@pytest.fixture(scope="module")
def model_and_alpha(corresponded_corpus):
    x = np.stack([s.mesh.vertices for s in corresponded_corpus])
    tpl = corresponded_corpus[0]
    model = ssm.build_model(x, meshops.mass_matrix(tpl.mesh), tpl.mesh.faces)
    alpha = ssm.project(model, x)
    labels = [s.diagnosis for s in corresponded_corpus]
    return model, alpha, labels


@pytest.fixture(scope="module")
def means(model_and_alpha):
    model, alpha, labels = model_and_alpha
    return edit.class_mean_coefficients(model, (alpha, labels))


def test_class_means_by_hand(model_and_alpha, means):
    _, alpha, labels = model_and_alpha
    sel = np.array([lab == DiagnosisClass.METOPIC for lab in labels])
    np.testing.assert_array_equal(means["metopic"], alpha[sel].mean(axis=0))
    assert list(means) == [DiagnosisClass.CONTROL, DiagnosisClass.CORONAL,
                           DiagnosisClass.METOPIC, DiagnosisClass.SAGITTAL]


def test_transfer_of_class_mean_lands_on_other_mean(means):
    out = edit.pathology_transfer(means["sagittal"], means, "sagittal", "control")
    np.testing.assert_array_equal(out, means["control"] + means["sagittal"] - means["sagittal"])
    np.testing.assert_allclose(out, means["control"], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_transfer_round_trip(model_and_alpha, means, data):
    k = model_and_alpha[0].k
    a = data.draw(hnp.arrays(np.float64, k, elements=st.floats(-3, 3)))
    src = data.draw(st.sampled_from(list(DiagnosisClass)))
    dst = data.draw(st.sampled_from(list(DiagnosisClass)))
    there = edit.pathology_transfer(a, means, src, dst)
    back = edit.pathology_transfer(there, means, dst, src)
    np.testing.assert_allclose(back, a, atol=1e-12)


def test_transfer_same_class_is_identity(means):
    a = np.arange(len(means["control"]), dtype=float)
    np.testing.assert_array_equal(edit.pathology_transfer(a, means, "metopic", "metopic"), a)


def test_transfer_length_check(means):
    with pytest.raises(ValidationError):
        edit.pathology_transfer(np.zeros(2), means, "control", "coronal")


def test_class_means_length_check(model_and_alpha):
    model, alpha, labels = model_and_alpha
    with pytest.raises(ValidationError):
        edit.class_mean_coefficients(model, (alpha[:, :2], labels))


# ---------------------------------------------------------------------------
# flexibility modes

@pytest.fixture(scope="module")
def flex(model_and_alpha, corresponded_corpus):
    model = model_and_alpha[0]
    tpl = corresponded_corpus[0]
    fixed = ssm.cranial_mask(model.mean_shape, tpl.landmarks)
    return model, edit.flexibility_modes(model, fixed, 4)


def _fixed_gram(model, basis):
    w = model.components * np.sqrt(model.eigenvalues)
    wf = w[edit._coord_rows(basis.fixed_mask)]
    return wf.T @ wf + basis.regulariser * np.eye(model.k)


def test_flex_generalised_eigen_equation(flex):
    model, basis = flex
    w = model.components * np.sqrt(model.eigenvalues)
    free = np.setdiff1d(np.arange(model.p), basis.fixed_mask)
    wr = w[edit._coord_rows(free)]
    a, b = wr.T @ wr, _fixed_gram(model, basis)
    for j in range(basis.m):
        c = basis.modes[:, j]
        np.testing.assert_allclose(a @ c, basis.ratios[j] * (b @ c), rtol=1e-6, atol=1e-8 * np.abs(a @ c).max())


def test_flex_modes_are_b_orthogonal(flex):
    model, basis = flex
    g = basis.modes.T @ _fixed_gram(model, basis) @ basis.modes
    d = np.sqrt(np.diag(g))
    assert np.abs(g / np.outer(d, d) - np.eye(basis.m)).max() < 1e-8


def test_flex_unit_free_rms_and_ordering(flex):
    model, basis = flex
    assert np.all(np.diff(basis.ratios) <= 0)
    for j in range(basis.m):
        _, free_rms = edit.region_rms(model, basis, j)
        assert free_rms == pytest.approx(1.0, rel=1e-10)


def test_flex_first_mode_keeps_cranium_still(flex):
    model, basis = flex
    fixed_rms, free_rms = edit.region_rms(model, basis, 0)
    assert fixed_rms < 0.05 * free_rms


def test_flex_without_fixed_vertices_is_gram_eigenproblem(model_and_alpha):
    model = model_and_alpha[0]
    basis = edit.flexibility_modes(model, [], 3)
    # nothing fixed: B is the bare regulariser, so the modes are eigenvectors of A
    w = model.components * np.sqrt(model.eigenvalues)
    evals, evecs = np.linalg.eigh(w.T @ w)
    c = basis.modes[:, 0] / np.linalg.norm(basis.modes[:, 0])
    assert abs(c @ evecs[:, -1]) == pytest.approx(1.0, abs=1e-9)
    assert basis.ratios[0] == pytest.approx(evals[-1] / basis.regulariser, rel=1e-8)


def test_flex_validation(model_and_alpha):
    model = model_and_alpha[0]
    with pytest.raises(ValidationError):
        edit.flexibility_modes(model, [0], model.k + 1)
    with pytest.raises(ValidationError):
        edit.flexibility_modes(model, [model.p], 1)
    with pytest.raises(ValidationError):
        edit.flexibility_modes(model, np.arange(model.p), 1)


def test_flex_overlay_roundtrip(tmp_path, flex):
    model, basis = flex
    d = ssm.save_model(model, tmp_path / "m")
    edit.save_flexibility(basis, d)
    back = edit.load_flexibility(d)
    np.testing.assert_array_equal(back.modes, basis.modes)
    np.testing.assert_array_equal(back.fixed_mask, basis.fixed_mask)
    assert back.regulariser == basis.regulariser
    # the model itself still loads with its checksums intact
    assert ssm.load_model(d).k == model.k


def test_load_flexibility_without_overlay(tmp_path, model_and_alpha):
    d = ssm.save_model(model_and_alpha[0], tmp_path / "m")
    with pytest.raises(ValidationError, match="flexibility"):
        edit.load_flexibility(d)
