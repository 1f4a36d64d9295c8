import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cranioshape import classify as C
from cranioshape.errors import ValidationError

PUBLISHED_CONFUSION = [[178, 0, 0, 0], [5, 17, 0, 0], [0, 0, 56, 0], [3, 0, 0, 108]]


def _blobs(per_class=12, d=3, sep=6.0, seed=0, mirrors=True):
    rng = np.random.default_rng(seed)
    alpha, labels, ids, mirrored, twins = [], [], [], [], []
    for c in range(4):
        centre = np.zeros(d)
        centre[c % d] = sep * (1 if c < d else -1)
        for i in range(per_class):
            x = centre + rng.normal(size=d)
            sid = f"c{c}_{i}"
            alpha.append(x), labels.append(c), ids.append(sid), mirrored.append(False), twins.append(None)
            if mirrors:
                alpha.append(x + rng.normal(scale=0.1, size=d))
                labels.append(c), ids.append(sid + "_m"), mirrored.append(True), twins.append(sid)
    return C.FeatureSet(np.array(alpha), labels, ids, mirrored, twins)


# ---------------------------------------------------------------------------
# metrics

def test_published_confusion_metrics():
    rep = C.report_metrics(PUBLISHED_CONFUSION)
    assert rep.accuracy == pytest.approx(0.978, abs=5e-4)
    assert rep.g_mean == pytest.approx(0.931, abs=5e-4)
    np.testing.assert_allclose(rep.sensitivity, [1.000, 0.773, 1.000, 0.973], atol=5e-4)
    np.testing.assert_allclose(rep.specificity, [0.958, 1.000, 1.000, 1.000], atol=5e-4)


def test_metrics_by_hand_two_classes():
    rep = C.report_metrics([[3, 1], [2, 4]])
    np.testing.assert_allclose(rep.sensitivity, [0.75, 4 / 6])
    np.testing.assert_allclose(rep.specificity, [4 / 6, 0.75])
    assert rep.accuracy == pytest.approx(0.7)
    assert rep.g_mean == pytest.approx(np.sqrt(0.75 * 4 / 6))


def test_empty_class_row_warns():
    with pytest.warns(RuntimeWarning, match="no test samples"):
        rep = C.report_metrics([[2, 0], [0, 0]])
    assert np.isnan(rep.sensitivity[1])
    assert rep.to_json()["per_class"]["Coronal"]["sensitivity"] is None


@pytest.mark.parametrize("bad", [[[1, 2, 3]], [[-1, 0], [0, 1]], [[0.5, 0], [0, 1]]])
def test_confusion_validation(bad):
    with pytest.raises(ValidationError):
        C.report_metrics(bad)


def test_report_serialisation():
    rep = C.report_metrics(PUBLISHED_CONFUSION, classifier_name="lda", chosen_components=44, curve=[(1, 0.5)])
    doc = json.loads(json.dumps(rep.to_json()))
    assert doc["classes"] == ["Control", "Coronal", "Metopic", "Sagittal"]
    assert doc["best_components"] == 44 and doc["confusion"][1] == [5, 17, 0, 0]
    text = rep.to_text()
    assert "Total accuracy 0.978" in text and "G-mean 0.931" in text


# ---------------------------------------------------------------------------
# classifiers

def test_lda_matches_gaussian_log_density():
    rng = np.random.default_rng(1)
    x = np.vstack([rng.normal(size=(10, 2)), rng.normal(size=(6, 2)) + 2])
    y = np.r_[np.zeros(10), np.ones(6)].astype(int)
    clf = C.LDA().fit(x, y)
    resid = np.vstack([x[:10] - x[:10].mean(0), x[10:] - x[10:].mean(0)])
    cov = resid.T @ resid / (16 - 2)
    q = rng.normal(size=(5, 2))
    ref = np.stack([stats.multivariate_normal(x[y == k].mean(0), cov).logpdf(q) + np.log((y == k).mean())
                    for k in (0, 1)], axis=1)
    got = clf.decision_function(q)
    np.testing.assert_allclose(got[:, 1] - got[:, 0], ref[:, 1] - ref[:, 0], atol=1e-10)


def test_lda_singular_covariance_gets_ridge():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 0.0], [6.0, 0.0]])
    with pytest.warns(RuntimeWarning, match="ridge"):
        clf = C.LDA().fit(x, [0, 0, 1, 1])
    np.testing.assert_array_equal(clf.predict([[0.2, 0.0], [5.5, 0.0]]), [0, 1])


def test_lda_needs_two_classes():
    with pytest.raises(ValidationError):
        C.LDA().fit(np.ones((3, 2)), [0, 0, 0])


def test_nb_matches_scipy_norm():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 3))
    y = np.repeat([0, 1], 10)
    clf = C.GaussianNB().fit(x, y)
    q = rng.normal(size=(4, 3))
    eps = 1e-9 * x.var(axis=0).max()
    ref = np.stack([stats.norm(x[y == k].mean(0), np.sqrt(x[y == k].var(0) + eps)).logpdf(q).sum(1) + np.log(0.5)
                    for k in (0, 1)], axis=1)
    np.testing.assert_allclose(clf.decision_function(q), ref, rtol=1e-12)


def test_knn_majority_and_tie_rule():
    x = np.array([[0.0], [1.0], [2.0], [10.0], [11.0]])
    y = np.array([0, 0, 1, 1, 1])
    assert C.KNN(3).fit(x, y).predict([[0.4]])[0] == 0
    # k=4 at 1.6: neighbours 2 (1), 1 (0), 0 (0), 10 (1) -> 2:2 tie, nearest is class 1
    assert C.KNN(4).fit(x, y).predict([[1.6]])[0] == 1
    assert C.KNN(4).fit(x, y).predict([[0.9]])[0] == 0
    # k=2 at 1.4: neighbours 1 (class 0, d=0.4) and 2 (class 1, d=0.6) tie -> nearest wins
    assert C.KNN(2).fit(x, y).predict([[1.4]])[0] == 0
    assert C.KNN(2).fit(x, y).predict([[1.6]])[0] == 1
    with pytest.raises(ValidationError):
        C.KNN(9).fit(x, y)


def test_make_classifier_names():
    assert isinstance(C.make_classifier("nb"), C.GaussianNB)
    with pytest.raises(ValidationError):
        C.make_classifier("svm")


# ---------------------------------------------------------------------------
# folds and CV

@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=20, max_size=80), st.integers(2, 10), st.integers(0, 999))
def test_stratified_folds_balanced(labels, k, seed):
    labels = np.array(labels)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        folds = C.stratified_folds(labels, k, seed)
    sizes = np.bincount(folds, minlength=k)
    assert sizes.max() - sizes.min() <= 1
    for c in np.unique(labels):
        per = np.bincount(folds[labels == c], minlength=k)
        assert per.max() - per.min() <= 1


def test_mirrors_share_their_twins_fold():
    fs = _blobs()
    folds = C.assign_folds(fs, 5, seed=1)
    for o, m in fs.mirror_of().items():
        assert folds[o] == folds[m]


def test_leakage_guard_trips():
    fs = _blobs(per_class=5)
    folds = C.assign_folds(fs, 5, seed=0)
    o, m = next(iter(fs.mirror_of().items()))
    folds = folds.copy()
    folds[m] = (folds[o] + 1) % 5           # mirror trains while its twin is tested
    with pytest.raises(ValidationError, match="leakage"):
        C.stratified_cv(fs, "lda", 5, folds=folds)


def test_leakage_guard_rejects_mirror_in_test():
    fs = _blobs(per_class=3)
    m = int(np.flatnonzero(fs.mirrored)[0])
    with pytest.raises(ValidationError, match="test fold"):
        C.check_leakage(fs, [], [m])


def test_cv_separable_blobs():
    fs = _blobs(per_class=15)
    for name in ("lda", "nb", "knn"):
        rep = C.stratified_cv(fs, name, n_folds=5, seed=2)
        assert rep.accuracy == 1.0
        assert rep.confusion.sum() == 60          # originals only


def test_cv_accepts_instances():
    fs = _blobs(per_class=10)
    rep = C.stratified_cv(fs, C.KNN(k=3), n_folds=5)
    assert rep.classifier_name == "knn"


def test_sweep_prefers_fewest_components():
    fs = _blobs(per_class=10, d=3)
    best, rep = C.sweep_components(fs, "lda", max_components=3, n_folds=5)
    accs = [a for _, a in rep.curve]
    assert len(rep.curve) == 3 and rep.accuracy == max(accs)
    assert best == 1 + accs.index(max(accs))


def test_featureset_validation():
    with pytest.raises(ValidationError, match="twin"):
        C.FeatureSet(np.zeros((2, 1)), [0, 1], ["a", "b"], [False, True])
    with pytest.raises(ValidationError, match="unique"):
        C.FeatureSet(np.zeros((2, 1)), [0, 1], ["a", "a"], [False, False])
    with pytest.raises(ValidationError, match="missing"):
        C.FeatureSet(np.zeros((2, 1)), [0, 1], ["a", "b"], [False, True], [None, "zz"]).mirror_of()
