"""Classification of shape coefficients with mirror-aware cross-validation."""
from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ValidationError
from .scan import DiagnosisClass

logger = logging.getLogger(__name__)

LDA_RIDGE = 1e-8
NB_SMOOTHING = 1e-9


@dataclass
class FeatureSet:
    """Coefficient vectors with labels and mirror bookkeeping.

    `twin_ids[i]` names the subject that sample `i` mirrors (None for
    originals without a mirror link).
    """

    alpha: np.ndarray
    labels: np.ndarray
    subject_ids: list
    mirrored: np.ndarray
    twin_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        self.labels = np.asarray([int(DiagnosisClass.parse(x)) for x in self.labels], dtype=np.int64)
        self.subject_ids = [str(s) for s in self.subject_ids]
        self.mirrored = np.asarray(self.mirrored, dtype=bool)
        if not self.twin_ids:
            self.twin_ids = [None] * len(self.labels)
        n = len(self.alpha)
        if not (len(self.labels) == len(self.subject_ids) == len(self.mirrored) == len(self.twin_ids) == n):
            raise ValidationError("feature set fields differ in length")
        if not np.all(np.isfinite(self.alpha)):
            raise ValidationError("non-finite coefficients")
        if len(set(self.subject_ids)) != n:
            raise ValidationError("subject ids must be unique")
        for i in np.flatnonzero(self.mirrored):
            if self.twin_ids[i] is None:
                raise ValidationError(f"mirrored sample {self.subject_ids[i]!r} lacks a twin id")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_components(self) -> int:
        return self.alpha.shape[1]

    @classmethod
    def from_scans(cls, alpha, scans) -> "FeatureSet":
        return cls(alpha, [s.diagnosis for s in scans], [s.subject_id for s in scans],
                   [s.mirrored for s in scans], [s.twin_id for s in scans])

    def index_of(self) -> dict:
        return {s: i for i, s in enumerate(self.subject_ids)}

    def mirror_of(self) -> dict:
        """Map original index -> index of its mirrored twin."""
        idx = self.index_of()
        out = {}
        for i in np.flatnonzero(self.mirrored):
            j = idx.get(self.twin_ids[i])
            if j is None:
                raise ValidationError(f"twin {self.twin_ids[i]!r} of {self.subject_ids[i]!r} is missing")
            out[j] = int(i)
        return out


# ---------------------------------------------------------------------------
# classifiers

def _check_xy(x, y):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y) or len(x) == 0:
        raise ValidationError("features and labels must be non-empty and of equal length")
    return x, y


class LDA:
    """Gaussian classifier with one pooled covariance and class priors."""

    name = "lda"

    def fit(self, x, y) -> "LDA":
        x, y = _check_xy(x, y)
        self.classes_ = np.unique(y)
        c = len(self.classes_)
        if c < 2:
            raise ValidationError("LDA needs at least two classes")
        n, d = x.shape
        self.means_ = np.stack([x[y == k].mean(axis=0) for k in self.classes_])
        self.priors_ = np.array([(y == k).sum() for k in self.classes_]) / n
        resid = x - self.means_[np.searchsorted(self.classes_, y)]
        denom = max(n - c, 1)
        cov = resid.T @ resid / denom
        evals = np.linalg.eigvalsh(cov)
        if evals[0] <= d * np.finfo(float).eps * max(evals[-1], 1e-300):
            ridge = LDA_RIDGE * np.trace(cov) / d
            if ridge == 0:
                ridge = LDA_RIDGE
            warnings.warn(f"pooled covariance is singular; adding ridge {ridge:.3g}",
                          RuntimeWarning, stacklevel=2)
            cov = cov + ridge * np.eye(d)
        self.covariance_ = cov
        self._chol = np.linalg.cholesky(cov)
        return self

    def decision_function(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty((len(x), len(self.classes_)))
        for c, mu in enumerate(self.means_):
            z = np.linalg.solve(self._chol, (x - mu).T)
            out[:, c] = np.log(self.priors_[c]) - 0.5 * np.sum(z * z, axis=0)
        return out

    def predict(self, x) -> np.ndarray:
        # argmax takes the first maximum, i.e. the lowest class index on ties
        return self.classes_[np.argmax(self.decision_function(x), axis=1)]


class GaussianNB:
    """Per-dimension Gaussian likelihoods with variance smoothing."""

    name = "nb"

    def fit(self, x, y) -> "GaussianNB":
        x, y = _check_xy(x, y)
        self.classes_ = np.unique(y)
        eps = NB_SMOOTHING * float(np.var(x, axis=0).max())
        if eps == 0:
            eps = NB_SMOOTHING
        self.epsilon_ = eps
        self.means_ = np.stack([x[y == k].mean(axis=0) for k in self.classes_])
        self.vars_ = np.stack([x[y == k].var(axis=0) for k in self.classes_]) + eps
        self.priors_ = np.array([(y == k).sum() for k in self.classes_]) / len(y)
        return self

    def decision_function(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty((len(x), len(self.classes_)))
        for c in range(len(self.classes_)):
            var = self.vars_[c]
            ll = -0.5 * (np.log(2 * np.pi * var) + (x - self.means_[c]) ** 2 / var)
            out[:, c] = np.log(self.priors_[c]) + ll.sum(axis=1)
        return out

    def predict(self, x) -> np.ndarray:
        return self.classes_[np.argmax(self.decision_function(x), axis=1)]


class KNN:
    """Majority vote of the `k` nearest training samples (Euclidean).

    A tied vote goes to the tied class that owns the nearest of the
    neighbours. Equal distances are ordered by training index.
    """

    name = "knn"

    def __init__(self, k: int = 5):
        if k < 1:
            raise ValidationError("k must be positive")
        self.k = int(k)

    def fit(self, x, y) -> "KNN":
        x, y = _check_xy(x, y)
        if self.k > len(x):
            raise ValidationError(f"k={self.k} exceeds the training size {len(x)}")
        self.x_, self.y_ = x, y
        self.classes_ = np.unique(y)
        return self

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = cdist(x, self.x_)
        out = np.empty(len(x), dtype=np.int64)
        for i in range(len(x)):
            nn = np.argsort(d[i], kind="stable")[: self.k]
            labs = self.y_[nn]
            cls, votes = np.unique(labs, return_counts=True)
            tied = set(cls[votes == votes.max()])
            out[i] = next(lab for lab in labs if lab in tied)
        return out


CLASSIFIERS = {"lda": LDA, "nb": GaussianNB, "knn": KNN}


def make_classifier(name: str):
    try:
        return CLASSIFIERS[name]()
    except KeyError:
        raise ValidationError(f"unknown classifier {name!r}; choose from {sorted(CLASSIFIERS)}") from None


def lda_train(features, labels) -> LDA:
    return LDA().fit(features, labels)


def lda_predict(model: LDA, alpha) -> np.ndarray:
    return model.predict(alpha)


def nb_train(features, labels) -> GaussianNB:
    return GaussianNB().fit(features, labels)


def nb_predict(model: GaussianNB, alpha) -> np.ndarray:
    return model.predict(alpha)


def knn_predict(train_features, train_labels, alpha, k: int = 5) -> np.ndarray:
    return KNN(k).fit(train_features, train_labels).predict(alpha)


# ---------------------------------------------------------------------------
# metrics

@dataclass
class ClassificationReport:
    confusion: np.ndarray
    classes: list
    sensitivity: np.ndarray
    specificity: np.ndarray
    accuracy: float
    g_mean: float
    chosen_components: int | None = None
    classifier_name: str = ""
    curve: list = field(default_factory=list)

    def to_json(self) -> dict:
        def num(v):
            return None if not np.isfinite(v) else float(v)

        labels = [DiagnosisClass(c).label for c in self.classes]
        return {
            "classifier": self.classifier_name,
            "classes": labels,
            "confusion": self.confusion.astype(int).tolist(),
            "per_class": {lab: {"sensitivity": num(se), "specificity": num(sp)}
                          for lab, se, sp in zip(labels, self.sensitivity, self.specificity)},
            "accuracy": num(self.accuracy),
            "g_mean": num(self.g_mean),
            "best_components": self.chosen_components,
            "curve": [[int(m), float(a)] for m, a in self.curve],
        }

    def to_text(self) -> str:
        labels = [DiagnosisClass(c).label for c in self.classes]
        w = max(11, *(len(s) + 2 for s in labels))
        lines = [f"classifier: {self.classifier_name or '-'}"
                 + (f"   components: {self.chosen_components}" if self.chosen_components else "")]
        lines.append("true \\ pred".ljust(w) + "".join(s.rjust(w) for s in labels))
        for lab, row in zip(labels, self.confusion):
            lines.append(lab.ljust(w) + "".join(str(int(v)).rjust(w) for v in row))
        lines.append("Sensitivity".ljust(w) + "".join(f"{v:.3f}".rjust(w) for v in self.sensitivity))
        lines.append("Specificity".ljust(w) + "".join(f"{v:.3f}".rjust(w) for v in self.specificity))
        lines.append(f"G-mean {self.g_mean:.3f}   Total accuracy {self.accuracy:.3f}")
        return "\n".join(lines) + "\n"


def report_metrics(confusion, classes=None, classifier_name: str = "",
                   chosen_components: int | None = None, curve=None) -> ClassificationReport:
    """Sensitivity, specificity, accuracy and g-mean from a confusion matrix.

    Rows are true classes, columns predictions. The g-mean is the geometric
    mean of the per-class sensitivities.
    """
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValidationError("confusion matrix must be square")
    if np.any(cm < 0) or not np.all(np.equal(np.mod(cm, 1), 0)):
        raise ValidationError("confusion matrix must hold non-negative integers")
    cm = cm.astype(np.int64)
    c = len(cm)
    classes = list(range(c)) if classes is None else [int(k) for k in classes]
    total = cm.sum()
    tp = np.diag(cm).astype(float)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = total - tp - fn - fp
    with np.errstate(invalid="ignore", divide="ignore"):
        sens = tp / (tp + fn)
        spec = tn / (tn + fp)
    if np.any(tp + fn == 0):
        warnings.warn("a class has no test samples; its sensitivity is NaN", RuntimeWarning, stacklevel=2)
    acc = float(tp.sum() / total) if total else float("nan")
    g = float(np.prod(sens) ** (1.0 / c))
    return ClassificationReport(cm, classes, sens, spec, acc, g, chosen_components, classifier_name,
                                list(curve or []))


# ---------------------------------------------------------------------------
# cross-validation

def stratified_folds(labels, n_folds: int = 10, seed: int = 0) -> np.ndarray:
    """Fold index per sample: seeded shuffle within class, then round-robin.

    The round-robin continues across classes so fold sizes stay balanced.
    """
    y = np.asarray(labels)
    if n_folds < 2:
        raise ValidationError("need at least two folds")
    rng = np.random.default_rng(seed)
    folds = np.empty(len(y), dtype=np.int64)
    pos = 0
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        if len(idx) < n_folds:
            warnings.warn(f"class {c} has {len(idx)} samples for {n_folds} folds; "
                          "it will be missing from some folds", RuntimeWarning, stacklevel=2)
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = (pos + np.arange(len(idx))) % n_folds
        pos += len(idx)
    return folds


def check_leakage(features: FeatureSet, train_idx, test_idx) -> None:
    """Raise if a training sample is a test sample or its mirrored twin."""
    test_ids = {features.subject_ids[i] for i in test_idx}
    for i in test_idx:
        if features.mirrored[i]:
            raise ValidationError(f"mirrored sample {features.subject_ids[i]!r} in a test fold")
    for i in train_idx:
        sid = features.subject_ids[i]
        if sid in test_ids:
            raise ValidationError(f"sample {sid!r} is in both training and test folds")
        twin = features.twin_ids[i]
        if twin is not None and twin in test_ids:
            raise ValidationError(f"leakage: {sid!r} trains while its twin {twin!r} is tested")


def assign_folds(features: FeatureSet, n_folds: int = 10, seed: int = 0) -> np.ndarray:
    """Folds over the originals; every mirror inherits its twin's fold."""
    orig = np.flatnonzero(~features.mirrored)
    folds = np.full(len(features), -1, dtype=np.int64)
    folds[orig] = stratified_folds(features.labels[orig], n_folds, seed)
    for o, m in features.mirror_of().items():
        folds[m] = folds[o]
    return folds


def _factory(classifier):
    """Callable returning a fresh, unfitted classifier, plus its name."""
    if isinstance(classifier, str):
        make_classifier(classifier)
        return CLASSIFIERS[classifier], classifier
    if isinstance(classifier, type):
        return classifier, getattr(classifier, "name", classifier.__name__)
    return (lambda: copy.deepcopy(classifier)), getattr(classifier, "name", type(classifier).__name__)


def stratified_cv(features: FeatureSet, classifier="lda", n_folds: int = 10, components: int | None = None,
                  seed: int = 0, folds=None, augment: bool = True, fold_features=None) -> ClassificationReport:
    """Stratified k-fold CV over the unmirrored samples.

    Each fold tests on its originals and trains on the remaining originals
    plus (with `augment`) their mirrors. `folds` overrides the assignment
    (one fold index per sample, mirrors included). `fold_features`, if
    given, is called as ``fold_features(train_idx)`` and must return the
    coefficient matrix for all samples; this lets the caller rebuild the
    shape model per fold.
    """
    factory, name = _factory(classifier)
    if folds is None:
        folds = assign_folds(features, n_folds, seed)
    folds = np.asarray(folds)
    if len(folds) != len(features):
        raise ValidationError("one fold index per sample is required")
    m = features.n_components if components is None else int(components)
    if not 1 <= m <= features.n_components:
        raise ValidationError(f"components must lie in [1, {features.n_components}]")
    classes = sorted(int(c) for c in np.unique(features.labels))
    pos = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    orig = ~features.mirrored
    for f in np.unique(folds[orig]):
        test = np.flatnonzero((folds == f) & orig)
        train = np.flatnonzero((folds != f) & (orig | augment))
        check_leakage(features, train, test)
        alpha = features.alpha if fold_features is None else np.asarray(fold_features(train))
        clf = factory().fit(alpha[train, :m], features.labels[train])
        pred = clf.predict(alpha[test, :m])
        for t, p in zip(features.labels[test], pred):
            cm[pos[int(t)], pos[int(p)]] += 1
    return report_metrics(cm, classes, name, m)


def sweep_components(features: FeatureSet, classifier="lda", max_components: int = 100, n_folds: int = 10,
                     seed: int = 0, folds=None, augment: bool = True):
    """CV accuracy for the first ``m = 1..min(max_components, k)`` components.

    Returns ``(best_m, report)`` where the report belongs to the best `m`
    (highest accuracy, smallest `m` on ties) and carries the whole curve.
    """
    top = min(int(max_components), features.n_components)
    if top < 1:
        raise ValidationError("need at least one component")
    if folds is None:
        folds = assign_folds(features, n_folds, seed)
    best, curve = None, []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for m in range(1, top + 1):
            rep = stratified_cv(features, classifier, n_folds, m, seed, folds, augment)
            curve.append((m, rep.accuracy))
            if best is None or rep.accuracy > best.accuracy:
                best = rep
    best.curve = curve
    return best.chosen_components, best
