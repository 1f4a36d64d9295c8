"""Shape editing in coefficient space: attribute transfer and flexibility modes."""
from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ValidationError
from .scan import DiagnosisClass
from .ssm import ShapeModel, add_overlay, read_manifest, verified_file


class ClassMeanCoefficients(Mapping):
    """Mean coefficient vector per diagnosis class."""

    def __init__(self, means: Mapping):
        self._m = {}
        for k, v in means.items():
            arr = np.array(v, dtype=float).ravel()
            arr.setflags(write=False)
            self._m[DiagnosisClass.parse(k)] = arr
        lens = {len(v) for v in self._m.values()}
        if len(lens) > 1:
            raise ValidationError("class means differ in length")

    def __getitem__(self, key) -> np.ndarray:
        return self._m[DiagnosisClass.parse(key)]

    def __iter__(self):
        return iter(sorted(self._m))

    def __len__(self) -> int:
        return len(self._m)

    def to_json(self) -> dict:
        return {c.label: self._m[c].tolist() for c in self}


def class_mean_coefficients(model: ShapeModel, features) -> ClassMeanCoefficients:
    """Per-class average of training coefficients.

    `features` is a :class:`~cranioshape.classify.FeatureSet` or an
    ``(alpha, labels)`` pair; every coefficient vector must have the model's
    length.
    """
    if isinstance(features, tuple):
        alpha, labels = features
    else:
        alpha, labels = features.alpha, features.labels
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    labels = np.asarray([DiagnosisClass.parse(x) for x in labels])
    if alpha.shape[1] != model.k:
        raise ValidationError(f"coefficients have length {alpha.shape[1]}, model has {model.k}")
    out = {}
    for c in sorted(set(labels.tolist())):
        sel = labels == c
        if not sel.any():
            raise ValidationError(f"class {c} is empty")
        out[c] = alpha[sel].mean(axis=0)
    return ClassMeanCoefficients(out)


def pathology_transfer(alpha, means: ClassMeanCoefficients, from_class, to_class) -> np.ndarray:
    """Move `alpha` by the difference of two class means."""
    a = np.asarray(alpha, dtype=float).ravel()
    src, dst = means[from_class], means[to_class]
    if len(a) != len(src):
        raise ValidationError(f"coefficient length {len(a)} does not match class means ({len(src)})")
    if DiagnosisClass.parse(from_class) == DiagnosisClass.parse(to_class):
        return a.copy()
    return a + dst - src


@dataclass(frozen=True)
class FlexibilityBasis:
    """Coefficient directions that move the free region but not the fixed one.

    Attributes
    ----------
    modes : (k, m) array
        Coefficient-space directions, scaled to unit free-region RMS.
    ratios : (m,) array
        Generalized eigenvalues (free motion over regularised fixed motion),
        descending.
    fixed_mask : int array
        Model vertices held fixed.
    regulariser : float
        The multiple of the identity added to the fixed-motion matrix.
    """

    modes: np.ndarray
    ratios: np.ndarray
    fixed_mask: np.ndarray
    regulariser: float

    @property
    def m(self) -> int:
        return self.modes.shape[1]

    def displacement(self, model: ShapeModel, j: int, amount: float = 1.0) -> np.ndarray:
        """Per-vertex displacement (p, 3) for `amount` units of mode `j`."""
        w = model.components * np.sqrt(model.eigenvalues)
        return (amount * (w @ self.modes[:, j])).reshape(-1, 3)


def _coord_rows(vertices) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.int64)
    return (3 * v[:, None] + np.arange(3)).ravel()


def flexibility_modes(model: ShapeModel, fixed_vertices, m: int, eps: float = 1e-6) -> FlexibilityBasis:
    """Generalized eigen-directions maximising free motion per fixed motion.

    With ``W = V diag(sqrt(lam))``, ``A = W_R^T W_R`` (free rows) and
    ``B = W_F^T W_F`` (fixed rows), solves ``A c = r (B + eps tr(B)/k I) c``
    and keeps the `m` largest ratios. Each mode is rescaled to unit RMS
    displacement over the free vertices, so the modes are orthogonal with
    respect to the regularised ``B`` but not normalised by it. If nothing is
    fixed, ``tr(A)`` sets the regulariser scale instead.
    """
    k = model.k
    if not 1 <= m <= k:
        raise ValidationError(f"m must lie in [1, {k}]")
    fixed = np.unique(np.asarray(fixed_vertices, dtype=np.int64))
    if len(fixed) and (fixed.min() < 0 or fixed.max() >= model.p):
        raise ValidationError("fixed vertex index out of range")
    free = np.setdiff1d(np.arange(model.p), fixed)
    if len(free) == 0:
        raise ValidationError("no free vertices left")
    w = model.components * np.sqrt(model.eigenvalues)
    wr = w[_coord_rows(free)]
    wf = w[_coord_rows(fixed)]
    a = wr.T @ wr
    b = wf.T @ wf
    scale = np.trace(b) if np.trace(b) > 0 else np.trace(a)
    reg = eps * scale / k
    r, c = linalg.eigh(a, b + reg * np.eye(k))
    order = np.argsort(r)[::-1][:m]
    r, c = r[order], c[:, order]
    disp = wr @ c
    rms = np.sqrt(np.sum(disp ** 2, axis=0) / len(free))
    c = c / rms
    # deterministic sign: largest-magnitude coefficient positive
    idx = np.argmax(np.abs(c), axis=0)
    c = c * np.sign(c[idx, np.arange(c.shape[1])])
    return FlexibilityBasis(c, np.maximum(r, 0.0), fixed, float(reg))


def region_rms(model: ShapeModel, basis: FlexibilityBasis, j: int) -> tuple[float, float]:
    """RMS displacement of mode `j` on the fixed and on the free vertices."""
    d = basis.displacement(model, j)
    free = np.setdiff1d(np.arange(model.p), basis.fixed_mask)
    fixed_rms = float(np.sqrt(np.mean(np.sum(d[basis.fixed_mask] ** 2, axis=1)))) if len(basis.fixed_mask) else 0.0
    free_rms = float(np.sqrt(np.mean(np.sum(d[free] ** 2, axis=1))))
    return fixed_rms, free_rms


def save_flexibility(basis: FlexibilityBasis, model_dir) -> None:
    """Attach the modes to a saved model container as an overlay."""
    add_overlay(model_dir, {
        "flex_modes.f64": (basis.modes, "f8"),
        "flex_ratios.f64": (basis.ratios, "f8"),
        "flex_fixed.u32": (basis.fixed_mask, "u4"),
    }, {"kind": "flexibility", "m": basis.m, "regulariser": basis.regulariser})


def load_flexibility(model_dir) -> FlexibilityBasis:
    man = read_manifest(model_dir)
    info = man.get("overlay") or {}
    if info.get("kind") != "flexibility":
        raise ValidationError(f"{model_dir}: no flexibility overlay")
    k, m = int(man["k"]), int(info["m"])
    modes = verified_file(model_dir, man, "flex_modes.f64", "f8").reshape(k, m)
    ratios = verified_file(model_dir, man, "flex_ratios.f64", "f8")
    fixed = verified_file(model_dir, man, "flex_fixed.u32", "u4").astype(np.int64)
    return FlexibilityBasis(modes, ratios, fixed, float(info["regulariser"]))
