"""Training observations: landmarks, diagnosis labels and scans."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping

import numpy as np

from .errors import ValidationError
from .mesh import TriMesh

LANDMARK_NAMES = ("t_l", "t_r", "se", "ex_l", "ex_r", "sn", "ls", "obs_l", "obs_r", "gn")
PAIRED_LANDMARKS = (("t_l", "t_r"), ("ex_l", "ex_r"), ("obs_l", "obs_r"))
MIDLINE_LANDMARKS = ("se", "sn", "ls", "gn")


class DiagnosisClass(enum.IntEnum):
    """Diagnosis label. Integer order is the row/column order of every
    confusion matrix produced by :mod:`cranioshape.classify`."""

    CONTROL = 0
    CORONAL = 1
    METOPIC = 2
    SAGITTAL = 3

    @classmethod
    def parse(cls, value) -> "DiagnosisClass":
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ValidationError(f"unknown diagnosis class {value!r}") from None

    @property
    def label(self) -> str:
        return self.name.capitalize()


class LandmarkSet(Mapping[str, np.ndarray]):
    """The ten named facial/cranial landmarks of one scan, in mm.

    Iteration order is always :data:`LANDMARK_NAMES`.
    """

    def __init__(self, points: Mapping[str, "np.ArrayLike"]):
        missing = [n for n in LANDMARK_NAMES if n not in points]
        extra = [n for n in points if n not in LANDMARK_NAMES]
        if missing or extra:
            raise ValidationError(
                f"landmark set must contain exactly {LANDMARK_NAMES}; "
                f"missing={missing} unexpected={extra}")
        arr = np.array([np.asarray(points[n], dtype=float) for n in LANDMARK_NAMES])
        if arr.shape != (len(LANDMARK_NAMES), 3) or not np.all(np.isfinite(arr)):
            raise ValidationError("landmarks must be finite 3D points")
        arr.setflags(write=False)
        self._arr = arr

    @classmethod
    def from_array(cls, arr) -> "LandmarkSet":
        arr = np.asarray(arr, dtype=float)
        return cls(dict(zip(LANDMARK_NAMES, arr)))

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arr[LANDMARK_NAMES.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def __iter__(self) -> Iterator[str]:
        return iter(LANDMARK_NAMES)

    def __len__(self) -> int:
        return len(LANDMARK_NAMES)

    def array(self) -> np.ndarray:
        """(10, 3) array in canonical name order."""
        return self._arr

    def transformed(self, fn) -> "LandmarkSet":
        return LandmarkSet.from_array(fn(self._arr))

    def swapped_pairs(self) -> "LandmarkSet":
        """Exchange left/right names (positions stay where they are)."""
        pts = dict(self.items())
        for a, b in PAIRED_LANDMARKS:
            pts[a], pts[b] = pts[b], pts[a]
        return LandmarkSet(pts)

    def to_json(self) -> dict:
        return {"landmarks": {n: [float(c) for c in self[n]] for n in LANDMARK_NAMES}}

    def __repr__(self) -> str:
        return f"LandmarkSet({', '.join(LANDMARK_NAMES)})"


@dataclass(frozen=True)
class Scan:
    """One training observation."""

    mesh: TriMesh
    landmarks: LandmarkSet
    diagnosis: DiagnosisClass
    subject_id: str
    age_days: int = 0
    mirrored: bool = False
    twin_id: str | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.age_days < 0:
            raise ValidationError("age_days must be >= 0")
        if self.mirrored and not self.twin_id:
            raise ValidationError(f"mirrored scan {self.subject_id!r} needs a twin_id")

    def with_mesh(self, mesh: TriMesh, **changes) -> "Scan":
        return replace(self, mesh=mesh, **changes)

    def metadata(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "diagnosis": self.diagnosis.label,
            "age_days": int(self.age_days),
            "mirrored": bool(self.mirrored),
            "twin_id": self.twin_id,
        }
