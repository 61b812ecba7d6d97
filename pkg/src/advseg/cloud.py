"""Point-cloud data model and per-cloud statistics."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DataError


@dataclass
class LabeledCloud:
    """A scan: 3D coordinates, optional intensity, per-point class labels.

    ``points`` is (N, 3) in meters, ``labels`` is (N,) integer class ids,
    ``intensity`` is (N,) reflectance in [0, 1] or None. ``viewpoint`` is
    the sensor origin. ``unlabeled`` marks clouds whose labels are a
    placeholder (all zero) rather than annotations.
    """

    points: np.ndarray
    labels: np.ndarray
    intensity: Optional[np.ndarray] = None
    viewpoint: np.ndarray = field(default_factory=lambda: np.zeros(3))
    unlabeled: bool = False

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if self.points.size == 0:
            self.points = self.points.reshape(0, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.viewpoint = np.asarray(self.viewpoint, dtype=np.float64).reshape(3)
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return self.points.shape[0]

    def validate(self, num_classes: Optional[int] = None) -> "LabeledCloud":
        """Check structural invariants, raising :class:`DataError` on violation."""
        n = len(self)
        if self.points.shape != (n, 3):
            raise DataError(f"points must be (N, 3), got {self.points.shape}")
        if self.labels.shape[0] != n:
            raise DataError(f"labels length {self.labels.shape[0]} != point count {n}")
        if self.intensity is not None and self.intensity.shape[0] != n:
            raise DataError(f"intensity length {self.intensity.shape[0]} != point count {n}")
        bad = np.flatnonzero(~np.isfinite(self.points).all(axis=1))
        if bad.size:
            raise DataError(f"non-finite coordinates at point {bad[0]}")
        if n and self.labels.min() < 0:
            raise DataError("negative label")
        if num_classes is not None and n and self.labels.max() >= num_classes:
            j = int(np.argmax(self.labels >= num_classes))
            raise DataError(f"label {self.labels[j]} >= num_classes {num_classes} at point {j}")
        return self

    def copy(self) -> "LabeledCloud":
        return replace(
            self,
            points=self.points.copy(),
            labels=self.labels.copy(),
            intensity=None if self.intensity is None else self.intensity.copy(),
            viewpoint=self.viewpoint.copy(),
        )

    def select(self, mask_or_indices) -> "LabeledCloud":
        """Cloud restricted to a boolean mask or index array; viewpoint kept."""
        return replace(
            self,
            points=self.points[mask_or_indices],
            labels=self.labels[mask_or_indices],
            intensity=None if self.intensity is None else self.intensity[mask_or_indices],
            viewpoint=self.viewpoint.copy(),
        )


@dataclass
class ClassStats:
    """Per-class point counts and normalized frequencies."""

    counts: np.ndarray
    frequencies: np.ndarray
    num_classes: int

    @property
    def present(self) -> np.ndarray:
        """Ids of classes with at least one point."""
        return np.flatnonzero(self.counts > 0)


def class_histogram(labels, num_classes: int) -> ClassStats:
    """Exact per-class tally; frequencies sum to 1 when any points exist."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size:
        if y.min() < 0:
            raise DataError(f"negative label at point {int(np.argmax(y < 0))}")
        if y.max() >= num_classes:
            j = int(np.argmax(y >= num_classes))
            raise DataError(f"label {y[j]} >= num_classes {num_classes} at point {j}")
    counts = np.bincount(y, minlength=num_classes).astype(np.int64)
    total = counts.sum()
    freqs = counts / total if total > 0 else np.zeros(num_classes)
    return ClassStats(counts=counts, frequencies=freqs, num_classes=num_classes)


def viewpoint_distances(cloud: LabeledCloud) -> np.ndarray:
    """Euclidean distance of every point from the sensor viewpoint."""
    return np.linalg.norm(cloud.points - cloud.viewpoint, axis=1)
