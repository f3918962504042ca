"""Input validation helpers shared by the estimators."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.utils.validation import check_array

from .datastore import NORM_TOL, LabeledFeatureSet


def check_features(X, d: int | None = None, *, unit_norm: bool = True) -> np.ndarray:
    """Return ``X`` as a finite float64 ``(n, d)`` array of unit-norm rows."""
    if isinstance(X, LabeledFeatureSet):
        X = X.features
    X = check_array(X, dtype=np.float64, ensure_min_samples=0, ensure_all_finite=True)
    if d is not None and X.shape[1] != d:
        raise ValueError(f"dimension mismatch: got {X.shape[1]} features, expected {d}")
    if unit_norm and len(X):
        norms = np.linalg.norm(X, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
        if bad.size:
            raise ValueError(f"row {bad[0]} has norm {norms[bad[0]]:.6f}; features must be unit norm")
    return X


def check_labels(y, n: int) -> list[str]:
    if isinstance(y, LabeledFeatureSet):
        y = y.labels
    y = [str(v) for v in y]
    if len(y) != n:
        raise ValueError(f"length mismatch: {n} rows, {len(y)} labels")
    return y


def check_class_list(classes: Sequence[str]) -> list[str]:
    classes = list(classes)
    if not classes:
        raise ValueError("empty class list")
    if len(set(classes)) != len(classes):
        raise ValueError("duplicate class names")
    return classes
