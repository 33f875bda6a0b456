"""Input validation helpers shared by backends, scores and engines.

All data enters through these functions: shapes are normalized to float64
arrays and non-finite values are rejected up front with the offending
position named, so nothing downstream has to re-check.
"""

from __future__ import annotations

import numpy as np


def check_matrix(X, name: str = "X") -> np.ndarray:
    """Validate a 2-D feature matrix; returns a float64 C-contiguous copy-on-need."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D (n_samples, n_features), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} has no rows")
    if X.shape[1] == 0:
        raise ValueError(f"{name} has no feature columns")
    bad = ~np.isfinite(X)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValueError(f"{name} contains a non-finite value at row {i}, column {j}")
    return np.ascontiguousarray(X)


def check_vector(y, n: int | None = None, name: str = "y") -> np.ndarray:
    """Validate a 1-D response/score vector, optionally of a required length."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {y.shape}")
    if y.size == 0:
        raise ValueError(f"{name} is empty")
    bad = ~np.isfinite(y)
    if bad.any():
        i = int(np.argwhere(bad)[0][0])
        raise ValueError(f"{name} contains a non-finite value at position {i}")
    if n is not None and y.size != n:
        raise ValueError(f"{name} has length {y.size}, expected {n}")
    return np.ascontiguousarray(y)


def check_consistent(X: np.ndarray, y: np.ndarray) -> None:
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")


def check_feature_count(X: np.ndarray, d: int, name: str = "X") -> None:
    """Predict-time guard: feature count must match the fitted dimension."""
    if X.shape[1] != d:
        raise ValueError(f"{name} has {X.shape[1]} features, model was fitted with {d}")
