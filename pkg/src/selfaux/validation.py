"""Input checks shared by the estimator and the harness."""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.utils import check_array

from .exceptions import ConfigurationError, ShapeError


def check_inputs(X, n_features: Optional[int] = None) -> np.ndarray:
    """2-D finite float64 array, optionally with a fixed number of columns."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if n_features is not None and X.shape[1] != n_features:
        raise ShapeError(f"expected {n_features} input features, got {X.shape[1]}")
    return X


def check_targets(Y, n_samples: int, kinds: Sequence[str], n_classes: Optional[Sequence[int]] = None) -> List[np.ndarray]:
    """Per-task label vectors from an (n, T) array or a sequence of T vectors.

    Regression labels become float64, classification labels int64 in
    ``[0, n_classes[t])``.
    """
    if Y is None:
        raise ValueError("labels are required for every task")
    if isinstance(Y, np.ndarray) and Y.ndim == 2:
        columns = [Y[:, t] for t in range(Y.shape[1])]
    elif isinstance(Y, np.ndarray) and Y.ndim == 1 and len(kinds) == 1:
        columns = [Y]
    else:
        columns = list(Y)
    if len(columns) != len(kinds):
        raise ShapeError(f"got labels for {len(columns)} tasks, expected {len(kinds)}")
    out = []
    for t, (y, kind) in enumerate(zip(columns, kinds)):
        y = check_array(np.asarray(y), ensure_2d=False, dtype=np.float64).ravel()
        if len(y) != n_samples:
            raise ShapeError(f"task {t}: {len(y)} labels for {n_samples} samples")
        if kind == "classification":
            if not np.all(y == np.round(y)):
                raise ValueError(f"task {t}: class labels must be integers")
            y = y.astype(np.int64)
            hi = None if n_classes is None else n_classes[t]
            if y.min(initial=0) < 0 or (hi is not None and y.max(initial=0) >= hi):
                raise ValueError(f"task {t}: class labels must lie in [0, {hi})")
        out.append(y)
    return out


def check_task_weights(weights, n_tasks: int) -> Optional[tuple]:
    if weights is None:
        return None
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.shape != (n_tasks,):
        raise ConfigurationError(f"{w.size} task weights for {n_tasks} tasks")
    if not np.all(np.isfinite(w)) or np.any(w < 0) or w.sum() <= 0:
        raise ConfigurationError(f"task weights must be non-negative, finite and not all zero, got {w.tolist()}")
    return tuple(float(v) for v in w)


def check_seed(random_state) -> int:
    """Integer seed; ``None`` maps to 0 so runs stay reproducible."""
    if random_state is None:
        return 0
    if isinstance(random_state, (bool, np.bool_)) or not isinstance(random_state, (int, np.integer)):
        raise ConfigurationError(f"random_state must be an integer seed, got {random_state!r}")
    if random_state < 0 or random_state >= 2**64:
        raise ConfigurationError(f"seed must fit in an unsigned 64-bit integer, got {random_state}")
    return int(random_state)
