"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .corpus import AVSample
from .errors import DataError, NumericError


def check_samples(X) -> list[AVSample]:
    """Validate a sequence of AVSample objects and return it as a list."""
    samples = list(X)
    if not samples:
        raise DataError("expected at least one sample")
    for i, s in enumerate(samples):
        if not isinstance(s, AVSample):
            raise DataError(f"element {i} is {type(s).__name__}, expected AVSample")
        s.validate()
    return samples


def check_labels(y, n_samples: int) -> np.ndarray:
    """Validate an (n, 2) binary label array."""
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (n_samples, 2):
        raise DataError(f"labels must have shape ({n_samples}, 2), got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be binary")
    return y


def check_finite_array(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} contains non-finite values")
    return arr
