"""Input checks shared by the estimator and the harness."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import SoftLabel
from .data import PairSample
from .exceptions import DataError, LengthMismatch, MismatchedTarget


def check_pair_samples(X) -> list[PairSample]:
    if isinstance(X, PairSample):
        raise DataError("expected a sequence of PairSample, got a single sample")
    samples = list(X)
    if not samples:
        raise DataError("no samples given")
    bad = [type(s).__name__ for s in samples if not isinstance(s, PairSample)]
    if bad:
        raise DataError(f"expected PairSample items, got {sorted(set(bad))}")
    channels = {s.image.shape[2] if s.image.ndim == 3 else -1 for s in samples}
    if len(channels) != 1 or -1 in channels:
        raise DataError(f"images must be H x W x C with one channel count, got {channels}")
    return samples


def targets_from_records(samples: Sequence[PairSample], soft: bool) -> np.ndarray:
    """Soft labels ``(n, R)`` or majority labels ``(n,)`` taken from the records."""
    if soft:
        return np.stack([s.record.soft_label.as_array() for s in samples])
    labels = []
    for s in samples:
        if not s.record.is_consistent:
            raise MismatchedTarget(
                f"record {s.record.record_id} has no majority label; hard-label losses need consistent records")
        labels.append(s.record.majority_label)
    return np.asarray(labels, dtype=np.int64)


def check_targets(y, n_samples: int, num_classes: int, soft: bool) -> np.ndarray:
    if isinstance(y, Sequence) and y and isinstance(y[0], SoftLabel):
        y = np.stack([label.as_array() for label in y])
    y = np.asarray(y)
    if y.shape[0] != n_samples:
        raise LengthMismatch(f"{y.shape[0]} targets for {n_samples} samples")
    if soft:
        if y.ndim != 2 or y.shape[1] != num_classes:
            raise MismatchedTarget(f"soft-label loss needs targets of shape (n, {num_classes})")
        y = y.astype(np.float64)
        if np.any(y < 0) or not np.allclose(y.sum(axis=1), 1.0, atol=1e-9):
            raise DataError("soft labels must be nonnegative and sum to 1")
        return y
    if y.ndim != 1:
        raise MismatchedTarget("hard-label loss needs a 1-d vector of class indices")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise DataError("class indices must be integers")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= num_classes):
        raise DataError(f"class indices must lie in [0, {num_classes})")
    return y.astype(np.int64)
