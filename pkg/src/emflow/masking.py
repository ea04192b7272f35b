"""Missingness simulators for benchmarking (MCAR and MAR).

Both simulators draw each row from its own random substream keyed by
(seed, row index), so a row's mask never depends on how many other rows are
present or in what order they appear.
"""

from __future__ import annotations

import numpy as np

from .data import DataMatrix, MaskMatrix
from .exceptions import ValidationError


def _row_rng(seed: int, row: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(row)]))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def mcar_mask(n: int, p: int, rate: float, seed: int = 0) -> MaskMatrix:
    """Each cell independently missing with probability ``rate``."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"rate must lie in [0, 1), got {rate}")
    if n < 1 or p < 1:
        raise ValidationError(f"need n >= 1 and p >= 1, got {(n, p)}")
    mask = np.empty((n, p), dtype=bool)
    for i in range(n):
        mask[i] = _row_rng(seed, i).random(p) < rate
    return MaskMatrix(mask)


def num_retained_features(p: int) -> int:
    """Count of leading fully-observed features under the MAR mechanism."""
    return int(np.floor(0.7 * p))


def mar_mask(data: DataMatrix, seed: int = 0) -> MaskMatrix:
    """Missing-at-random mechanism driven by the leading features.

    The first floor(0.7 * p) features of every row stay observed; each of the
    remaining features of row i is independently missing with probability
    sigmoid(sum of row i's retained features). Expects data already min-max
    scaled to [0, 1].
    """
    values = data.values
    n, p = values.shape
    if p < 2:
        raise ValidationError("MAR needs p >= 2 so at least one feature is maskable")
    d = num_retained_features(p)
    if d < 1 or d >= p:
        raise ValidationError(f"p={p} leaves no retained or no maskable features")
    probs = sigmoid(values[:, :d].sum(axis=1))
    mask = np.zeros((n, p), dtype=bool)
    for i in range(n):
        mask[i, d:] = _row_rng(seed, i).random(p - d) < probs[i]
    return MaskMatrix(mask)
