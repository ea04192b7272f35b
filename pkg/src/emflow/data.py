"""Dataset containers, min-max scaling, naive initial imputation, and CSV I/O.

Missingness is always carried out-of-band: a value matrix holds finite
numbers everywhere, and a paired boolean mask marks which cells are missing
(True = missing). CSV ingestion turns empty fields or a sentinel token into
mask bits and fills the corresponding value cells with the feature median so
the value matrix stays finite.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ValidationError
from .validation import as_float_matrix, as_mask_matrix, check_paired

INITIAL_IMPUTE_STRATEGIES = ("random-observed", "median", "nearest-neighbor-grid")


@dataclass
class DataMatrix:
    """n x p matrix of finite values with optional feature names."""

    values: np.ndarray
    feature_names: list[str] | None = None

    def __post_init__(self):
        self.values = as_float_matrix(self.values, "values")
        n, p = self.values.shape
        if n < 1 or p < 2:
            raise ValidationError(f"need n >= 1 and p >= 2, got shape {(n, p)}")
        if self.feature_names is not None and len(self.feature_names) != p:
            raise ValidationError(
                f"{len(self.feature_names)} feature names for {p} features"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class MaskMatrix:
    """Binary missingness pattern; True (1) marks a missing cell."""

    mask: np.ndarray

    def __post_init__(self):
        self.mask = as_mask_matrix(self.mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def missing_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass
class FeatureScaler:
    """Per-feature observed min/max; constant features are flagged."""

    mins: np.ndarray
    maxs: np.ndarray
    constant: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mins = np.asarray(self.mins, dtype=np.float64)
        self.maxs = np.asarray(self.maxs, dtype=np.float64)
        if self.mins.shape != self.maxs.shape or self.mins.ndim != 1:
            raise ValidationError("scaler mins/maxs must be matching 1-D vectors")
        if np.any(self.mins > self.maxs):
            raise ValidationError("scaler requires min <= max for every feature")
        if self.constant is None:
            self.constant = self.mins == self.maxs
        self.constant = np.asarray(self.constant, dtype=bool)


@dataclass
class ImputedDataset:
    """Complete value matrix whose mask records which cells were filled in."""

    values: np.ndarray
    mask: MaskMatrix

    def __post_init__(self):
        self.values = as_float_matrix(self.values, "imputed values")
        check_paired(self.values, self.mask.mask)


def fit_scaler(data: DataMatrix, mask: MaskMatrix) -> FeatureScaler:
    """Per-feature min/max over observed entries only.

    Raises ValidationError naming the first feature with zero observed
    entries.
    """
    check_paired(data.values, mask.mask)
    observed = ~mask.mask
    counts = observed.sum(axis=0)
    if np.any(counts == 0):
        j = int(np.argmin(counts))
        name = data.feature_names[j] if data.feature_names else f"column {j}"
        raise ValidationError(f"feature '{name}' has no observed entries")
    masked = np.where(observed, data.values, np.nan)
    return FeatureScaler(np.nanmin(masked, axis=0), np.nanmax(masked, axis=0))


def apply_scaler(data: DataMatrix, scaler: FeatureScaler) -> DataMatrix:
    """Map each feature's observed range onto [0, 1]; constant features to 0.5."""
    values = data.values
    if values.shape[1] != scaler.mins.shape[0]:
        raise ValidationError(
            f"data has {values.shape[1]} features, scaler has {scaler.mins.shape[0]}"
        )
    span = np.where(scaler.constant, 1.0, scaler.maxs - scaler.mins)
    scaled = (values - scaler.mins) / span
    scaled[:, scaler.constant] = 0.5
    return DataMatrix(scaled, data.feature_names)


def invert_scaler(data: DataMatrix, scaler: FeatureScaler) -> DataMatrix:
    """Inverse of apply_scaler; constant features return their stored value."""
    values = data.values
    if values.shape[1] != scaler.mins.shape[0]:
        raise ValidationError(
            f"data has {values.shape[1]} features, scaler has {scaler.mins.shape[0]}"
        )
    span = np.where(scaler.constant, 1.0, scaler.maxs - scaler.mins)
    raw = values * span + scaler.mins
    raw[:, scaler.constant] = np.broadcast_to(
        scaler.mins[scaler.constant], raw[:, scaler.constant].shape
    )
    return DataMatrix(raw, data.feature_names)


def _feature_medians(values: np.ndarray, observed: np.ndarray) -> np.ndarray:
    masked = np.where(observed, values, np.nan)
    return np.nanmedian(masked, axis=0)


def initial_impute(
    data: DataMatrix,
    mask: MaskMatrix,
    strategy: str = "random-observed",
    seed: int = 0,
    grid_shape: tuple[int, int] | None = None,
    reference: tuple[DataMatrix, MaskMatrix] | None = None,
) -> ImputedDataset:
    """Fill missing cells with a naive strategy; observed cells are untouched.

    Strategies:
      random-observed        draw uniformly from the feature's observed values
      median                 feature-wise observed median
      nearest-neighbor-grid  rows are flattened grids of shape ``grid_shape``;
                             each missing cell samples uniformly among its
                             4-neighborhood's observed or already-filled cells
                             in raster-scan order

    ``reference`` supplies the (data, mask) pair whose observed entries form
    the sampling pools and medians; it defaults to the data itself. Held-out
    rows are imputed with the training fold as reference so no test
    statistics leak in.

    Pure function of (data, mask, strategy, seed, reference).
    """
    check_paired(data.values, mask.mask)
    if strategy not in INITIAL_IMPUTE_STRATEGIES:
        raise ValidationError(
            f"unknown strategy '{strategy}', expected one of {INITIAL_IMPUTE_STRATEGIES}"
        )
    values = data.values.copy()
    missing = mask.mask
    observed = ~missing
    if reference is None:
        ref_values, ref_observed = values, observed
    else:
        ref_values = reference[0].values
        ref_observed = ~reference[1].mask
        if ref_values.shape[1] != values.shape[1]:
            raise ValidationError("reference feature count does not match data")
    if np.any(ref_observed.sum(axis=0) == 0):
        j = int(np.argmin(ref_observed.sum(axis=0)))
        raise ValidationError(f"feature {j} has no observed entries")

    if strategy == "median":
        medians = _feature_medians(ref_values, ref_observed)
        values[missing] = np.broadcast_to(medians, values.shape)[missing]
    elif strategy == "random-observed":
        rng = np.random.default_rng(seed)
        for j in range(values.shape[1]):
            rows = np.flatnonzero(missing[:, j])
            if rows.size == 0:
                continue
            pool = ref_values[ref_observed[:, j], j]
            values[rows, j] = rng.choice(pool, size=rows.size, replace=True)
    else:
        if grid_shape is None:
            raise ValidationError("nearest-neighbor-grid requires a declared grid shape")
        h, w = grid_shape
        if h * w != values.shape[1]:
            raise ValidationError(
                f"grid shape {grid_shape} does not flatten to {values.shape[1]} features"
            )
        rng = np.random.default_rng(seed)
        medians = _feature_medians(ref_values, ref_observed)
        for i in range(values.shape[0]):
            filled = observed[i].reshape(h, w).copy()
            row = values[i].reshape(h, w)
            for r in range(h):
                for c in range(w):
                    if filled[r, c]:
                        continue
                    neighbors = [
                        (r + dr, c + dc)
                        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
                        if 0 <= r + dr < h and 0 <= c + dc < w
                    ]
                    candidates = [row[nr, nc] for nr, nc in neighbors if filled[nr, nc]]
                    if candidates:
                        row[r, c] = candidates[int(rng.integers(len(candidates)))]
                    else:
                        # isolated cell with no filled neighbor yet
                        row[r, c] = medians[r * w + c]
                    filled[r, c] = True
            values[i] = row.reshape(-1)

    return ImputedDataset(values, mask)


def read_data_csv(
    path,
    has_header: bool = False,
    na_token: str = "NA",
) -> tuple[DataMatrix, MaskMatrix]:
    """Read a CSV of floats; empty fields or ``na_token`` become mask bits.

    Missing value cells are filled with the feature's observed median so the
    returned DataMatrix stays finite.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]
    if not rows:
        raise ValidationError(f"{path}: empty CSV")
    names = None
    if has_header:
        names = [cell.strip() for cell in rows[0]]
        rows = rows[1:]
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    p = len(rows[0])
    values = np.zeros((len(rows), p))
    mask = np.zeros((len(rows), p), dtype=bool)
    for i, row in enumerate(rows):
        if len(row) != p:
            raise ValidationError(f"{path}: row {i} has {len(row)} fields, expected {p}")
        for j, cell in enumerate(row):
            token = cell.strip()
            if token == "" or token == na_token:
                mask[i, j] = True
            else:
                try:
                    values[i, j] = float(token)
                except ValueError as err:
                    raise ValidationError(
                        f"{path}: row {i} column {j}: cannot parse '{token}'"
                    ) from err
    observed = ~mask
    if np.any(observed.sum(axis=0) == 0):
        j = int(np.argmin(observed.sum(axis=0)))
        raise ValidationError(f"{path}: column {j} has no observed entries")
    medians = _feature_medians(values, observed)
    values[mask] = np.broadcast_to(medians, values.shape)[mask]
    return DataMatrix(values, names), MaskMatrix(mask)


def write_data_csv(path, data: DataMatrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if data.feature_names:
            writer.writerow(data.feature_names)
        for row in data.values:
            writer.writerow([repr(float(v)) for v in row])


def read_mask_csv(path) -> MaskMatrix:
    arr = np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)
    return MaskMatrix(arr)


def write_mask_csv(path, mask: MaskMatrix) -> None:
    np.savetxt(path, mask.mask.astype(np.int64), fmt="%d", delimiter=",")
