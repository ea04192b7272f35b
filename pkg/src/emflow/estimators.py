"""Scikit-learn-style imputers wrapping the engine and the batch-EM baseline.

Missing values are NaN-coded in the input array, following the sklearn
imputer convention; internally they become an explicit (values, mask) pair.
Both classes implement fit/transform/fit_transform and compose with
sklearn pipelines, clone, and get_params/set_params.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import baseline_em
from .data import DataMatrix, MaskMatrix, apply_scaler, fit_scaler, initial_impute, invert_scaler
from .engine import TrainConfig, reimputation_phase, run
from .exceptions import ValidationError
from .online_em import DEFAULT_INFLATION_SCHEDULE, EmConfig
from .validation import as_float_matrix


def _split_nan(X) -> tuple[np.ndarray, np.ndarray]:
    values = as_float_matrix(X, "X", allow_nan=True)
    mask = np.isnan(values)
    filled = values.copy()
    filled[mask] = 0.0  # placeholder; every caller re-fills masked cells
    return filled, mask


class EMFlowImputer(TransformerMixin, BaseEstimator):
    """Iterative imputer alternating flow training and latent-space EM.

    Parameters mirror the engine config. ``transform`` on new data applies
    the frozen fitted model: naive initial fill from the training pools, then
    ``transform_passes`` re-imputation passes (defaults to the number of
    outer iterations used in fit).
    """

    def __init__(
        self,
        outer_iterations: int = 5,
        epochs_per_phase: int = 10,
        batch_size: int = 256,
        learning_rate: float = 1e-4,
        recon_weight: float = 1e6,
        flow_depth: int = 6,
        hidden_units: int | None = None,
        initial_strategy: str = "random-observed",
        step_scale: float = 0.99,
        step_decay: float = 0.8,
        inflation_schedule: tuple = DEFAULT_INFLATION_SCHEDULE,
        superbatch_max: int = 0,
        reinit_each_iteration: bool = True,
        scale_features: bool = True,
        transform_passes: int | None = None,
        random_state: int = 0,
    ):
        self.outer_iterations = outer_iterations
        self.epochs_per_phase = epochs_per_phase
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.recon_weight = recon_weight
        self.flow_depth = flow_depth
        self.hidden_units = hidden_units
        self.initial_strategy = initial_strategy
        self.step_scale = step_scale
        self.step_decay = step_decay
        self.inflation_schedule = inflation_schedule
        self.superbatch_max = superbatch_max
        self.reinit_each_iteration = reinit_each_iteration
        self.scale_features = scale_features
        self.transform_passes = transform_passes
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        em = EmConfig(
            step_scale=self.step_scale,
            step_decay=self.step_decay,
            inflation_schedule=tuple(tuple(e) for e in self.inflation_schedule),
            superbatch_max=self.superbatch_max,
            reinit_each_iteration=self.reinit_each_iteration,
        )
        return TrainConfig(
            outer_iterations=self.outer_iterations,
            epochs_per_phase=self.epochs_per_phase,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            recon_weight=self.recon_weight,
            flow_depth=self.flow_depth,
            hidden_units=self.hidden_units,
            initial_strategy=self.initial_strategy,
            em=em,
            seed=self.random_state,
        ).validate()

    def fit(self, X, y=None):
        values, mask = _split_nan(X)
        config = self._config()
        data = DataMatrix(values)
        mask_m = MaskMatrix(mask)
        if self.scale_features:
            self.scaler_ = fit_scaler(data, mask_m)
            scaled = apply_scaler(data, self.scaler_).values
        else:
            self.scaler_ = None
            scaled = values
        result = run(scaled, mask, config)
        self.flow_ = result.flow
        self.base_ = result.base
        self.trace_ = result.trace
        self.n_features_in_ = values.shape[1]
        self.train_values_ = scaled
        self.train_mask_ = mask
        self._fit_imputed_scaled = result.imputed.values
        return self

    def _check_fitted(self):
        if not hasattr(self, "flow_"):
            raise ValidationError("imputer is not fitted; call fit first")

    def _finish(self, scaled_imputed, original_values, mask) -> np.ndarray:
        if self.scaler_ is not None:
            out = invert_scaler(DataMatrix(scaled_imputed), self.scaler_).values
        else:
            out = scaled_imputed.copy()
        out[~mask] = original_values[~mask]  # observed cells bit-exact
        return out

    def fit_transform(self, X, y=None):
        """Fit and return the engine's final imputation of X itself."""
        self.fit(X, y)
        values, mask = _split_nan(X)
        return self._finish(self._fit_imputed_scaled, values, mask)

    def transform(self, X):
        """Impute new NaN-coded rows with the frozen fitted model."""
        self._check_fitted()
        values, mask = _split_nan(X)
        if values.shape[1] != self.n_features_in_:
            raise ValidationError(
                f"X has {values.shape[1]} features, imputer was fitted with "
                f"{self.n_features_in_}"
            )
        if self.scaler_ is not None:
            scaled = apply_scaler(DataMatrix(values), self.scaler_).values
        else:
            scaled = values.copy()
        scaled[mask] = 0.0
        current = initial_impute(
            DataMatrix(scaled), MaskMatrix(mask), self.initial_strategy,
            seed=self.random_state,
            reference=(DataMatrix(self.train_values_), MaskMatrix(self.train_mask_)),
        ).values
        passes = self.transform_passes
        if passes is None:
            passes = max(1, self.outer_iterations)
        for _ in range(passes):
            current = reimputation_phase(current, mask, self.flow_, self.base_)
        return self._finish(current, values, mask)


class BatchEMImputer(TransformerMixin, BaseEstimator):
    """Conditional-mean imputer under a full-batch EM Gaussian fit."""

    def __init__(self, max_iter: int = 500, tol: float = 1e-8,
                 scale_features: bool = True):
        self.max_iter = max_iter
        self.tol = tol
        self.scale_features = scale_features

    def fit(self, X, y=None):
        values, mask = _split_nan(X)
        data = DataMatrix(values)
        mask_m = MaskMatrix(mask)
        if self.scale_features:
            self.scaler_ = fit_scaler(data, mask_m)
            scaled = apply_scaler(data, self.scaler_).values
        else:
            self.scaler_ = None
            scaled = values
        scaled = scaled.copy()
        scaled[mask] = 0.0
        self.params_, self.n_iter_, self.loglik_trace_ = baseline_em.batch_em_fit(
            scaled, mask, max_iter=self.max_iter, tol=self.tol
        )
        self.n_features_in_ = values.shape[1]
        return self

    def transform(self, X):
        if not hasattr(self, "params_"):
            raise ValidationError("imputer is not fitted; call fit first")
        values, mask = _split_nan(X)
        if values.shape[1] != self.n_features_in_:
            raise ValidationError(
                f"X has {values.shape[1]} features, imputer was fitted with "
                f"{self.n_features_in_}"
            )
        if self.scaler_ is not None:
            scaled = apply_scaler(DataMatrix(values), self.scaler_).values
        else:
            scaled = values.copy()
        scaled[mask] = 0.0
        imputed = baseline_em.batch_em_impute(scaled, mask, self.params_)
        if self.scaler_ is not None:
            out = invert_scaler(DataMatrix(imputed), self.scaler_).values
        else:
            out = imputed
        out[~mask] = values[~mask]
        return out
