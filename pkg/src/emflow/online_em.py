"""Online EM over the latent Gaussian: decaying step sizes, per-batch local
estimates blended into running global ones, diagonal inflation for
robustness, and an optional FIFO super-batch buffer.

The global estimates follow a stochastic approximation of the Gaussian
sufficient statistics: each batch is imputed under the current estimates,
its local mean/covariance computed, and the globals moved toward them by a
step rho_t = C * t^-gamma.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ValidationError
from .gaussian import (
    GaussianParams,
    ensure_pd,
    impute_matrix,
    padded_cov_sum,
    symmetrize,
)

#: (first outer iteration, beta) pairs; beta stays in force until the next entry
DEFAULT_INFLATION_SCHEDULE = ((1, 1e-2), (3, 1e-3), (5, 0.0))


@dataclass
class EmConfig:
    """Step-size schedule, inflation schedule, and buffering knobs.

    step_scale is C and step_decay is gamma in rho_t = C * t^-gamma; C must
    lie in (0, 1] and gamma in (0.5, 1] so that 0 < rho_t < 1 holds from the
    first step and the usual summability conditions are met.
    """

    step_scale: float = 0.99
    step_decay: float = 0.8
    inflation_schedule: tuple = DEFAULT_INFLATION_SCHEDULE
    superbatch_max: int = 0
    reinit_each_iteration: bool = True

    def validate(self) -> list[str]:
        problems = []
        if not 0.0 < self.step_scale <= 1.0:
            problems.append(f"step_scale must lie in (0, 1], got {self.step_scale}")
        if not 0.5 < self.step_decay <= 1.0:
            problems.append(f"step_decay must lie in (0.5, 1], got {self.step_decay}")
        if self.superbatch_max < 0:
            problems.append(f"superbatch_max must be >= 0, got {self.superbatch_max}")
        for entry in self.inflation_schedule:
            if len(entry) != 2 or entry[0] < 1 or entry[1] < 0:
                problems.append(f"bad inflation schedule entry {entry}")
        return problems

    def check(self) -> "EmConfig":
        problems = self.validate()
        if problems:
            raise ConfigError(problems)
        return self


def step_size(t: int, config: EmConfig) -> float:
    """rho_t = C * t^-gamma for t >= 1."""
    if t < 1:
        raise ValidationError(f"step counter must be >= 1, got {t}")
    return config.step_scale * float(t) ** (-config.step_decay)


def inflation_at(config: EmConfig, outer_iteration: int) -> float:
    """Diagonal inflation in force at a given outer inference iteration."""
    beta = 0.0
    for start, value in sorted(config.inflation_schedule):
        if outer_iteration >= start:
            beta = value
    return beta


def robustify(cov: np.ndarray, beta: float) -> np.ndarray:
    """Enlarge diagonal entries proportionally: cov + beta * Diag(cov)."""
    if beta < 0:
        raise ValidationError(f"beta must be >= 0, got {beta}")
    cov = np.asarray(cov, dtype=np.float64)
    return cov + beta * np.diag(np.diag(cov))


@dataclass
class OnlineEmState:
    """Running global estimates plus the super-batch buffer."""

    params: GaussianParams
    config: EmConfig
    t: int = 0
    outer_iteration: int = 1
    buffer_rows: np.ndarray = field(default=None)
    buffer_masks: np.ndarray = field(default=None)

    @property
    def buffer_size(self) -> int:
        return 0 if self.buffer_rows is None else self.buffer_rows.shape[0]


def init_from_batch(
    Z_B: np.ndarray, config: EmConfig, outer_iteration: int = 1
) -> OnlineEmState:
    """Bootstrap the globals from the first batch's sample moments.

    The batch is treated as complete (it holds already-imputed embeddings);
    the covariance uses the 1/B normalizer, then the scheduled inflation and
    a PD jitter are applied. The step counter starts at 0.
    """
    Z_B = np.asarray(Z_B, dtype=np.float64)
    if Z_B.ndim != 2 or Z_B.shape[0] < 2:
        raise ValidationError(f"need a (B>=2, p) batch, got shape {Z_B.shape}")
    config.check()
    mean = Z_B.mean(axis=0)
    centered = Z_B - mean
    cov = centered.T @ centered / Z_B.shape[0]
    cov = robustify(cov, inflation_at(config, outer_iteration))
    params = GaussianParams(mean, ensure_pd(cov))
    return OnlineEmState(params=params, config=config, t=0,
                         outer_iteration=outer_iteration)


def _push_buffer(state: OnlineEmState, rows: np.ndarray, masks: np.ndarray) -> None:
    cap = state.config.superbatch_max
    if cap <= 0:
        return
    if state.buffer_rows is None:
        combined_rows, combined_masks = rows, masks
    else:
        combined_rows = np.concatenate([state.buffer_rows, rows])
        combined_masks = np.concatenate([state.buffer_masks, masks])
    # strict FIFO: evict the oldest rows once the cap is exceeded
    state.buffer_rows = combined_rows[-cap:].copy()
    state.buffer_masks = combined_masks[-cap:].copy()


def em_update(
    state: OnlineEmState, Z_B: np.ndarray, masks: np.ndarray
) -> tuple[OnlineEmState, np.ndarray]:
    """One online EM step; mutates and returns the state.

    The current batch is imputed under the current globals; buffered rows
    join it for the local estimates with their stored values (they are never
    re-imputed, only their conditional covariances are re-evaluated under the
    current globals). Globals then move toward the local estimates by
    rho_t, the scheduled inflation is applied, and the result is symmetrized
    and jittered PD. Finally the imputed rows enter the buffer.
    """
    Z_B = np.asarray(Z_B, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if Z_B.ndim != 2 or Z_B.shape[0] == 0:
        raise ValidationError(f"need a non-empty (B, p) batch, got {Z_B.shape}")
    if Z_B.shape != masks.shape:
        raise ValidationError("batch and masks shapes disagree")

    imputed, cov_sum = impute_matrix(Z_B, masks, state.params)

    if state.buffer_size:
        rows = np.concatenate([imputed, state.buffer_rows])
        cov_sum = cov_sum + padded_cov_sum(state.buffer_masks, state.params)
    else:
        rows = imputed
    local_mean = rows.mean(axis=0)
    centered = rows - local_mean
    local_cov = (centered.T @ centered + cov_sum) / rows.shape[0]

    state.t += 1
    rho = step_size(state.t, state.config)
    mean = rho * local_mean + (1.0 - rho) * state.params.mean
    cov = rho * local_cov + (1.0 - rho) * state.params.cov
    cov = robustify(cov, inflation_at(state.config, state.outer_iteration))
    state.params = GaussianParams(mean, ensure_pd(symmetrize(cov)))

    _push_buffer(state, imputed, masks)
    return state, imputed
