"""Full-batch EM imputation under a multivariate Gaussian.

A linear-model baseline in its own right, and the convergence oracle the
online updates are checked against: both share the same per-batch estimate
formulas, so streaming long enough must land on this fixed point.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ValidationError
from .gaussian import (
    GaussianParams,
    _pattern_groups,
    batch_em_estimates,
    chol_with_jitter,
    ensure_pd,
    impute_matrix,
    log_density,
)
from .online_em import robustify

INIT_INFLATION = 0.1


def observed_loglik(Z: np.ndarray, masks: np.ndarray, params: GaussianParams) -> float:
    """Sum over rows of the Gaussian log-density of the observed block."""
    Z = np.asarray(Z, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    total = 0.0
    for pattern, rows in _pattern_groups(masks):
        observed_idx = np.flatnonzero(~pattern)
        if observed_idx.size == 0:
            continue
        marginal = GaussianParams(
            params.mean[observed_idx],
            params.cov[np.ix_(observed_idx, observed_idx)],
        )
        total += float(np.sum(log_density(Z[np.ix_(rows, observed_idx)], marginal)))
    return total


def default_init(Z: np.ndarray, masks: np.ndarray) -> GaussianParams:
    """Column means of observed entries and inflated diagonal covariance."""
    observed = ~np.asarray(masks, dtype=bool)
    counts = observed.sum(axis=0)
    if np.any(counts == 0):
        raise ValidationError(f"feature {int(np.argmin(counts))} has no observed entries")
    masked = np.where(observed, Z, np.nan)
    mean = np.nanmean(masked, axis=0)
    var = np.nanvar(masked, axis=0)
    cov = robustify(np.diag(var), INIT_INFLATION)
    return GaussianParams(mean, ensure_pd(cov))


def batch_em_fit(
    Z: np.ndarray,
    masks: np.ndarray,
    init: GaussianParams | None = None,
    max_iter: int = 500,
    tol: float = 1e-8,
) -> tuple[GaussianParams, int, list[float]]:
    """Iterate full-batch EM to a fixed point.

    Stops when max |delta mean| + max |delta cov| < tol or after max_iter
    sweeps. Returns (params, iterations used, observed log-likelihood trace).
    """
    Z = np.asarray(Z, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if Z.shape != masks.shape:
        raise ValidationError("Z and masks shapes disagree")
    params = default_init(Z, masks) if init is None else init
    chol_with_jitter(params.cov)  # fail fast on a bad init
    trace = [observed_loglik(Z, masks, params)]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        mean, cov = batch_em_estimates(Z, masks, params)
        new = GaussianParams(mean, ensure_pd(cov))
        delta = (
            np.max(np.abs(new.mean - params.mean))
            + np.max(np.abs(new.cov - params.cov))
        )
        params = new
        trace.append(observed_loglik(Z, masks, params))
        if delta < tol:
            break
    return params, iterations, trace


def batch_em_impute(
    Z: np.ndarray, masks: np.ndarray, params: GaussianParams
) -> np.ndarray:
    """Replace missing cells by conditional means under fitted parameters."""
    imputed, _ = impute_matrix(Z, masks, params)
    return imputed
