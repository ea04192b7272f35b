"""Full-covariance multivariate Gaussian: log-density, conditionals given an
observed sub-vector, conditional-mean imputation, and the per-batch EM
estimates built from them.

All covariance factorizations go through a Cholesky with escalating diagonal
jitter; plain matrix inversion is never used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .exceptions import NotPositiveDefiniteError, ValidationError
from .validation import check_vector

# escalation ladder for the relative diagonal jitter
_JITTER_STEPS = (1e-10, 1e-8, 1e-6)

LOG_2PI = float(np.log(2.0 * np.pi))


def symmetrize(cov: np.ndarray) -> np.ndarray:
    return 0.5 * (cov + cov.T)


def chol_with_jitter(cov: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, adding eps * mean-diagonal * I if needed.

    eps escalates 1e-10 -> 1e-8 -> 1e-6 before giving up. The jitter unit is
    trace/p, floored at 1 so an all-zero matrix is still rescued.

    Returns (L, jitter_added).
    """
    p = cov.shape[0]
    unit = max(float(np.trace(cov)) / p, 1.0) if p else 1.0
    jitters = (0.0,) + tuple(eps * unit for eps in _JITTER_STEPS)
    for jitter in jitters:
        try:
            shifted = cov if jitter == 0.0 else cov + jitter * np.eye(p)
            return cholesky(shifted, lower=True), jitter
        except np.linalg.LinAlgError:
            continue
    smallest = float(np.linalg.eigvalsh(symmetrize(cov))[0])
    raise NotPositiveDefiniteError(
        "covariance is not positive definite after jitter", smallest
    )


def ensure_pd(cov: np.ndarray) -> np.ndarray:
    """Symmetrize and bake in whatever jitter the factorization needed."""
    cov = symmetrize(np.asarray(cov, dtype=np.float64))
    _, jitter = chol_with_jitter(cov)
    if jitter:
        cov = cov + jitter * np.eye(cov.shape[0])
    return cov


class GaussianParams:
    """Mean vector and full covariance of the latent base distribution."""

    def __init__(self, mean, cov):
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValidationError(
                f"mean shape {mean.shape} incompatible with cov shape {cov.shape}"
            )
        asym = np.max(np.abs(cov - cov.T)) if cov.size else 0.0
        if asym > 1e-10:
            raise ValidationError(f"covariance asymmetric by {asym:.3e} (> 1e-10)")
        self.mean = mean
        self.cov = symmetrize(cov)
        self._chol = None

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def chol(self) -> np.ndarray:
        """Lower Cholesky factor of cov (jittered if strictly necessary)."""
        if self._chol is None:
            self._chol, _ = chol_with_jitter(self.cov)
        return self._chol

    def __repr__(self):
        return f"GaussianParams(dim={self.dim})"


@dataclass
class ConditionalGaussian:
    """Distribution of the missing block given the observed one."""

    mean: np.ndarray
    cov: np.ndarray
    missing_idx: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = symmetrize(np.asarray(self.cov, dtype=np.float64))
        self.missing_idx = np.asarray(self.missing_idx, dtype=np.intp)
        m = self.missing_idx.size
        if self.mean.shape != (m,) or self.cov.shape != (m, m):
            raise ValidationError("conditional blocks must match len(missing_idx)")


def log_density(z, params: GaussianParams):
    """Gaussian log-density via the Cholesky factor.

    Accepts a single length-p vector or a (B, p) batch; returns a float or a
    length-B vector correspondingly.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    rows = z[None, :] if single else z
    if rows.shape[1] != params.dim:
        raise ValidationError(f"z has {rows.shape[1]} dims, params has {params.dim}")
    L = params.chol
    centered = rows - params.mean
    w = solve_triangular(L, centered.T, lower=True)
    quad = np.sum(w * w, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    out = -0.5 * (params.dim * LOG_2PI + logdet + quad)
    return float(out[0]) if single else out


def _split_indices(mask_row: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask_row = np.asarray(mask_row, dtype=bool)
    return np.flatnonzero(~mask_row), np.flatnonzero(mask_row)


def conditional_gain(
    params: GaussianParams, observed_idx: np.ndarray, missing_idx: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Regression gain K = S_mo S_oo^-1 and conditional covariance.

    The gain turns observed residuals into conditional means; the conditional
    covariance is the Schur complement S_mm - K S_om. Shared by every row
    with the same missingness pattern.
    """
    cov = params.cov
    S_oo = cov[np.ix_(observed_idx, observed_idx)]
    S_mo = cov[np.ix_(missing_idx, observed_idx)]
    S_mm = cov[np.ix_(missing_idx, missing_idx)]
    L, _ = chol_with_jitter(S_oo)
    gain = cho_solve((L, True), S_mo.T).T
    cond_cov = symmetrize(S_mm - gain @ S_mo.T)
    return gain, cond_cov


def conditional(
    params: GaussianParams, observed_idx, observed_vals
) -> ConditionalGaussian:
    """Distribution of the remaining coordinates given observed ones.

    ``observed_idx`` must be non-empty, strictly increasing, and a proper
    subset of 0..p-1.
    """
    observed_idx = np.asarray(observed_idx, dtype=np.intp)
    if observed_idx.size == 0:
        raise ValidationError("observed_idx must be non-empty")
    if np.any(np.diff(observed_idx) <= 0):
        raise ValidationError("observed_idx must be strictly increasing")
    if observed_idx[0] < 0 or observed_idx[-1] >= params.dim:
        raise ValidationError("observed_idx out of range")
    missing_idx = np.setdiff1d(np.arange(params.dim), observed_idx)
    if missing_idx.size == 0:
        raise ValidationError("no missing coordinates to condition on")
    observed_vals = check_vector(observed_vals, observed_idx.size, "observed_vals")
    gain, cond_cov = conditional_gain(params, observed_idx, missing_idx)
    mean = params.mean[missing_idx] + gain @ (observed_vals - params.mean[observed_idx])
    return ConditionalGaussian(mean, cond_cov, missing_idx)


def impute_row(z, mask_row, params: GaussianParams) -> np.ndarray:
    """Replace missing coordinates of one row by their conditional mean.

    A fully missing row falls back to the marginal mean.
    """
    z = check_vector(z, params.dim, "z")
    observed_idx, missing_idx = _split_indices(mask_row)
    out = z.copy()
    if missing_idx.size == 0:
        return out
    if observed_idx.size == 0:
        out[:] = params.mean
        return out
    cond = conditional(params, observed_idx, z[observed_idx])
    out[missing_idx] = cond.mean
    return out


def padded_conditional_cov(cond: ConditionalGaussian, p: int) -> np.ndarray:
    """Scatter the conditional covariance into a p x p zero matrix."""
    if cond.missing_idx.size and (
        cond.missing_idx.min() < 0 or cond.missing_idx.max() >= p
    ):
        raise ValidationError("missing_idx out of range for padded matrix")
    out = np.zeros((p, p))
    out[np.ix_(cond.missing_idx, cond.missing_idx)] = cond.cov
    return out


def _pattern_groups(masks: np.ndarray):
    """Yield (mask_row, row_indices) for each distinct missingness pattern."""
    masks = np.asarray(masks, dtype=bool)
    patterns, inverse = np.unique(masks, axis=0, return_inverse=True)
    for k in range(patterns.shape[0]):
        yield patterns[k], np.flatnonzero(inverse == k)


def impute_matrix(
    Z: np.ndarray, masks: np.ndarray, params: GaussianParams
) -> tuple[np.ndarray, np.ndarray]:
    """Conditional-mean imputation of every row, grouped by mask pattern.

    Returns (imputed matrix, sum over rows of padded conditional covariances).
    The second output is what the EM covariance update needs; rows sharing a
    pattern share one Schur-complement solve.
    """
    Z = np.asarray(Z, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if Z.shape != masks.shape:
        raise ValidationError(f"Z shape {Z.shape} != masks shape {masks.shape}")
    p = params.dim
    out = Z.copy()
    cov_sum = np.zeros((p, p))
    for pattern, rows in _pattern_groups(masks):
        missing_idx = np.flatnonzero(pattern)
        if missing_idx.size == 0:
            continue
        observed_idx = np.flatnonzero(~pattern)
        if observed_idx.size == 0:
            out[rows] = params.mean
            cov_sum += rows.size * params.cov
            continue
        gain, cond_cov = conditional_gain(params, observed_idx, missing_idx)
        residual = Z[np.ix_(rows, observed_idx)] - params.mean[observed_idx]
        out[np.ix_(rows, missing_idx)] = params.mean[missing_idx] + residual @ gain.T
        cov_sum[np.ix_(missing_idx, missing_idx)] += rows.size * cond_cov
    return out, cov_sum


def padded_cov_sum(masks: np.ndarray, params: GaussianParams) -> np.ndarray:
    """Sum over rows of padded conditional covariances, without imputing.

    Used when row values are already imputed and must stay untouched but the
    covariance update still needs each row's conditional uncertainty.
    """
    masks = np.asarray(masks, dtype=bool)
    p = params.dim
    out = np.zeros((p, p))
    for pattern, rows in _pattern_groups(masks):
        missing_idx = np.flatnonzero(pattern)
        if missing_idx.size == 0:
            continue
        observed_idx = np.flatnonzero(~pattern)
        if observed_idx.size == 0:
            out += rows.size * params.cov
            continue
        _, cond_cov = conditional_gain(params, observed_idx, missing_idx)
        out[np.ix_(missing_idx, missing_idx)] += rows.size * cond_cov
    return out


def batch_em_estimates(
    Z: np.ndarray, masks: np.ndarray, params: GaussianParams
) -> tuple[np.ndarray, np.ndarray]:
    """One EM step's local estimates over a batch.

    Rows are imputed by their conditional means under ``params``; the mean is
    the average imputed row and the covariance averages outer products around
    that mean plus each row's padded conditional covariance (1/B normalizer).
    """
    imputed, cov_sum = impute_matrix(Z, masks, params)
    B = imputed.shape[0]
    mean = imputed.mean(axis=0)
    centered = imputed - mean
    cov = (centered.T @ centered + cov_sum) / B
    return mean, symmetrize(cov)
