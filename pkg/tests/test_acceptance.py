"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -s tests/test_acceptance.py`` to see the per-criterion
lines as they complete. Criterion 8 needs a locally downloaded dataset and is
skipped unless EMFLOW_WINE_CSV points at it (see README).
"""

import os
import time

import numpy as np
import pytest

from emflow import baseline_em
from emflow.data import DataMatrix, MaskMatrix, apply_scaler, fit_scaler, initial_impute
from emflow.engine import TrainConfig, run
from emflow.evaluate import column_mean_impute, kfold_benchmark, rmse_missing
from emflow.flow import (
    composite_loss_and_grads,
    nll_loss_and_grads,
    reinit_flow,
)
from emflow.gaussian import GaussianParams, conditional
from emflow.masking import mar_mask, mcar_mask
from emflow.online_em import EmConfig, em_update, init_from_batch

pytestmark = pytest.mark.acceptance


def report(number, name, checks, elapsed, limit_seconds):
    checks = dict(checks)
    checks[f"runtime<{limit_seconds}s"] = elapsed < limit_seconds
    ok = all(checks.values())
    print(f"\n[criterion {number}] {name}: {'PASS' if ok else 'FAIL'} "
          f"({elapsed:.1f}s)")
    for label, good in checks.items():
        print(f"    {'ok  ' if good else 'FAIL'} {label}")
    assert ok, f"criterion {number} failed: " + ", ".join(
        label for label, good in checks.items() if not good
    )


def randomized_flow(p, n_layers, seed, spread=0.4, clamp=5.0):
    """Non-identity flow with fan-in-scaled perturbations (training-like scales)."""
    flow = reinit_flow(p, n_layers, seed=seed, scale_clamp=clamp)
    rng = np.random.default_rng(seed + 999)
    for arr in flow.parameters():
        fan_in = arr.shape[0] if arr.ndim == 2 else 1
        arr += rng.normal(0.0, spread / np.sqrt(fan_in), arr.shape)
    return flow


def synthetic_mvn(seed=42, n=2000, p=5, rate=0.2):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(p, p))
    cov = A @ A.T / p + 0.3 * np.eye(p)
    mean = rng.normal(size=p)
    Z = rng.multivariate_normal(mean, cov, size=n)
    mask = mcar_mask(n, p, rate, seed=seed + 1).mask
    work = Z.copy()
    work[mask] = 0.0
    return Z, work, mask


def nonlinear_instance(seed=2024, p=6, n_train=2000, n_test=500):
    """Correlated Gaussian pushed through a fixed random coupling map."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(p, 2))
    cov = A @ A.T + 0.3 * np.eye(p)
    W = rng.multivariate_normal(np.zeros(p), cov, size=n_train + n_test)
    warp = reinit_flow(p, 3, seed=seed + 1, scale_clamp=2.0)
    v = warp.get_flat_params()
    warp.set_flat_params(v + rng.normal(0.0, 0.8, v.size))
    X, _ = warp.forward(W)
    mask = mcar_mask(n_train + n_test, p, 0.2, seed=7).mask
    return X[:n_train], mask[:n_train], X[n_train:], mask[n_train:]


def test_criterion_1_flow_correctness():
    started = time.perf_counter()
    checks = {}
    for p in (2, 8, 32):
        flow = randomized_flow(p, 6, seed=p)
        z = np.random.default_rng(p).normal(size=(1000, p))
        x, fwd = flow.forward(z)
        back, inv = flow.inverse(x)
        checks[f"p={p} round-trip < 1e-5"] = float(np.abs(back - z).max()) < 1e-5
        checks[f"p={p} log-det antisymmetry"] = float(np.abs(fwd + inv).max()) < 1e-8
    h = 1e-6
    for p in (2, 4, 6):
        flow = randomized_flow(p, 6, seed=50 + p)
        rng = np.random.default_rng(p)
        worst = 0.0
        for _ in range(3):
            z = rng.normal(size=p)
            _, analytic = flow.forward(z)
            J = np.zeros((p, p))
            for j in range(p):
                e = np.zeros(p)
                e[j] = h
                J[:, j] = (flow.forward(z + e)[0] - flow.forward(z - e)[0]) / (2 * h)
            _, numeric = np.linalg.slogdet(J)
            worst = max(worst, abs(analytic - numeric))
        checks[f"p={p} log-det vs numerical Jacobian < 1e-4"] = worst < 1e-4
    report(1, "flow correctness suite", checks, time.perf_counter() - started, 60)


def test_criterion_2_gradient_oracle():
    started = time.perf_counter()
    rng = np.random.default_rng(11)
    flow = reinit_flow(4, 2, seed=12, hidden=8)
    v = flow.get_flat_params()
    flow.set_flat_params(v + rng.normal(0.0, 0.4, v.size))
    base = GaussianParams(rng.normal(0, 0.3, 4), np.eye(4) * 0.5 + 0.1)
    X = rng.normal(0.4, 0.3, size=(6, 4))
    masks = rng.random((6, 4)) < 0.3
    latent = rng.normal(0.4, 0.3, size=(6, 4))
    theta = flow.get_flat_params()
    h = 1e-5

    def check_loss(value_fn, analytic):
        fd = np.zeros_like(theta)
        for k in range(theta.size):
            up, down = theta.copy(), theta.copy()
            up[k] += h
            down[k] -= h
            flow.set_flat_params(up)
            lp = value_fn()
            flow.set_flat_params(down)
            lm = value_fn()
            fd[k] = (lp - lm) / (2 * h)
        flow.set_flat_params(theta)
        scale = np.maximum.reduce([np.abs(analytic), np.abs(fd),
                                   np.full_like(fd, 1e-8)])
        return float(np.max(np.abs(analytic - fd) / scale))

    _, g1 = nll_loss_and_grads(flow, X, base)
    rel1 = check_loss(lambda: nll_loss_and_grads(flow, X, base)[0],
                      np.concatenate([g.ravel() for g in g1]))
    _, g2, _ = composite_loss_and_grads(flow, latent, X, masks, base, 2.5)
    rel2 = check_loss(
        lambda: composite_loss_and_grads(flow, latent, X, masks, base, 2.5)[0],
        np.concatenate([g.ravel() for g in g2]),
    )
    checks = {
        f"likelihood loss grads rel err {rel1:.2e} < 1e-3": rel1 < 1e-3,
        f"composite loss grads rel err {rel2:.2e} < 1e-3": rel2 < 1e-3,
    }
    report(2, "gradient oracle", checks, time.perf_counter() - started, 60)


def test_criterion_3_conditional_gaussian_oracle():
    import mpmath as mp

    started = time.perf_counter()
    rng = np.random.default_rng(33)
    mp.mp.dps = 40
    worst_mean = worst_cov = 0.0
    worst_eig = np.inf
    for _ in range(200):
        p = int(rng.integers(2, 9))
        A = rng.normal(size=(p, p))
        cov = A @ A.T / p + 0.5 * np.eye(p)
        mean = rng.normal(size=p)
        params = GaussianParams(mean, cov)
        observed_idx = np.sort(rng.choice(p, size=int(rng.integers(1, p)),
                                          replace=False))
        missing_idx = np.setdiff1d(np.arange(p), observed_idx)
        vals = rng.normal(size=observed_idx.size)
        cond = conditional(params, observed_idx, vals)

        S_oo = mp.matrix([[mp.mpf(float(cov[i, j])) for j in observed_idx]
                          for i in observed_idx])
        S_mo = mp.matrix([[mp.mpf(float(cov[i, j])) for j in observed_idx]
                          for i in missing_idx])
        S_mm = mp.matrix([[mp.mpf(float(cov[i, j])) for j in missing_idx]
                          for i in missing_idx])
        inv = S_oo ** -1
        resid = mp.matrix([mp.mpf(float(vals[k]) - float(mean[j]))
                           for k, j in enumerate(observed_idx)])
        exp_mean = mp.matrix([mp.mpf(float(mean[j])) for j in missing_idx]) \
            + S_mo * inv * resid
        exp_cov = S_mm - S_mo * inv * S_mo.T
        m = missing_idx.size
        worst_mean = max(worst_mean, max(
            abs(cond.mean[i] - float(exp_mean[i])) for i in range(m)))
        worst_cov = max(worst_cov, max(
            abs(cond.cov[i, j] - float(exp_cov[i, j]))
            for i in range(m) for j in range(m)))
        gap = cov[np.ix_(missing_idx, missing_idx)] - cond.cov
        worst_eig = min(worst_eig, float(np.linalg.eigvalsh(gap).min()))
    checks = {
        f"conditional means vs dense inverse {worst_mean:.2e} < 1e-9": worst_mean < 1e-9,
        f"conditional covs vs dense inverse {worst_cov:.2e} < 1e-9": worst_cov < 1e-9,
        f"Schur PSD min eigenvalue {worst_eig:.2e} >= -1e-9": worst_eig >= -1e-9,
    }
    report(3, "conditional-Gaussian oracle", checks, time.perf_counter() - started, 60)


def test_criterion_4_batch_em_sanity():
    started = time.perf_counter()
    rng = np.random.default_rng(4)
    complete = rng.normal(size=(300, 4))
    params, _, _ = baseline_em.batch_em_fit(
        complete, np.zeros_like(complete, dtype=bool))
    centered = complete - complete.mean(axis=0)
    mle_cov = centered.T @ centered / 300
    mean_err = float(np.abs(params.mean - complete.mean(axis=0)).max())
    cov_err = float(np.abs(params.cov - mle_cov).max())

    truth, work, mask = synthetic_mvn()
    fitted, _, loglik = baseline_em.batch_em_fit(work, mask)
    monotone = bool(np.all(np.diff(loglik) > -1e-8))
    em_imputed = baseline_em.batch_em_impute(work, mask, fitted)
    em_rmse = rmse_missing(em_imputed, truth, mask)
    mean_rmse = rmse_missing(column_mean_impute(work, mask), truth, mask)
    checks = {
        f"complete-data mean vs MLE {mean_err:.2e} < 1e-12": mean_err < 1e-12,
        f"complete-data cov vs MLE {cov_err:.2e} < 1e-12": cov_err < 1e-12,
        "observed log-likelihood non-decreasing": monotone,
        f"EM rmse {em_rmse:.4f} < column-mean rmse {mean_rmse:.4f}":
            em_rmse < mean_rmse,
    }
    report(4, "batch EM sanity", checks, time.perf_counter() - started, 60)


def test_criterion_5_online_vs_batch_em():
    started = time.perf_counter()
    truth, work, mask = synthetic_mvn()
    batch_params, _, _ = baseline_em.batch_em_fit(work, mask, tol=1e-12)

    config = EmConfig(step_scale=0.99, step_decay=0.8, inflation_schedule=(),
                      superbatch_max=0)
    state = None
    rng = np.random.default_rng(123)
    epochs, batch_size = 100, 256
    for _ in range(epochs):
        order = rng.permutation(work.shape[0])
        for start in range(0, work.shape[0], batch_size):
            idx = order[start:start + batch_size]
            if state is None:
                state = init_from_batch(work[idx], config)
            state, _ = em_update(state, work[idx], mask[idx])
    mean_gap = float(np.abs(state.params.mean - batch_params.mean).max())
    cov_gap = float(np.abs(state.params.cov - batch_params.cov).max())
    checks = {
        f"streamed {epochs} epochs (>= 30)": epochs >= 30,
        f"|mean gap| {mean_gap:.2e} < 1e-2": mean_gap < 1e-2,
        f"|cov gap| {cov_gap:.2e} < 5e-2": cov_gap < 5e-2,
    }
    report(5, "online-vs-batch EM equivalence", checks, time.perf_counter() - started, 120)


@pytest.fixture(scope="module")
def desk_benchmark():
    """Criterion 6/7 instance: shared so the run happens once."""
    train_x, train_m, test_x, test_m = nonlinear_instance()
    train = DataMatrix(train_x)
    train_mask = MaskMatrix(train_m)
    scaler = fit_scaler(train, train_mask)
    train_s = apply_scaler(train, scaler).values
    test_s = apply_scaler(DataMatrix(test_x), scaler).values
    test_init = initial_impute(
        DataMatrix(test_s), MaskMatrix(test_m), "random-observed", seed=3,
        reference=(DataMatrix(train_s), train_mask),
    ).values
    config = TrainConfig(outer_iterations=5, recon_weight=1e3, seed=11)
    started = time.perf_counter()
    result = run(train_s, train_m, config, truth=train_s,
                 holdout=(test_init, test_m, test_s))
    elapsed = time.perf_counter() - started

    emflow_rmse = rmse_missing(result.holdout_imputed.values, test_s, test_m)
    em_params, _, _ = baseline_em.batch_em_fit(train_s, train_m)
    em_rmse = rmse_missing(
        baseline_em.batch_em_impute(test_s, test_m, em_params), test_s, test_m)
    mean_rmse = rmse_missing(
        column_mean_impute(test_s, test_m, train_s, train_m), test_s, test_m)
    return {
        "trace": result.trace,
        "emflow": emflow_rmse,
        "baseline_em": em_rmse,
        "column_mean": mean_rmse,
        "seconds": elapsed,
    }


def test_criterion_6_desk_scale_nonlinear_benchmark(desk_benchmark):
    emflow_rmse = desk_benchmark["emflow"]
    em_rmse = desk_benchmark["baseline_em"]
    mean_rmse = desk_benchmark["column_mean"]
    checks = {
        f"emflow {emflow_rmse:.4f} <= 0.9 * column-mean {mean_rmse:.4f}":
            emflow_rmse <= 0.9 * mean_rmse,
        f"emflow {emflow_rmse:.4f} <= batch EM {em_rmse:.4f} + 5%":
            emflow_rmse <= 1.05 * em_rmse,
    }
    report(6, "desk-scale nonlinear benchmark", checks, desk_benchmark["seconds"], 600)


def test_criterion_7_convergence_speed(desk_benchmark):
    trace = [record["holdout_rmse"] for record in desk_benchmark["trace"]]
    at_three = trace[2]
    final = trace[-1]
    gap = abs(at_three - final) / final
    checks = {
        f"iteration-3 rmse {at_three:.4f} within 5% of final {final:.4f} "
        f"(gap {gap:.1%})": gap <= 0.05,
    }
    for i in range(2):  # non-increasing over the first three iterations, 5% slack
        checks[f"rmse[{i + 2}] <= 1.05 * rmse[{i + 1}]"] = \
            trace[i + 1] <= 1.05 * trace[i]
    report(7, "convergence within three iterations", checks, desk_benchmark["seconds"], 600)


wine_path = os.environ.get("EMFLOW_WINE_CSV")


@pytest.mark.external_data
@pytest.mark.skipif(not wine_path, reason="EMFLOW_WINE_CSV not set (see README)")
def test_criterion_8a_wine_mcar_benchmark():
    from emflow.data import read_data_csv

    started = time.perf_counter()
    data, csv_mask = read_data_csv(wine_path, has_header=True)
    assert not csv_mask.mask.any(), "wine CSV must be complete"
    config = TrainConfig(seed=0)  # paper defaults: batch 256, lr 1e-4, K=6
    report_dict = kfold_benchmark(data, "mcar", config, k=5, seed=1, rate=0.2)
    emflow_mean = report_dict["summary"]["emflow"]["mean"]
    mean_mean = report_dict["summary"]["column_mean"]["mean"]
    near_published = abs(emflow_mean - 0.0757) <= 0.03
    beats_baseline = emflow_mean <= 0.8 * mean_mean
    checks = {
        f"emflow {emflow_mean:.4f} within 0.03 of 0.0757 OR >=20% better "
        f"than column mean {mean_mean:.4f}": near_published or beats_baseline,
    }
    report("8a", "wine MCAR benchmark (optional)", checks, time.perf_counter() - started, 3600)


@pytest.mark.external_data
@pytest.mark.skipif(not wine_path, reason="EMFLOW_WINE_CSV not set (see README)")
def test_criterion_8b_wine_mar_missing_rate():
    """Faithful check of the published MAR rate for Wine (0.26 +/- 0.03).

    Under the verbatim mechanism, cells of min-max scaled data go missing
    with probability sigmoid(sum of non-negative values) >= 0.5, so the
    empirical maskable-feature rate is provably >= 0.5 and this check cannot
    pass; it is kept as stated for the record (see decisions ledger).
    """
    from emflow.data import read_data_csv

    started = time.perf_counter()
    data, _ = read_data_csv(wine_path, has_header=True)
    zero = MaskMatrix(np.zeros(data.shape, dtype=bool))
    scaled = apply_scaler(data, fit_scaler(data, zero))
    mask = mar_mask(scaled, seed=0)
    d = int(np.floor(0.7 * data.shape[1]))
    rate = float(mask.mask[:, d:].mean())
    checks = {f"wine MAR maskable rate {rate:.3f} within 0.26 +/- 0.03":
              abs(rate - 0.26) <= 0.03}
    report("8b", "wine MAR missing rate (optional)", checks, time.perf_counter() - started, 600)


def test_criterion_9_invariant_regression():
    started = time.perf_counter()
    rng = np.random.default_rng(9)
    A = rng.normal(size=(4, 2))
    cov = A @ A.T + 0.3 * np.eye(4)
    raw = rng.multivariate_normal(np.zeros(4), cov, size=150)
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    values = (raw - lo) / (hi - lo)
    mask = mcar_mask(150, 4, 0.2, seed=2).mask
    config = TrainConfig(outer_iterations=2, epochs_per_phase=2, batch_size=64,
                         recon_weight=1e3, flow_depth=2,
                         em=EmConfig(inflation_schedule=()), seed=6)
    first = run(values, mask, config, truth=values)
    second = run(values, mask, config, truth=values)

    preserved = bool(
        np.array_equal(first.imputed.values[~mask], values[~mask]))
    deterministic = bool(
        np.array_equal(first.imputed.values, second.imputed.values))
    trace_match = all(
        ra[k] == rb[k]
        for ra, rb in zip(first.trace, second.trace)
        for k in ra if k != "seconds"
    )

    # mask-mechanism statistics
    from scipy import stats

    n, p, rate = 10000, 10, 0.2
    mcar = mcar_mask(n, p, rate, seed=3).mask
    counts = mcar.sum(axis=0)
    statistic = float(np.sum((counts - n * rate) ** 2 / (n * rate * (1 - rate))))
    chi_ok = statistic < stats.chi2.ppf(0.99, df=p)

    zeros = DataMatrix(np.zeros((4000, 10)))
    mar = mar_mask(zeros, seed=4).mask
    half_ok = abs(float(mar[:, 7:].mean()) - 0.5) < 0.02
    retained_ok = not mar[:, :7].any()

    checks = {
        "observed entries preserved bit-exact": preserved,
        "bit-identical imputation under fixed seed": deterministic,
        "bit-identical trace (timing excluded)": trace_match,
        f"MCAR column chi-square {statistic:.1f} below 1% critical value": chi_ok,
        "MAR retained features fully observed": retained_ok,
        "MAR all-zero rows missing at sigmoid(0)=0.5": half_ok,
    }
    report(9, "invariant regression", checks, time.perf_counter() - started, 120)
