import json

import numpy as np
import pytest

from emflow.data import DataMatrix
from emflow.engine import TrainConfig
from emflow.evaluate import (
    column_mean_impute,
    column_median_impute,
    kfold_benchmark,
    kfold_indices,
    rmse_missing,
    simulate_mask,
    write_report,
)
from emflow.exceptions import ValidationError
from emflow.online_em import EmConfig


def bench_data(seed=0, n=140, p=4):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(p, 2))
    cov = A @ A.T + 0.3 * np.eye(p)
    return DataMatrix(rng.multivariate_normal(np.zeros(p), cov, size=n))


def bench_config(**kwargs):
    defaults = dict(outer_iterations=1, epochs_per_phase=2, batch_size=64,
                    recon_weight=1e3, flow_depth=2,
                    em=EmConfig(inflation_schedule=()), seed=1)
    defaults.update(kwargs)
    return TrainConfig(**defaults)


class TestRmseMissing:
    def test_perfect_imputation(self):
        truth = np.arange(6.0).reshape(2, 3)
        mask = np.array([[0, 1, 0], [1, 0, 0]], dtype=bool)
        assert rmse_missing(truth, truth, mask) == 0.0

    def test_single_cell(self):
        imputed = np.array([[0.3, 0.0]])
        truth = np.array([[0.5, 0.0]])
        mask = np.array([[1, 0]], dtype=bool)
        assert rmse_missing(imputed, truth, mask) == pytest.approx(0.2)

    def test_no_missing_cells_rejected(self):
        x = np.zeros((2, 2))
        with pytest.raises(ValidationError):
            rmse_missing(x, x, np.zeros((2, 2), dtype=bool))

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(1)
        imputed = rng.normal(size=(30, 4))
        truth = rng.normal(size=(30, 4))
        mask = rng.random((30, 4)) < 0.4
        mask[0, 0] = True
        perm = rng.permutation(30)
        assert rmse_missing(imputed, truth, mask) == pytest.approx(
            rmse_missing(imputed[perm], truth[perm], mask[perm]), abs=1e-15
        )


class TestBaselines:
    def test_column_mean_uses_reference(self):
        values = np.array([[0.0, 0.0], [0.0, 0.0]])
        mask = np.array([[1, 0], [0, 0]], dtype=bool)
        ref_values = np.array([[2.0, 0.0], [4.0, 0.0]])
        ref_mask = np.zeros((2, 2), dtype=bool)
        out = column_mean_impute(values, mask, ref_values, ref_mask)
        assert out[0, 0] == 3.0

    def test_column_median_ignores_masked(self):
        values = np.array([[1.0, 0.0], [100.0, 0.0], [3.0, 0.0], [2.0, 0.0]])
        mask = np.array([[0, 0], [1, 0], [0, 0], [1, 0]], dtype=bool)
        out = column_median_impute(values, mask)
        assert out[1, 0] == 2.0  # median of {1, 3}... midpoint
        assert out[3, 0] == 2.0


class TestKfold:
    def test_partition_disjoint_exhaustive(self):
        folds = kfold_indices(23, 5, seed=3)
        assert len(folds) == 5
        all_test = np.concatenate([test for _, test in folds])
        assert sorted(all_test.tolist()) == list(range(23))
        for train, test in folds:
            assert np.intersect1d(train, test).size == 0
            assert len(train) + len(test) == 23

    def test_depends_only_on_n_k_seed(self):
        a = kfold_indices(40, 4, seed=9)
        b = kfold_indices(40, 4, seed=9)
        for (ta, sa), (tb, sb) in zip(a, b):
            np.testing.assert_array_equal(ta, tb)
            np.testing.assert_array_equal(sa, sb)

    def test_needs_two_folds(self):
        with pytest.raises(ValidationError):
            kfold_indices(10, 1, seed=0)


class TestSimulateMask:
    def test_mcar_requires_rate(self):
        with pytest.raises(ValidationError):
            simulate_mask(bench_data(), "mcar", None, seed=0)

    def test_mar_scales_internally(self):
        data = bench_data()
        mask = simulate_mask(data, "mar", None, seed=0)
        assert not mask.mask[:, : int(0.7 * data.shape[1])].any()

    def test_unknown_mechanism(self):
        with pytest.raises(ValidationError):
            simulate_mask(bench_data(), "mnar", 0.2, seed=0)


@pytest.fixture(scope="module")
def report():
    return kfold_benchmark(bench_data(), "mcar", bench_config(), k=3,
                           seed=5, rate=0.2)


class TestKfoldBenchmark:
    def test_report_schema(self, report):
        assert report["folds"] == 3
        assert len(report["per_fold"]) == 3
        for method in ("emflow", "baseline_em", "column_mean", "column_median"):
            assert method in report["summary"]
            entry = report["summary"][method]
            assert "±" in entry["formatted"]
        assert report["config"]["batch_size"] == 64

    def test_summary_matches_per_fold(self, report):
        scores = [fold["emflow"] for fold in report["per_fold"]]
        assert report["summary"]["emflow"]["mean"] == pytest.approx(np.mean(scores))
        assert report["summary"]["emflow"]["sd"] == pytest.approx(np.std(scores, ddof=1))

    def test_threads_do_not_change_results(self):
        a = kfold_benchmark(bench_data(), "mcar", bench_config(), k=2, seed=7)
        b = kfold_benchmark(bench_data(), "mcar", bench_config(), k=2, seed=7,
                            threads=2)
        for fa, fb in zip(a["per_fold"], b["per_fold"]):
            for method in ("emflow", "baseline_em", "column_mean"):
                assert fa[method] == fb[method]

    def test_text_and_json_agree(self, report, tmp_path):
        json_path = tmp_path / "r.json"
        text_path = tmp_path / "r.txt"
        csv_path = tmp_path / "r.csv"
        write_report(report, json_path, text_path, csv_path)
        loaded = json.loads(json_path.read_text())
        text = text_path.read_text()
        for method in ("emflow", "baseline_em", "column_mean", "column_median"):
            assert loaded["summary"][method]["formatted"] in text
            formatted = f"{loaded['summary'][method]['mean']:.4f}"
            assert formatted in text
        csv_lines = csv_path.read_text().strip().splitlines()
        assert len(csv_lines) == 1 + report["folds"]
        first_fold = csv_lines[1].split(",")
        assert float(first_fold[1]) == report["per_fold"][0]["emflow"]

    def test_mar_mechanism_runs(self):
        report = kfold_benchmark(bench_data(n=120), "mar", bench_config(), k=2,
                                 seed=11, rate=None)
        assert report["rate"] is None
        assert len(report["per_fold"]) == 2
