import numpy as np
import pytest
from scipy import stats

from histotriplet.errors import ContractError
from histotriplet.synthetic import gaussian_cluster_embeddings
from histotriplet.transfer import (
    PortionSpec,
    SvmGrid,
    build_report,
    confidence_interval,
    grid_search_svm,
    holdout_accuracy,
    kfold_accuracy,
    report_to_csv,
    report_to_text,
    stratified_folds,
    stratified_portion,
    write_report,
)

TINY_GRID = SvmGrid(kernels=("linear", "rbf"), c_values=(1.0,), gamma_values=("scale",))


def labels_8x250():
    return [f"class_{c}" for c in range(8) for _ in range(250)]


class TestStratifiedPortion:
    def test_5_percent_of_2000(self):
        labels = labels_8x250()
        idx = stratified_portion(labels, 0.05, seed=0)
        assert len(idx) == 100
        per_class = {}
        for i in idx:
            per_class[labels[i]] = per_class.get(labels[i], 0) + 1
        assert set(per_class.values()) <= {12, 13}
        assert sum(per_class.values()) == 100

    def test_full_fraction_is_identity(self):
        labels = labels_8x250()
        idx = stratified_portion(labels, 1.0, seed=5)
        assert np.array_equal(idx, np.arange(2000))

    def test_half_fraction_exact_125_per_class(self):
        labels = labels_8x250()
        idx = stratified_portion(labels, 0.5, seed=0)
        per_class = {}
        for i in idx:
            per_class[labels[i]] = per_class.get(labels[i], 0) + 1
        assert all(v == 125 for v in per_class.values())

    def test_determinism(self):
        labels = labels_8x250()
        a = stratified_portion(labels, 0.25, seed=3)
        b = stratified_portion(labels, 0.25, seed=3)
        assert np.array_equal(a, b)

    def test_proportions_within_one_item_for_many_fractions(self):
        rng = np.random.default_rng(0)
        labels = ["a"] * 37 + ["b"] * 101 + ["c"] * 62
        for fraction in (0.05, 0.1, 0.3, 0.77):
            for seed in range(3):
                idx = stratified_portion(labels, fraction, seed)
                assert len(idx) == round(fraction * len(labels))
                for name, size in (("a", 37), ("b", 101), ("c", 62)):
                    got = sum(1 for i in idx if labels[i] == name)
                    assert abs(got - fraction * size) <= 1

    def test_infeasible_fraction_names_class(self):
        labels = ["rare"] * 1 + ["common"] * 999
        with pytest.raises(ContractError) as exc:
            stratified_portion(labels, 0.002, seed=0)
        assert "rare" in str(exc.value) or "classes" in str(exc.value)


class TestStratifiedFolds:
    def test_partition_of_100_items_into_10(self):
        labels = [f"c{i % 8}" for i in range(100)]
        folds = stratified_folds(labels, 10, seed=0)
        sizes = [len(f) for f in folds]
        assert sizes == [10] * 10
        merged = np.concatenate(folds)
        assert len(set(merged.tolist())) == 100

    def test_disjoint_covering_stratified_properties(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            n_classes = int(rng.integers(2, 6))
            counts = rng.integers(3, 40, n_classes)
            labels = [f"c{i}" for i, k in enumerate(counts) for _ in range(k)]
            k = int(rng.integers(2, min(11, len(labels))))
            folds = stratified_folds(labels, k, seed=int(rng.integers(100)))
            merged = np.concatenate(folds)
            assert len(merged) == len(labels)
            assert len(set(merged.tolist())) == len(labels)
            sizes = [len(f) for f in folds]
            assert max(sizes) - min(sizes) <= 1
            # stratification: each class spreads within +/-1 across folds
            for c in set(labels):
                per_fold = [sum(1 for i in f if labels[i] == c) for f in folds]
                assert max(per_fold) - min(per_fold) <= 1

    def test_too_few_items_rejected(self):
        with pytest.raises(ContractError):
            stratified_folds(["a", "b"], 10, seed=0)


class TestGridSearch:
    def separable_two_class(self, n=60, seed=0):
        rng = np.random.default_rng(seed)
        x = np.concatenate(
            [rng.normal(0, 0.3, (n, 2)) - 3, rng.normal(0, 0.3, (n, 2)) + 3]
        )
        y = np.array([0] * n + [1] * n)
        return x, y

    def test_separable_classes_reach_full_inner_accuracy(self):
        x, y = self.separable_two_class()
        grid = SvmGrid(
            kernels=("linear", "rbf"), c_values=(0.1, 1.0), gamma_values=("scale",)
        )
        params, acc = grid_search_svm(x, y, grid, seed=0)
        assert acc == 1.0
        # tie-break picks the first maximizer in axis order
        assert params == ("linear", 0.1, "scale")

    def test_singleton_grid_returned(self):
        x, y = self.separable_two_class()
        grid = SvmGrid(kernels=("sigmoid",), c_values=(7.0,), gamma_values=(0.01,))
        params, _ = grid_search_svm(x, y, grid, seed=0)
        assert params == ("sigmoid", 7.0, 0.01)

    def test_permuted_labels_score_chance_level(self):
        # high-dim noise: in low dimensions an rbf SVM exploits accidental
        # density fluctuations and drifts a few points above chance
        rng = np.random.default_rng(1)
        x = rng.normal(size=(600, 32))
        y = np.array([0, 1] * 300)
        y = y[rng.permutation(600)]
        _, acc = grid_search_svm(x, y, TINY_GRID, seed=0)
        assert abs(acc * 100 - 50.0) <= 5.0

    def test_single_class_rejected(self):
        x = np.zeros((10, 2))
        with pytest.raises(ContractError):
            grid_search_svm(x, np.zeros(10), TINY_GRID)


class TestKfoldAccuracy:
    def test_separable_clusters_score_99_plus(self):
        emb = gaussian_cluster_embeddings(
            n_per_class=20, n_classes=8, dim=16, separation=10.0, noise=1.0, seed=0
        )
        accs, chosen = kfold_accuracy(
            emb.vectors.astype(np.float64), np.asarray(emb.labels), TINY_GRID, k=10, seed=0
        )
        assert len(accs) == 10
        assert all(a >= 99.0 for a in accs)
        assert len(chosen) == 10

    def test_constant_labels_rejected(self):
        x = np.random.default_rng(0).normal(size=(40, 3))
        with pytest.raises(ContractError):
            kfold_accuracy(x, np.zeros(40), TINY_GRID, k=10)

    def test_holdout_protocol_scores_on_remainder(self):
        emb = gaussian_cluster_embeddings(
            n_per_class=50, n_classes=4, dim=8, separation=10.0, noise=1.0, seed=1
        )
        x = emb.vectors.astype(np.float64)
        y = np.asarray(emb.labels)
        idx = stratified_portion(emb.labels, 0.5, seed=0)
        accs, _ = holdout_accuracy(x, y, idx, TINY_GRID, k=10, seed=0)
        assert len(accs) == 10
        assert all(a >= 99.0 for a in accs)


class TestConfidenceInterval:
    def test_zero_variance(self):
        assert confidence_interval([88.0] * 10) == 0.0

    def test_hand_computed_two_folds(self):
        # s = sqrt(((90-91)^2 + (92-91)^2) / 1) = sqrt(2)
        # half-width = 1.96 * sqrt(2) / sqrt(2) = 1.96
        assert confidence_interval([90.0, 92.0]) == pytest.approx(1.96, abs=1e-12)

    def test_scale_consistency(self, rng):
        accs = rng.uniform(70, 95, 10)
        base = confidence_interval(accs)
        assert confidence_interval(accs * 3.5) == pytest.approx(3.5 * base, rel=1e-12)

    def test_single_fold_rejected(self):
        with pytest.raises(ContractError):
            confidence_interval([90.0])

    def test_monte_carlo_coverage_at_k10_matches_t_distribution(self):
        # The z-based interval under-covers at k=10: the exact coverage is
        # P(|T_9| <= 1.96) ~= 0.918, which the simulation must reproduce.
        expected = 2 * stats.t.cdf(1.96, df=9) - 1
        rng = np.random.default_rng(123)
        true_mean, sigma, k, sims = 90.0, 2.0, 10, 1000
        hits = 0
        for _ in range(sims):
            folds = rng.normal(true_mean, sigma, k)
            hw = confidence_interval(folds)
            hits += abs(folds.mean() - true_mean) <= hw
        coverage = hits / sims
        assert abs(coverage - expected) <= 0.025


class TestBuildReport:
    def make_models(self, n_per_class=25, dims=(8,), seed=0):
        models = {}
        for i, d in enumerate(dims):
            models[f"model_{i}"] = gaussian_cluster_embeddings(
                n_per_class=n_per_class, n_classes=4, dim=d, separation=10.0, seed=seed
            )
        return models

    def test_one_model_five_portions_gives_five_rows(self):
        models = self.make_models()
        spec = PortionSpec(fractions=(0.25, 0.4, 0.5, 0.8, 1.0), seed=0)
        report = build_report(models, spec, TINY_GRID, k=5)
        assert len(report.rows) == 5
        assert {r.portion for r in report.rows} == set(spec.fractions)

    def test_separable_embeddings_score_99_everywhere(self):
        models = self.make_models()
        spec = PortionSpec(fractions=(0.5, 1.0), seed=0)
        report = build_report(models, spec, TINY_GRID, k=5)
        for row in report.rows:
            assert row.mean_accuracy >= 99.0
            assert row.ci_half_width <= 1.0
            assert len(row.fold_accuracies) == 5

    def test_byte_identical_reports_for_same_seed(self, tmp_path):
        models = self.make_models()
        spec = PortionSpec(fractions=(0.5, 1.0), seed=7)
        texts = []
        for _ in range(2):
            report = build_report(models, spec, TINY_GRID, k=5)
            texts.append(report_to_csv(report))
        assert texts[0] == texts[1]
        paths = write_report(
            build_report(models, spec, TINY_GRID, k=5),
            tmp_path / "report.csv",
            tmp_path / "report.txt",
            tmp_path / "report_meta.json",
        )
        assert paths[0].read_text() == texts[0]

    def test_misaligned_models_rejected(self):
        from histotriplet.errors import RecordValidationError

        models = self.make_models()
        other = gaussian_cluster_embeddings(n_per_class=25, n_classes=4, dim=8, seed=9)
        other.item_ids = [f"x{i}" for i in range(len(other))]
        models["bad"] = other
        with pytest.raises(RecordValidationError):
            build_report(models, PortionSpec(fractions=(1.0,)), TINY_GRID, k=5)

    def test_metadata_records_protocol_choices(self):
        models = self.make_models()
        report = build_report(models, PortionSpec(fractions=(1.0,)), TINY_GRID, k=5)
        assert report.metadata["multiclass_strategy"] == "one-vs-rest"
        assert "1.96" in report.metadata["ci_formula"]
        assert report.metadata["cv_scope"] == "within_portion"

    def test_text_table_lists_all_models(self):
        models = self.make_models(dims=(8, 8))
        report = build_report(models, PortionSpec(fractions=(1.0,)), TINY_GRID, k=5)
        text = report_to_text(report)
        assert "model_0" in text and "model_1" in text


class TestGridDefaults:
    def test_default_axes_cover_the_protocol(self):
        grid = SvmGrid()
        assert grid.kernels == ("linear", "rbf", "sigmoid", "poly")
        assert grid.c_values[0] == 0.001 and grid.c_values[-1] == 1000.0
        assert "scale" in grid.gamma_values and "auto" in grid.gamma_values
        configs = list(grid.configurations())
        # linear collapses the gamma axis
        assert len(configs) == 7 + 3 * 7 * 9
        assert configs[0] == ("linear", 0.001, "scale")

    def test_invalid_axes_rejected(self):
        with pytest.raises(ContractError):
            SvmGrid(c_values=(0.0,))
        with pytest.raises(ContractError):
            SvmGrid(kernels=())
        with pytest.raises(ContractError):
            PortionSpec(fractions=(0.5, 0.5))
        with pytest.raises(ContractError):
            PortionSpec(fractions=(0.0,))
