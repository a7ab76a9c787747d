"""Synthetic generator, population losses, and the optimum checker."""

import math
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from twotower.losses import LossConfig
from twotower.verify import (
    EQUAL_OPTIMA_GROUPS,
    EmpiricalTables,
    OptimumReport,
    SyntheticSpec,
    check_optimum,
    generate_synthetic,
    optimum_gauge,
    phi_table,
    population_loss,
    random_joint,
    run_table_sweep,
    sweep_configs,
    sweep_report_text,
    target_table,
    train_to_optimum,
)


class TestRandomJoint:
    def test_normalized_and_supported(self):
        for seed in range(5):
            joint = random_joint(8, 12, seed=seed)
            assert joint.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(joint >= 0)
            assert np.all(joint.sum(axis=1) > 0)
            assert np.all(joint.sum(axis=0) > 0)


class TestSyntheticSpec:
    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError, match="sum to 1"):
            SyntheticSpec(num_users=2, num_items=2, joint=np.full((2, 2), 0.3))

    def test_drift_length_must_match_months(self):
        joint = np.full((2, 2), 0.25)
        with pytest.raises(ValueError, match="per month"):
            SyntheticSpec(num_users=2, num_items=2, drift=[joint], num_months=2)

    def test_negative_cell_rejected(self):
        joint = np.array([[1.2, -0.2], [0.0, 0.0]])
        with pytest.raises(ValueError, match="nonnegative"):
            SyntheticSpec(num_users=2, num_items=2, joint=joint)


class TestGenerateSynthetic:
    def test_point_mass_yields_identical_samples(self):
        joint = np.zeros((3, 4))
        joint[1, 2] = 1.0
        spec = SyntheticSpec(num_users=3, num_items=4, joint=joint, num_samples=500)
        sample = generate_synthetic(spec, seed=0)
        assert all(r.user_id == 1 and r.item_id == 2 for r in sample.records)
        assert sample.counts[1, 2] == 500

    def test_counts_match_records(self):
        spec = SyntheticSpec(num_users=4, num_items=5, joint=random_joint(4, 5, seed=1), num_samples=2_000)
        sample = generate_synthetic(spec, seed=2)
        recount = Counter((r.user_id, r.item_id) for r in sample.records)
        for (u, i), c in recount.items():
            assert sample.counts[u, i] == c
        assert sample.counts.sum() == 2_000

    def test_cell_frequencies_chi_square(self):
        joint = random_joint(4, 5, seed=3, sparsity=0.0)
        spec = SyntheticSpec(num_users=4, num_items=5, joint=joint, num_samples=100_000)
        sample = generate_synthetic(spec, seed=4)
        observed = sample.counts.ravel()
        expected = joint.ravel() * spec.num_samples
        keep = expected > 0
        result = chisquare(observed[keep], expected[keep] * observed[keep].sum() / expected[keep].sum())
        assert result.pvalue > 0.001

    def test_drift_months_draw_from_their_own_tables(self):
        a = np.zeros((2, 3))
        a[0, 0] = 1.0
        b = np.zeros((2, 3))
        b[1, 2] = 1.0
        spec = SyntheticSpec(num_users=2, num_items=3, drift=[a, b], num_months=2, num_samples=1_000)
        sample = generate_synthetic(spec, seed=5)
        for rec in sample.records:
            month = rec.day // spec.days_per_month + 1
            if month == 1:
                assert (rec.user_id, rec.item_id) == (0, 0)
            else:
                assert (rec.user_id, rec.item_id) == (1, 2)
        assert sample.month_counts[0][0, 0] > 0 and sample.month_counts[1][1, 2] > 0

    def test_examples_use_reserved_user_tokens(self):
        spec = SyntheticSpec(num_users=3, num_items=4, joint=random_joint(3, 4, seed=6), num_samples=50)
        sample = generate_synthetic(spec, seed=7)
        for ex in sample.examples:
            assert ex.pseudo_user == (4 + ex.user_id,)
            assert 0 <= ex.target_item < 4

    def test_deterministic(self):
        spec = SyntheticSpec(num_users=3, num_items=4, joint=random_joint(3, 4, seed=8), num_samples=300)
        a = generate_synthetic(spec, seed=9)
        b = generate_synthetic(spec, seed=9)
        assert a.records == b.records


def dense_tables(counts: np.ndarray) -> EmpiricalTables:
    return EmpiricalTables(np.asarray(counts, dtype=np.int64))


class TestEmpiricalTables:
    def test_marginals_consistent(self):
        tables = dense_tables([[2, 1], [1, 4]])
        assert tables.total == 8
        np.testing.assert_allclose(tables.p_user, [3 / 8, 5 / 8])
        np.testing.assert_allclose(tables.p_item, [3 / 8, 5 / 8])
        assert tables.joint.sum() == pytest.approx(1.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            dense_tables([[0, 0]])


ALL_CONFIGS = sweep_configs()


class TestPopulationLoss:
    def _phi(self, shape, seed=0):
        return np.random.default_rng(seed).normal(size=shape) * 0.5

    @pytest.mark.parametrize("label,config", ALL_CONFIGS, ids=[label for label, _ in ALL_CONFIGS])
    def test_gradient_matches_finite_differences(self, label, config):
        tables = dense_tables([[5, 1, 0, 2], [0, 3, 4, 1], [2, 0, 1, 6]])
        phi = self._phi(tables.joint.shape, seed=1)
        _, dphi = population_loss(phi, tables, config)
        step = 1e-6
        for u in range(phi.shape[0]):
            for i in range(phi.shape[1]):
                up = phi.copy()
                up[u, i] += step
                down = phi.copy()
                down[u, i] -= step
                numeric = (population_loss(up, tables, config)[0] - population_loss(down, tables, config)[0]) / (2 * step)
                assert dphi[u, i] == pytest.approx(numeric, abs=5e-7), (label, u, i)

    def test_ssm_uniform_proposal_gradient(self):
        """Uniform proposal spreads the partition over the whole vocabulary,
        including never-observed items."""
        tables = dense_tables([[5, 1, 0, 2], [0, 3, 4, 1], [2, 0, 1, 6]])
        phi = self._phi(tables.joint.shape, seed=2)
        config = LossConfig(family="ssm", ssm_proposal="uniform")
        _, dphi = population_loss(phi, tables, config, ssm_proposal="uniform")
        step = 1e-6
        for u in range(phi.shape[0]):
            for i in range(phi.shape[1]):
                up, down = phi.copy(), phi.copy()
                up[u, i] += step
                down[u, i] -= step
                numeric = (
                    population_loss(up, tables, config, ssm_proposal="uniform")[0]
                    - population_loss(down, tables, config, ssm_proposal="uniform")[0]
                ) / (2 * step)
                assert dphi[u, i] == pytest.approx(numeric, abs=5e-7)

    def test_bce_optimum_is_stationary(self):
        tables = dense_tables([[5, 1, 2], [3, 4, 1]])  # strictly positive support
        for strategy, p_n in [
            ("user-marginal", tables.p_user[:, None] / 3 * np.ones((2, 3))),
            ("item-marginal", np.ones((2, 3)) * tables.p_item[None, :] / 2),
            ("product-of-marginals", tables.p_user[:, None] * tables.p_item[None, :]),
            ("uniform", np.full((2, 3), 1 / 6)),
        ]:
            config = LossConfig(family="bce", negative_strategy=strategy)
            phi_star = np.log(tables.joint / p_n)
            _, dphi = population_loss(phi_star, tables, config)
            np.testing.assert_allclose(dphi, 0.0, atol=1e-12)

    def test_bbcnce_optimum_is_stationary(self):
        tables = dense_tables([[5, 1, 2], [3, 4, 1], [2, 2, 9]])
        phi_star = tables.log_joint + 0.7  # any global constant
        _, dphi = population_loss(phi_star, tables, LossConfig.from_preset("bbcnce"))
        np.testing.assert_allclose(dphi, 0.0, atol=1e-12)

    def test_row_loss_optimum_has_per_user_freedom(self):
        tables = dense_tables([[5, 1, 2], [3, 4, 1], [2, 2, 9]])
        offsets = np.array([[0.3], [-1.2], [2.0]])
        phi_star = tables.log_joint - tables.log_p_user[:, None] + offsets
        _, dphi = population_loss(phi_star, tables, LossConfig.from_preset("row_bcnce"))
        np.testing.assert_allclose(dphi, 0.0, atol=1e-12)

    def test_col_loss_optimum_has_per_item_freedom(self):
        tables = dense_tables([[5, 1, 2], [3, 4, 1], [2, 2, 9]])
        offsets = np.array([0.5, -0.4, 1.1])
        phi_star = tables.log_joint - tables.log_p_item[None, :] + offsets[None, :]
        _, dphi = population_loss(phi_star, tables, LossConfig.from_preset("col_bcnce"))
        np.testing.assert_allclose(dphi, 0.0, atol=1e-12)


class TestTargets:
    def test_target_names(self):
        tables = dense_tables([[1, 1], [1, 1]])
        assert target_table(LossConfig.from_preset("row_bcnce"), tables)[0] == "log p(i|u)"
        assert target_table(LossConfig.from_preset("col_bcnce"), tables)[0] == "log p(u|i)"
        assert target_table(LossConfig.from_preset("bbcnce"), tables)[0] == "log p(u,i)"
        assert target_table(LossConfig.from_preset("infonce"), tables)[0] == "pmi"
        assert target_table(LossConfig(family="ssm"), tables)[0] == "log p(i|u)"
        assert target_table(LossConfig(family="bce", negative_strategy="uniform"), tables)[0] == "log p(u,i)"

    def test_unobserved_cells_are_nan(self):
        tables = dense_tables([[3, 0], [1, 2]])
        _, target = target_table(LossConfig.from_preset("bbcnce"), tables)
        assert math.isnan(target[0, 1])
        assert np.isfinite(target[tables.observed]).all()

    def test_gauge_classification(self):
        assert optimum_gauge(LossConfig(family="bce")) == "none"
        assert optimum_gauge(LossConfig.from_preset("bbcnce")) == "none"
        assert optimum_gauge(LossConfig.from_preset("simclr")) == "none"
        assert optimum_gauge(LossConfig.from_preset("infonce")) == "per-user"
        assert optimum_gauge(LossConfig.from_preset("row_bcnce")) == "per-user"
        assert optimum_gauge(LossConfig(family="ssm")) == "per-user"
        assert optimum_gauge(LossConfig.from_preset("col_bcnce")) == "per-item"


class TestCheckOptimum:
    def test_uniform_counts_null_check(self):
        """Exactly uniform counts make every target constant: rank correlation
        is undefined and the residual gate alone decides."""
        spec = SyntheticSpec(num_users=3, num_items=4, joint=np.full((3, 4), 1 / 12), num_samples=120)
        tables = dense_tables(np.full((3, 4), 10))
        config = LossConfig.from_preset("bbcnce")
        params = train_to_optimum(config, tables, spec, dim=6, epochs=400, learning_rate=0.05, seed=0)
        report = check_optimum(config, params, tables, spec)
        assert math.isnan(report.rank_correlation)
        assert report.residual <= 0.05
        assert report.passed

    def test_small_structured_joint_converges(self):
        joint = random_joint(4, 5, seed=13, sparsity=0.2)
        spec = SyntheticSpec(num_users=4, num_items=5, joint=joint, num_samples=30_000)
        sample = generate_synthetic(spec, seed=1)
        config = LossConfig.from_preset("bbcnce")
        params = train_to_optimum(config, sample.tables, spec, dim=6, epochs=1_000, learning_rate=0.05, seed=1)
        report = check_optimum(config, params, sample.tables, spec, label="bbcnce", seed=1)
        assert report.rank_correlation >= 0.95
        assert report.residual <= 0.25
        assert report.range_ok
        assert report.passed

    def test_report_counts_unobserved_cells(self):
        tables = dense_tables([[3, 0], [1, 2]])
        spec = SyntheticSpec(num_users=2, num_items=2, joint=np.full((2, 2), 0.25), num_samples=6)
        config = LossConfig.from_preset("bbcnce")
        params = train_to_optimum(config, tables, spec, dim=4, epochs=50, learning_rate=0.05, seed=0)
        report = check_optimum(config, params, tables, spec)
        assert report.num_observed == 3
        assert report.num_excluded == 1


class TestMinibatchConvergence:
    def test_minibatch_training_approaches_the_joint_optimum(self):
        """The production path (shuffled minibatches through the trainer, not
        the aggregated full-batch harness) must also land near the predicted
        optimum.  The gate is looser than the full-batch one: finite batches
        and stochastic steps leave residual noise around the target."""
        from twotower.data import annotate_bias, compute_marginals
        from twotower.model import EncoderConfig, ModelParams
        from twotower.trainer import TrainConfig, train_incremental

        enc = EncoderConfig("mean")
        spec = SyntheticSpec(
            num_users=8, num_items=12, joint=random_joint(8, 12, seed=7), num_samples=20_000, num_months=1
        )
        sample = generate_synthetic(spec, seed=2)
        marginals = compute_marginals(sample.examples)
        examples = annotate_bias(sample.examples, marginals)
        params = ModelParams.initialize(20, 10, 0.05, seed=3)
        config = TrainConfig(epochs_per_month=25, batch_size=128, learning_rate=0.02, seed=4, months=(1,))
        train_incremental(examples, sample.month_index, params, enc, LossConfig.from_preset("bbcnce"), config)

        from scipy.stats import spearmanr

        tables = sample.tables
        phi = phi_table(params, spec, enc)
        _, target = target_table(LossConfig.from_preset("bbcnce"), tables)
        mask = tables.observed
        rho = spearmanr(phi[mask], target[mask]).statistic
        assert rho >= 0.85


class TestSweep:
    def test_grid_covers_all_strategies_and_presets(self):
        labels = [label for label, _ in ALL_CONFIGS]
        assert labels == [
            "bce/user-marginal",
            "bce/item-marginal",
            "bce/product-of-marginals",
            "bce/uniform",
            "ssm",
            "infonce",
            "simclr",
            "row_bcnce",
            "col_bcnce",
            "bbcnce",
        ]

    def test_sweep_cardinality_and_report_shape(self):
        spec = SyntheticSpec(num_users=4, num_items=5, joint=random_joint(4, 5, seed=21), num_samples=8_000)
        result = run_table_sweep(spec, seeds=(1, 2), dim=6, epochs=300, learning_rate=0.05)
        assert len(result.reports) == 20  # 10 configs x 2 seeds
        pair_count = sum(len(m) * (len(m) - 1) // 2 for m in EQUAL_OPTIMA_GROUPS.values())
        assert len(result.agreements) == pair_count * 2
        text = sweep_report_text(result)
        assert text.splitlines()[0].startswith("label\tseed\ttarget\tgauge")
        row = [line for line in text.splitlines() if line.startswith("row_bcnce\t1")][0]
        assert "log p(i|u)" in row
