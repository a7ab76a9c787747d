"""Loss values against independent scalar oracles, plus the preset algebra."""

import math

import numpy as np
import pytest

from twotower.data import EmpiricalMarginals, LabeledExample, TrainingExample
from twotower.losses import (
    PRESETS,
    LossConfig,
    bce_loss,
    bce_value,
    bidirectional_nce_loss,
    full_softmax_row_loss,
    full_softmax_value,
    loss_with_gradients,
    ssm_loss,
)
from twotower.model import EncoderConfig, ModelParams

ENC = EncoderConfig("mean")


def make_params(num_items=6, dim=4, temperature=0.25, seed=0) -> ModelParams:
    return ModelParams.initialize(num_items, dim, temperature, seed)


def uniform_marginals(num_items: int) -> EmpiricalMarginals:
    return EmpiricalMarginals(
        log_p_user={(0,): 0.0},
        log_p_item={i: math.log(1.0 / num_items) for i in range(num_items)},
        count_user={(0,): num_items},
        count_item={i: 1 for i in range(num_items)},
        total=num_items,
    )


class TestLossConfig:
    def test_preset_flag_table(self):
        assert PRESETS["infonce"] == (1, 0, 0, 0)
        assert PRESETS["simclr"] == (1, 0, 1, 0)
        assert PRESETS["row_bcnce"] == (1, 1, 0, 0)
        assert PRESETS["col_bcnce"] == (0, 0, 1, 1)
        assert PRESETS["bbcnce"] == (1, 1, 1, 1)

    def test_both_sides_off_rejected(self):
        with pytest.raises(ValueError, match="identically zero"):
            LossConfig(family="bidirectional", alpha=0, beta=0)

    def test_preset_flag_mismatch_rejected(self):
        with pytest.raises(ValueError, match="preset"):
            LossConfig(family="bidirectional", alpha=1, beta=1, delta_alpha=0, delta_beta=0, preset="bbcnce")

    def test_unknown_family_rejected(self):
        with pytest.raises(ValueError, match="family"):
            LossConfig(family="hinge")

    def test_nonbinary_flag_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(alpha=2)


class TestBceValue:
    def test_single_positive_at_zero_logit(self):
        value, dphi = bce_value(np.array([0.0]), np.array([1.0]))
        assert value == pytest.approx(math.log(2.0), abs=1e-12)
        assert dphi[0] == pytest.approx(-0.5, abs=1e-12)

    def test_saturated_pair_is_near_zero(self):
        value, _ = bce_value(np.array([40.0, -40.0]), np.array([1.0, 0.0]))
        assert 0.0 <= value < 1e-12

    def test_mixed_batch_matches_scalar_arithmetic(self):
        logits = [0.5, -0.3, 2.0, 1.2]
        labels = [1.0, 0.0, 1.0, 0.0]
        expected = sum(
            math.log(1.0 + math.exp(-phi)) if s == 1.0 else math.log(1.0 + math.exp(phi))
            for phi, s in zip(logits, labels)
        ) / len(logits)
        value, _ = bce_value(np.array(logits), np.array(labels))
        assert value == pytest.approx(expected, abs=1e-12)

    def test_gradient_is_sigmoid_minus_label_over_batch(self):
        logits = np.array([0.7, -1.1])
        labels = np.array([0.0, 1.0])
        _, dphi = bce_value(logits, labels)
        sig = 1.0 / (1.0 + np.exp(-logits))
        np.testing.assert_allclose(dphi, (sig - labels) / 2.0, atol=1e-12)


class TestBceLoss:
    def test_orthogonal_positive_gives_log_two(self):
        params = make_params(num_items=2, dim=2)
        params.item_embeddings[:] = np.array([[1.0, 0.0], [0.0, 1.0]])
        batch = [LabeledExample(0, (0,), 1, 0, label=1)]
        out = bce_loss(batch, params, ENC)
        assert out.value == pytest.approx(math.log(2.0), abs=1e-12)

    def test_saturated_extremes(self):
        params = make_params(num_items=3, dim=2, temperature=0.05)
        params.item_embeddings[:] = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        batch = [
            LabeledExample(0, (0,), 1, 0, label=1),  # cosine 1 -> logit +20
            LabeledExample(0, (0,), 2, 0, label=0),  # cosine -1 -> logit -20
        ]
        out = bce_loss(batch, params, ENC)
        assert out.value == pytest.approx(0.0, abs=1e-8)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            bce_loss([], make_params(), ENC)


def bidirectional_oracle(phi, log_p_u, log_p_i, alpha, beta, d_alpha, d_beta):
    """Plain-python triple-loop evaluation of the in-batch loss."""
    size = len(phi)
    total = 0.0
    row_sum = 0.0
    col_sum = 0.0
    for r in range(size):
        num = math.exp(phi[r][r] - d_alpha * log_p_i[r])
        den = sum(math.exp(phi[r][c] - d_alpha * log_p_i[c]) for c in range(size))
        row_sum += -math.log(num / den)
        num = math.exp(phi[r][r] - d_beta * log_p_u[r])
        den = sum(math.exp(phi[q][r] - d_beta * log_p_u[q]) for q in range(size))
        col_sum += -math.log(num / den)
    return alpha * (row_sum / size) + beta * (col_sum / size)


class TestBidirectionalLoss:
    def test_uniform_two_by_two_gives_two_log_two(self):
        phi = np.zeros((2, 2))
        biases = np.full(2, math.log(0.5))
        out = bidirectional_nce_loss(phi, biases, biases, LossConfig.from_preset("bbcnce"))
        assert out.value == pytest.approx(2.0 * math.log(2.0), abs=1e-12)

    def test_infonce_is_the_row_term_alone(self):
        rng = np.random.default_rng(0)
        phi = rng.normal(size=(4, 4))
        log_p_u = np.log(rng.uniform(0.05, 0.5, size=4))
        log_p_i = np.log(rng.uniform(0.05, 0.5, size=4))
        infonce = bidirectional_nce_loss(phi, log_p_u, log_p_i, LossConfig.from_preset("infonce"))
        expected = bidirectional_oracle(phi, log_p_u, log_p_i, alpha=1, beta=0, d_alpha=0, d_beta=0)
        assert infonce.value == pytest.approx(expected, abs=1e-12)

    def test_three_by_three_hand_computation(self):
        phi = np.array([[1.2, -0.4, 0.3], [0.0, 2.1, -1.0], [0.5, 0.6, 0.7]])
        log_p_u = np.log(np.array([0.5, 0.3, 0.2]))
        log_p_i = np.log(np.array([0.25, 0.5, 0.25]))
        for preset in PRESETS:
            config = LossConfig.from_preset(preset)
            out = bidirectional_nce_loss(phi, log_p_u, log_p_i, config)
            expected = bidirectional_oracle(
                phi, log_p_u, log_p_i, config.alpha, config.beta, config.delta_alpha, config.delta_beta
            )
            assert out.value == pytest.approx(expected, abs=1e-12), preset

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            bidirectional_nce_loss(np.zeros((1, 1)), np.zeros(1), np.zeros(1), LossConfig.from_preset("bbcnce"))

    def test_simclr_decomposes_exactly(self):
        rng = np.random.default_rng(1)
        phi = rng.normal(size=(5, 5))
        log_p_u = np.log(rng.uniform(0.05, 0.5, size=5))
        log_p_i = np.log(rng.uniform(0.05, 0.5, size=5))
        simclr = bidirectional_nce_loss(phi, log_p_u, log_p_i, LossConfig.from_preset("simclr")).value
        row_only = bidirectional_nce_loss(phi, log_p_u, log_p_i, LossConfig.from_preset("infonce")).value
        col_only = bidirectional_nce_loss(
            phi, log_p_u, log_p_i, LossConfig(family="bidirectional", alpha=0, beta=1, delta_alpha=0, delta_beta=0)
        ).value
        assert simclr == row_only + col_only  # identical accumulation order: exact

    def test_bbcnce_decomposes_exactly(self):
        rng = np.random.default_rng(2)
        phi = rng.normal(size=(4, 4))
        log_p_u = np.log(rng.uniform(0.05, 0.5, size=4))
        log_p_i = np.log(rng.uniform(0.05, 0.5, size=4))
        bbc = bidirectional_nce_loss(phi, log_p_u, log_p_i, LossConfig.from_preset("bbcnce")).value
        row = bidirectional_nce_loss(phi, log_p_u, log_p_i, LossConfig.from_preset("row_bcnce")).value
        col = bidirectional_nce_loss(phi, log_p_u, log_p_i, LossConfig.from_preset("col_bcnce")).value
        assert bbc == row + col

    def test_delta_flags_cancel_under_uniform_marginals(self):
        rng = np.random.default_rng(3)
        phi = rng.normal(size=(6, 6))
        uniform = np.full(6, math.log(1.0 / 6.0))
        with_bias = bidirectional_nce_loss(phi, uniform, uniform, LossConfig.from_preset("bbcnce")).value
        without = bidirectional_nce_loss(phi, uniform, uniform, LossConfig.from_preset("simclr")).value
        assert abs(with_bias - without) < 1e-9

    def test_row_softmax_distributions_sum_to_one(self):
        rng = np.random.default_rng(4)
        phi = rng.normal(size=(5, 5))
        log_p = np.log(rng.uniform(0.05, 0.5, size=5))
        out = bidirectional_nce_loss(phi, log_p, log_p, LossConfig.from_preset("infonce"))
        p_row = 5.0 * out.dscore + np.eye(5)
        np.testing.assert_allclose(p_row.sum(axis=1), 1.0, atol=1e-9)
        out_col = bidirectional_nce_loss(
            phi, log_p, log_p, LossConfig(family="bidirectional", alpha=0, beta=1, delta_alpha=0, delta_beta=1)
        )
        p_col = 5.0 * out_col.dscore + np.eye(5)
        np.testing.assert_allclose(p_col.sum(axis=0), 1.0, atol=1e-9)

    def test_per_row_shift_invariance(self):
        rng = np.random.default_rng(5)
        phi = rng.normal(size=(4, 4))
        log_p = np.log(rng.uniform(0.1, 0.4, size=4))
        shifts = rng.normal(size=(4, 1)) * 10.0
        config = LossConfig.from_preset("infonce")
        a = bidirectional_nce_loss(phi, log_p, log_p, config).value
        b = bidirectional_nce_loss(phi + shifts, log_p, log_p, config).value
        assert a == pytest.approx(b, abs=1e-9)

    def test_values_nonnegative_and_finite(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            size = int(rng.integers(2, 7))
            phi = rng.normal(size=(size, size)) * rng.uniform(0.5, 4.0)
            log_p = np.log(rng.dirichlet(np.ones(size)))
            for preset in PRESETS:
                value = bidirectional_nce_loss(phi, log_p, log_p, LossConfig.from_preset(preset)).value
                assert value >= 0.0 and np.isfinite(value)


class TestFullSoftmax:
    def test_single_item_vocabulary(self):
        value, _ = full_softmax_value(np.zeros((3, 1)), np.zeros(3, dtype=int))
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_three_way_hand_computation(self):
        phi = np.array([[1.0, 0.0, -1.0]])
        expected = -math.log(math.exp(1.0) / (math.exp(1.0) + 1.0 + math.exp(-1.0)))
        value, _ = full_softmax_value(phi, np.array([0]))
        assert value == pytest.approx(expected, abs=1e-12)

    def test_matches_bidirectional_row_term_when_batch_covers_vocab(self):
        params = make_params(num_items=4, dim=3, seed=2)
        log_bias = math.log(0.25)
        batch = [
            TrainingExample(0, (t,), (t + 1) % 4, 0, log_p_u=log_bias, log_p_i=log_bias)
            for t in range(4)
        ]
        full = full_softmax_row_loss(batch, params, ENC)
        in_batch = loss_with_gradients(batch, params, ENC, LossConfig.from_preset("row_bcnce"))
        assert in_batch.value == pytest.approx(full.value, abs=1e-12)

    def test_gradient_rows_cover_vocabulary(self):
        params = make_params(num_items=5, dim=3, seed=3)
        batch = [TrainingExample(0, (0,), 1, 0), TrainingExample(0, (2,), 3, 0)]
        out = full_softmax_row_loss(batch, params, ENC)
        assert set(out.gradients.rows) == {0, 1, 2, 3, 4}


class TestSampledSoftmax:
    def test_exhaustive_sampling_equals_full_softmax(self):
        num_items = 5
        params = make_params(num_items=num_items, dim=3, seed=4)
        marginals = uniform_marginals(num_items)
        batch = [TrainingExample(0, (0,), 2, 0), TrainingExample(0, (1, 3), 4, 0)]
        rng = np.random.default_rng(0)
        sampled = ssm_loss(batch, params, ENC, marginals, num_sampled=num_items - 1, rng=rng)
        full = full_softmax_row_loss(batch, params, ENC)
        assert sampled.value == pytest.approx(full.value, abs=1e-9)

    def test_single_negative_hand_computation(self):
        num_items = 3
        params = make_params(num_items=num_items, dim=2, seed=5)
        params.item_embeddings[:] = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        marginals = uniform_marginals(num_items)
        batch = [TrainingExample(0, (0,), 1, 0)]
        rng = np.random.default_rng(1)
        out = ssm_loss(batch, params, ENC, marginals, num_sampled=1, rng=rng)
        # positive logit: cos((1,0),(0,1))/tau = 0; the drawn negative is item 0 or 2
        # with cosine +1 or -1; uniform proposal corrections cancel.
        phi_pos = 0.0
        possible = {
            0: math.log(1.0 + math.exp(4.0 - phi_pos)),   # negative item 0: +1/0.25
            2: math.log(1.0 + math.exp(-4.0 - phi_pos)),  # negative item 2: -1/0.25
        }
        assert any(out.value == pytest.approx(v, abs=1e-12) for v in possible.values())

    def test_monte_carlo_mean_matches_enumerated_expectation(self):
        """Drawing 8 of the 9 non-positives leaves exactly one item out, and
        all nine leave-one-out subsets are equiprobable under the uniform
        proposal, so the exact expectation is enumerable.  The Monte-Carlo
        mean must land inside its 3-sigma band around that value (which sits
        strictly below the full-softmax loss: one partition term is always
        missing)."""
        num_items = 10
        params = make_params(num_items=num_items, dim=4, seed=6)
        marginals = uniform_marginals(num_items)
        batch = [TrainingExample(0, (0, 3), 7, 0)]
        full = full_softmax_row_loss(batch, params, ENC).value

        from twotower.model import encode_user, score

        user = encode_user((0, 3), params, ENC)
        logits = [score(user, params.item_embeddings[i], params.temperature) for i in range(num_items)]
        negatives = [i for i in range(num_items) if i != 7]
        loo_losses = []
        for missing in negatives:
            cand = [7] + [i for i in negatives if i != missing]
            den = sum(math.exp(logits[i]) for i in cand)
            loo_losses.append(-math.log(math.exp(logits[7]) / den))
        exact_expectation = sum(loo_losses) / len(loo_losses)
        assert exact_expectation < full  # one term always missing

        rng = np.random.default_rng(2)
        draws = np.array(
            [ssm_loss(batch, params, ENC, marginals, num_sampled=8, rng=rng).value for _ in range(10_000)]
        )
        stderr = draws.std(ddof=1) / math.sqrt(draws.size)
        assert abs(draws.mean() - exact_expectation) <= 3.0 * stderr
        # and the estimate stays a faithful proxy of the full-vocabulary loss
        assert abs(exact_expectation - full) < 0.25

    def test_positive_never_among_negatives(self):
        num_items = 6
        params = make_params(num_items=num_items, dim=3, seed=7)
        marginals = uniform_marginals(num_items)
        batch = [TrainingExample(0, (0,), 3, 0)]
        rng = np.random.default_rng(3)
        for _ in range(200):
            out = ssm_loss(batch, params, ENC, marginals, num_sampled=4, rng=rng)
            # value is finite and positive; collision would double-count the target
            assert np.isfinite(out.value)

    def test_num_sampled_must_be_below_vocab(self):
        params = make_params(num_items=4)
        with pytest.raises(ValueError, match="vocabulary"):
            ssm_loss(
                [TrainingExample(0, (0,), 1, 0)],
                params,
                ENC,
                uniform_marginals(4),
                num_sampled=4,
                rng=np.random.default_rng(0),
            )

    def test_zero_probability_positive_rejected(self):
        params = make_params(num_items=4)
        marginals = EmpiricalMarginals({(0,): 0.0}, {0: math.log(1.0)}, {(0,): 1}, {0: 1}, total=1)
        with pytest.raises(ValueError, match="zero proposal"):
            ssm_loss(
                [TrainingExample(0, (0,), 2, 0)],
                params,
                ENC,
                marginals,
                num_sampled=1,
                rng=np.random.default_rng(0),
            )


class TestDispatcher:
    def test_every_family_returns_gradients(self):
        params = make_params(num_items=6, dim=3, seed=8)
        marginals = uniform_marginals(6)
        rng = np.random.default_rng(4)
        annotated = [
            TrainingExample(0, (0, 1), 2, 0, log_p_u=math.log(0.5), log_p_i=math.log(0.3)),
            TrainingExample(1, (3,), 4, 0, log_p_u=math.log(0.5), log_p_i=math.log(0.7)),
        ]
        labeled = [LabeledExample(0, (0,), 1, 0, 1), LabeledExample(1, (2,), 3, 0, 0)]
        cases = [
            (labeled, LossConfig(family="bce")),
            (annotated, LossConfig.from_preset("bbcnce")),
            (annotated, LossConfig(family="full_softmax_row")),
            (annotated, LossConfig(family="ssm", num_sampled=3)),
        ]
        for batch, config in cases:
            out = loss_with_gradients(batch, params, ENC, config, marginals=marginals, rng=rng)
            assert out.gradients is not None and out.gradients.rows, config.family
            assert np.isfinite(out.value)

    def test_full_softmax_col_needs_universe(self):
        params = make_params()
        batch = [TrainingExample(0, (0,), 1, 0)]
        with pytest.raises(ValueError, match="universe"):
            loss_with_gradients(batch, params, ENC, LossConfig(family="full_softmax_col"))

    def test_full_softmax_col_value(self):
        params = make_params(num_items=5, dim=3, seed=9)
        universe = [(0,), (1,), (2, 3)]
        batch = [TrainingExample(0, (1,), 4, 0), TrainingExample(1, (2, 3), 0, 0)]
        out = loss_with_gradients(batch, params, ENC, LossConfig(family="full_softmax_col"), user_universe=universe)
        # scalar oracle: softmax over the user universe per batch item
        from twotower.model import encode_user, score

        expected = 0.0
        for ex in batch:
            logits = [score(encode_user(key, params, ENC), params.item_embeddings[ex.target_item], 0.25) for key in universe]
            own = universe.index(ex.pseudo_user)
            expected += -(logits[own] - math.log(sum(math.exp(l) for l in logits)))
        assert out.value == pytest.approx(expected / 2.0, abs=1e-12)
