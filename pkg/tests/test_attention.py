"""
Tests for Taylor-expanded attention: the linear path against its quadratic
oracles, the softmax approximation, the MSAR gate and the T-MSA block.
"""

import numpy as np
import pytest

from taylorformer import attention
from taylorformer import costmodel
from taylorformer import suites
from taylorformer import tensor
from taylorformer.attention import AttentionConfig
from taylorformer.attention import AttentionWeights
from taylorformer.attention import MsarConfig
from taylorformer.errors import ConfigurationError
from taylorformer.errors import DimensionError
from taylorformer.errors import NumericalContractError
from taylorformer.errors import ShapeError
from taylorformer.tensor import Tensor


def _qkv(rng, dim, tokens, radius=attention.DEFAULT_RADIUS, batch=()):
    q = attention.normalize_qk(Tensor(rng.standard_normal(
        batch + (dim, tokens))), radius)
    k = attention.normalize_qk(Tensor(rng.standard_normal(
        batch + (dim, tokens))), radius)
    v = Tensor(rng.uniform(-1, 1, batch + (dim, tokens)))
    return q, k, v


class TestConfig:
    def test_heads_have_to_divide_dim(self):
        with pytest.raises(ConfigurationError):
            AttentionConfig(6, heads=4)

    def test_radius_has_to_be_positive(self):
        with pytest.raises(ConfigurationError):
            AttentionConfig(4, norm_radius=0.0)

    def test_gate_kernels_cycle(self):
        msar = MsarConfig((3, 5, 7))
        assert [msar.kernel(head) for head in range(5)] == [3, 5, 7, 3, 5]

    def test_even_gate_kernel(self):
        with pytest.raises(ConfigurationError):
            MsarConfig((3, 4))


class TestNormalize:
    def test_every_token_has_the_radius(self, rng):
        q = attention.normalize_qk(Tensor(rng.standard_normal((2, 5, 9))),
                                   0.5)
        np.testing.assert_allclose(np.linalg.norm(q.data, axis=-2), 0.5)

    def test_zero_token_stays_zero(self):
        raw = np.zeros((3, 2))
        raw[:, 1] = [3.0, 0.0, 4.0]
        q = attention.normalize_qk(Tensor(raw), 0.5).data
        np.testing.assert_array_equal(q[:, 0], 0.0)
        np.testing.assert_allclose(q[:, 1], [0.3, 0.0, 0.4])


class TestLinearAttention:
    @pytest.mark.parametrize("tokens", [1, 2, 7, 64])
    @pytest.mark.parametrize("dim", [4, 16])
    def test_matches_quadratic_oracle(self, rng, tokens, dim):
        q, k, v = _qkv(rng, dim, tokens)
        linear = attention.taylor_attention_linear(q, k, v).data
        quadratic = attention.taylor_attention_quadratic(q, k, v).data
        assert suites.max_relative_error(linear, quadratic) < 1e-10

    def test_single_precision_matches_quadratic_oracle(self, rng):
        with tensor.precision("f32"):
            q, k, v = _qkv(rng, 16, 256)
            linear = attention.taylor_attention_linear(q, k, v).data
            quadratic = attention.taylor_attention_quadratic(q, k, v).data
        assert linear.dtype == np.float32
        assert suites.max_relative_error(linear, quadratic) < 1e-4

    def test_full_oracle_grid(self, rng):
        result = suites.equivalence_suite(trials=100, rng=rng)
        assert len(result.oracle_rows) == 18
        assert result.oracles_agree, result.to_str()
        assert result.approximation_holds, result.to_str()

    def test_permutation_equivariance(self, rng):
        q, k, v = _qkv(rng, 8, 20)
        order = rng.permutation(20)
        out = attention.taylor_attention_linear(q, k, v).data
        permuted = attention.taylor_attention_linear(
            Tensor(q.data[:, order]), Tensor(k.data[:, order]),
            Tensor(v.data[:, order])).data
        np.testing.assert_allclose(permuted, out[:, order], rtol=1e-12,
                                   atol=1e-14)

    def test_constant_values_pass_through(self, rng):
        q, k, _ = _qkv(rng, 4, 10)
        v = Tensor(np.full((4, 10), 0.25))
        out = attention.taylor_attention_linear(q, k, v).data
        np.testing.assert_allclose(out, 0.25, rtol=1e-12)

    def test_heads_are_independent(self, rng):
        q, k, v = _qkv(rng, 4, 12, batch=(3,))
        out = attention.taylor_attention_linear(q, k, v).data
        for head in range(3):
            single = attention.taylor_attention_linear(
                Tensor(q.data[head]), Tensor(k.data[head]),
                Tensor(v.data[head])).data
            np.testing.assert_allclose(out[head], single, rtol=1e-12)

    def test_non_positive_denominator(self):
        q = Tensor([[3.0]])
        k = Tensor([[-3.0]])
        with pytest.raises(NumericalContractError):
            attention.taylor_attention_linear(q, k, Tensor([[1.0]]))

    def test_shapes_have_to_agree(self, rng):
        q, k, v = _qkv(rng, 4, 6)
        with pytest.raises(DimensionError):
            attention.taylor_attention_linear(q, k, Tensor(np.ones((4, 5))))

    def test_multiplies_are_linear_in_tokens(self, rng):
        counts = []
        for tokens in (100, 200, 400):
            q, k, v = _qkv(rng, 8, tokens)
            with tensor.MultiplyCounter() as counter:
                attention.taylor_attention_linear(q, k, v)
            counts.append(counter.total)
        assert counts[2] - counts[1] == 2 * (counts[1] - counts[0])
        q, k, v = _qkv(rng, 8, 100)
        with tensor.MultiplyCounter() as counter:
            attention.taylor_attention_linear(q, k, v)
        assert counter.exact("") == 3 * 8 * 8 * 100
        assert counter.exact("plumbing") == 8 * 100


class TestQuadraticPaths:
    def test_blocks_match_one_matrix(self, rng, monkeypatch):
        q, k, v = _qkv(rng, 4, 50)
        whole = attention.softmax_attention(q, k, v).data
        monkeypatch.setattr(attention, "QUADRATIC_BLOCK", 120)
        blocked = attention.softmax_attention(q, k, v).data
        np.testing.assert_allclose(blocked, whole, rtol=1e-13)

    def test_unknown_order(self, rng):
        q, k, v = _qkv(rng, 4, 5)
        with pytest.raises(ConfigurationError):
            attention.taylor_attention_quadratic(q, k, v, order=3)

    def test_weight_rows_sum_to_one(self, rng):
        q, k, _ = _qkv(rng, 4, 9)
        for order in (1, 2):
            weights = attention.taylor_weights(q, k, order).data
            np.testing.assert_allclose(weights.sum(axis=-1), 1.0)


class TestSoftmaxApproximation:
    def test_logits_and_weights_are_bounded(self, rng):
        q, k, _ = _qkv(rng, 16, 64)
        logits = np.matmul(q.data.T, k.data)
        assert np.max(np.abs(logits)) <= 0.25 + 1e-12
        raw = attention.taylor_weights(q, k, normalize=False).data
        assert np.min(raw) >= 0.75 - 1e-12

    def test_worst_case_ratio(self):
        rows = attention.approximation_table(0.5, 11)
        worst = max(abs(1 - row[4]) for row in rows)
        assert worst == pytest.approx(1 - 0.75 * np.exp(0.25))
        assert worst < 0.0371
        for logit, _, _, _, first, second in rows:
            if abs(logit) > 1e-6:
                assert abs(1 - second) < abs(1 - first)

    def test_table_spans_the_logit_range(self):
        rows = attention.approximation_table(0.5, 5)
        assert rows[0][0] == pytest.approx(-0.25)
        assert rows[-1][0] == pytest.approx(0.25)
        assert rows[2][1:] == pytest.approx((1.0, 1.0, 1.0, 1.0, 1.0))

    def test_random_trials(self, rng):
        result = suites.approximation_trials(suites.EquivalenceResult(),
                                             trials=100, rng=rng)
        assert len(result.trials) == 100
        assert result.max_deviation <= 0.035
        assert result.second_order_wins == 100

    def test_first_order_error_at_the_logit_bounds(self):
        x = Tensor([-0.25, 0.0, 0.25])
        exact = tensor.exp(x).data
        relative = np.abs(exact - (1 + x.data)) / exact
        assert relative[1] == 0
        assert relative[2] == pytest.approx(1 - 1.25 * np.exp(-0.25))
        assert relative[2] < 0.032
        # 3.2% holds down to x = -0.233; the lower bound reaches 3.70%
        assert abs(1 - 0.767 * np.exp(0.233)) < 0.032
        assert relative[0] == pytest.approx(1 - 0.75 * np.exp(0.25))

    def test_weights_before_normalization(self, rng):
        q, k, _ = _qkv(rng, 16, 64)
        _, first = attention.weight_deviation(q, k, 1, normalize=False)
        _, second = attention.weight_deviation(q, k, 2, normalize=False)
        assert 0 < first <= 1 - 0.75 * np.exp(0.25) + 1e-12
        assert second < first
        q = Tensor(np.array([[0.5], [0.0]]))
        k = Tensor(np.array([[-0.5], [0.0]]))
        _, worst = attention.weight_deviation(q, k, 1, normalize=False)
        assert worst == pytest.approx(1 - 0.75 * np.exp(0.25))
        assert attention.weight_deviation(q, k, 1)[1] == 0

    def test_deviation_shrinks_with_the_radius(self, rng):
        wide = _qkv(rng, 16, 32, radius=0.5)
        narrow = (attention.normalize_qk(wide[0], 0.25),
                  attention.normalize_qk(wide[1], 0.25))
        assert attention.weight_deviation(*narrow)[1] < \
            attention.weight_deviation(*wide[:2])[1]


class TestMsarGate:
    def test_gate_is_a_probability(self, rng):
        config = AttentionConfig(8, heads=2)
        weights = AttentionWeights(config, MsarConfig((3, 5)), rng)
        q, k, _ = _qkv(rng, 4, 20, batch=(2,))
        gate = attention.msar_gate(q, k, weights, 4, 5).data
        assert gate.shape == (2, 1, 4, 5)
        assert np.all((gate > 0) & (gate < 1))

    def test_zero_weights_give_one_half(self, rng):
        weights = AttentionWeights(AttentionConfig(8, heads=2),
                                   MsarConfig((3, 5)), rng)
        for conv in weights.gate:
            conv.weight.data = np.zeros_like(conv.weight.data)
            conv.bias.data = np.zeros_like(conv.bias.data)
        q, k, _ = _qkv(rng, 4, 20, batch=(2,))
        gate = attention.msar_gate(q, k, weights, 4, 5).data
        np.testing.assert_array_equal(gate, 0.5)

    def test_constant_input_gives_a_constant_gate(self, rng):
        weights = AttentionWeights(AttentionConfig(8, heads=2),
                                   MsarConfig((3, 5)), rng)
        columns = rng.standard_normal((2, 2, 4, 1))
        tokens = np.repeat(columns, 81, axis=-1)
        q = attention.normalize_qk(Tensor(tokens[0]))
        k = attention.normalize_qk(Tensor(tokens[1]))
        gate = attention.msar_gate(q, k, weights, 9, 9).data
        for head in range(2):
            interior = gate[head, 0, 2:-2, 2:-2]
            np.testing.assert_allclose(interior, interior[0, 0], rtol=1e-12)

    def test_gating_never_grows_the_output(self, rng):
        weights = AttentionWeights(AttentionConfig(8, heads=2),
                                   MsarConfig((3, 5)), rng)
        q, k, v = _qkv(rng, 4, 20, batch=(2,))
        out = attention.taylor_attention_linear(q, k, v).data
        gate = attention.msar_gate(q, k, weights, 4, 5).data
        gated = out * gate.reshape(2, 1, 20)
        assert np.max(np.abs(gated)) <= np.max(np.abs(out))

    def test_map_has_to_hold_the_tokens(self, rng):
        weights = AttentionWeights(AttentionConfig(4), rng=rng)
        q, k, _ = _qkv(rng, 4, 20, batch=(1,))
        with pytest.raises(ShapeError):
            attention.msar_gate(q, k, weights, 3, 5)


class TestTmsaBlock:
    def test_zero_projection_is_identity(self, rng):
        weights = AttentionWeights(AttentionConfig(4, heads=2), rng=rng)
        weights.project.weight.data = np.zeros_like(
            weights.project.weight.data)
        x = Tensor(rng.standard_normal((4, 5, 6)))
        out = attention.tmsa_block(x, weights)
        np.testing.assert_array_equal(out.data, x.data)

    def test_identity_gate_by_hand(self, rng):
        weights = AttentionWeights(AttentionConfig(4, heads=2), rng=rng)
        x = Tensor(rng.standard_normal((4, 3, 5)))
        out = attention.tmsa_block(x, weights, gate="identity").data
        qkv = weights.qkv_dwconv(weights.qkv(weights.norm(x))).data
        qkv = qkv.reshape(3, 2, 2, 15)
        heads = []
        for head in range(2):
            q, k, v = qkv[:, head]
            q = 0.5 * q / np.linalg.norm(q, axis=0)
            k = 0.5 * k / np.linalg.norm(k, axis=0)
            scores = 1 + q.T @ k
            scores /= scores.sum(axis=1, keepdims=True)
            heads.append(v @ scores.T)
        projection = weights.project.weight.data.reshape(4, 4)
        expected = x.data + (projection @ np.concatenate(heads)).reshape(
            4, 3, 5)
        np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-12)

    def test_shape_is_kept(self, rng):
        weights = AttentionWeights(AttentionConfig(8, heads=4), rng=rng)
        x = Tensor(rng.standard_normal((2, 8, 3, 7)))
        assert attention.tmsa_block(x, weights).shape == (2, 8, 3, 7)

    def test_multiplies_match_closed_form(self, rng):
        dim, height, width = 8, 8, 8
        tokens = height * width
        weights = AttentionWeights(AttentionConfig(dim), rng=rng)
        x = Tensor(rng.standard_normal((dim, height, width)))
        with tensor.MultiplyCounter() as counter:
            attention.tmsa_block(x, weights)
        expected = 18 * tokens * dim + 7 * tokens * dim * dim
        assert counter.exact("tmsa") == expected
        assert costmodel.tmsa_macs_square(height, width, dim) == expected
        assert costmodel.tmsa_macs(tokens, dim) == expected

    @pytest.mark.parametrize("gate", ["msar", "identity"])
    def test_multiplies_with_several_heads(self, rng, gate):
        dim, tokens = 12, 30
        msar = MsarConfig((3, 5, 7))
        weights = AttentionWeights(AttentionConfig(dim, heads=3), msar, rng)
        x = Tensor(rng.standard_normal((dim, 5, 6)))
        with tensor.MultiplyCounter() as counter:
            attention.tmsa_block(x, weights, gate=gate)
        assert counter.exact("tmsa") == costmodel.tmsa_macs(
            tokens, dim, 3, (3, 5, 7), gated=gate == "msar")

    def test_parameters_match_closed_form(self, rng):
        weights = AttentionWeights(AttentionConfig(8, heads=2),
                                   MsarConfig((3, 5)), rng)
        assert weights.num_parameters() == costmodel.tmsa_params(8, 2,
                                                                 (3, 5))

    def test_unknown_gate(self, rng):
        weights = AttentionWeights(AttentionConfig(4), rng=rng)
        with pytest.raises(ConfigurationError):
            attention.tmsa_block(Tensor(np.ones((4, 2, 2))), weights,
                                 gate="none")

    def test_wrong_channels(self, rng):
        weights = AttentionWeights(AttentionConfig(4), rng=rng)
        with pytest.raises(ConfigurationError):
            attention.tmsa_block(Tensor(np.ones((3, 2, 2))), weights)

    def test_block_works_per_sample(self, rng):
        block = attention.TransformerBlock(4, 2, rng)
        x = rng.standard_normal((3, 4, 4, 5))
        batched = block(Tensor(x)).data
        for index in range(3):
            np.testing.assert_allclose(batched[index],
                                       block(Tensor(x[index])).data,
                                       rtol=1e-12, atol=1e-13)


class TestGradients:
    def test_suite(self, rng):
        results = suites.gradient_suite(rng, samples=10, only=["attention"])
        for result in results:
            assert result.passed, result.to_str()
