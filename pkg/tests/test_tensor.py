"""
Tests for the tape, the multiply counter, the kernels and the parameter
containers.
"""

import numpy as np
import pytest

from taylorformer import suites
from taylorformer import tensor
from taylorformer.errors import ConfigurationError
from taylorformer.errors import ContractError
from taylorformer.errors import DimensionError
from taylorformer.errors import ShapeError
from taylorformer.layers import Conv2d
from taylorformer.layers import LayerNorm
from taylorformer.layers import Module
from taylorformer.layers import Parameter
from taylorformer.tensor import Tape
from taylorformer.tensor import Tensor


def _direct_conv(x, weight, padding, groups=1):
    "Reference cross-correlation of a (C, H, W) input, one output at a time."
    out_channels, group_channels, kernel_h, kernel_w = weight.shape
    padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out_h = padded.shape[1] - kernel_h + 1
    out_w = padded.shape[2] - kernel_w + 1
    per_group = out_channels // groups
    out = np.zeros((out_channels, out_h, out_w))
    for channel in range(out_channels):
        group = channel // per_group
        inputs = padded[group * group_channels:(group + 1) * group_channels]
        for row in range(out_h):
            for col in range(out_w):
                out[channel, row, col] = np.sum(
                    inputs[:, row:row + kernel_h, col:col + kernel_w] *
                    weight[channel])
    return out


class TestTape:
    def test_square_gradient(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = tensor.sum(x * x)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])

    def test_gradients_accumulate_over_reuse(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        with Tape() as tape:
            loss = x * x + x * 2.0
            tape.backward(loss)
        assert x.grad == pytest.approx(8.0)

    def test_broadcast_gradient_is_summed(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones((1, 4)), requires_grad=True)
        with Tape() as tape:
            tape.backward(tensor.sum(a + b))
        np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))

    def test_nothing_recorded_without_tape(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = x * x
        assert not y.requires_grad
        with Tape() as tape:
            z = x * x
        assert z.requires_grad
        assert len(tape) == 1

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = x * x
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_loss_from_another_tape(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            loss = tensor.sum(x)
        with Tape() as other:
            with pytest.raises(ContractError):
                other.backward(loss)

    def test_backward_without_tape(self):
        with pytest.raises(ContractError):
            tensor.backward(Tensor(1.0))


class TestPrecision:
    def test_context_switches_and_restores(self):
        with tensor.precision("f32"):
            assert Tensor([1.0]).dtype == np.float32
            assert tensor.get_precision() == "f32"
        assert Tensor([1.0]).dtype == np.float64

    def test_unknown_precision(self):
        with pytest.raises(ConfigurationError):
            tensor.set_precision("f16")


class TestMultiplyCounter:
    def test_matmul_count(self):
        a = Tensor(np.ones((2, 3, 4)))
        b = Tensor(np.ones((4, 5)))
        with tensor.MultiplyCounter() as counter:
            tensor.matmul(a, b)
        assert counter.total == 2 * 3 * 4 * 5

    def test_additions_are_free(self):
        a = Tensor(np.ones((3, 3)))
        with tensor.MultiplyCounter() as counter:
            tensor.sum(tensor.exp(a + a - 1.0))
        assert counter.total == 0

    def test_labels_nest(self):
        a = Tensor(np.ones((2, 2)))
        with tensor.MultiplyCounter() as counter:
            with tensor.label("outer"):
                tensor.matmul(a, a)
                with tensor.label("inner"):
                    a * a
        assert counter.exact("outer") == 8
        assert counter.exact("outer/inner") == 4
        assert counter.within("outer") == 12
        assert counter.matching("inner") == 4
        assert tensor.current_label() == ""

    def test_conv_count_matches_macs(self, rng):
        conv = Conv2d(4, 6, 3, rng, groups=2)
        x = Tensor(rng.standard_normal((4, 7, 5)))
        with tensor.MultiplyCounter() as counter:
            conv(x)
        assert counter.total == conv.macs(7, 5)


class TestElementwise:
    def test_unknown_operation(self):
        with pytest.raises(ConfigurationError):
            tensor.elementwise("tan", Tensor([1.0]))

    def test_shapes_that_do_not_broadcast(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))

    def test_sigmoid_stays_finite(self):
        out = tensor.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_sigmoid_of_zero(self):
        assert tensor.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_hardswish_saturates(self):
        x = np.array([-10.0, -3.5, -3.0, 3.0, 3.5, 10.0])
        out = tensor.hardswish(Tensor(x)).data
        np.testing.assert_array_equal(out[:3], 0.0)
        np.testing.assert_array_equal(out[3:], x[3:])
        assert tensor.hardswish(Tensor([1.0])).data[0] == pytest.approx(
            4.0 / 6)

    def test_broadcast_matches_tiling(self, rng):
        a = rng.standard_normal((3, 4, 5))
        row = rng.standard_normal((1, 4, 1))
        tiled = np.tile(row, (3, 1, 5))
        np.testing.assert_array_equal((Tensor(a) + Tensor(row)).data,
                                      (Tensor(a) + Tensor(tiled)).data)
        np.testing.assert_array_equal((Tensor(a) * Tensor(row)).data,
                                      (Tensor(a) * Tensor(tiled)).data)

    def test_clamp_gradient_is_zero_outside(self):
        x = Tensor([-2.0, 0.5, 2.0], requires_grad=True)
        with Tape() as tape:
            tape.backward(tensor.sum(tensor.clamp(x, -1.0, 1.0)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


class TestShapes:
    def test_rearrange_inverse(self, rng):
        x = Tensor(rng.standard_normal((2, 6, 4)))
        y = tensor.rearrange(x, "b (h c) n -> b h c n", h=3)
        back = tensor.rearrange(y, "b h c n -> b (h c) n")
        np.testing.assert_array_equal(back.data, x.data)

    def test_rearrange_bad_pattern(self):
        with pytest.raises(ShapeError):
            tensor.rearrange(Tensor(np.ones((2, 5))), "a (b c) -> a b c",
                             b=2)

    def test_matmul_inner_dimensions(self):
        with pytest.raises(DimensionError):
            tensor.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_matmul_by_hand(self):
        out = tensor.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]),
                            Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_matmul_is_associative(self, rng):
        a, b, c = [Tensor(rng.standard_normal((8, 8))) for _ in range(3)]
        left = tensor.matmul(tensor.matmul(a, b), c).data
        right = tensor.matmul(a, tensor.matmul(b, c)).data
        assert suites.max_relative_error(left, right) < 1e-10

    def test_softmax_rows_sum_to_one(self, rng):
        out = tensor.softmax(Tensor(rng.standard_normal((5, 7)) * 30))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0)


class TestConvolution:
    @pytest.mark.parametrize("groups", [1, 2, 4])
    def test_matches_direct_loop(self, rng, groups):
        x = rng.standard_normal((4, 6, 5))
        weight = rng.standard_normal((4, 4 // groups, 3, 3))
        out = tensor.conv2d(Tensor(x), Tensor(weight), padding=1,
                            groups=groups)
        np.testing.assert_allclose(out.data, _direct_conv(x, weight, 1,
                                                          groups),
                                   rtol=1e-12, atol=1e-12)

    def test_batch_axis(self, rng):
        x = rng.standard_normal((3, 2, 5, 5))
        weight = Tensor(rng.standard_normal((4, 2, 3, 3)))
        batched = tensor.conv2d(Tensor(x), weight, padding=1).data
        for index in range(3):
            single = tensor.conv2d(Tensor(x[index]), weight, padding=1).data
            np.testing.assert_allclose(batched[index], single, rtol=1e-12)

    def test_groups_have_to_divide_channels(self, rng):
        with pytest.raises(ConfigurationError):
            tensor.conv2d(Tensor(np.ones((3, 4, 4))), Tensor(np.ones((3, 1,
                                                                     1, 1))),
                          groups=2)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            tensor.conv2d(Tensor(np.ones((1, 2, 2))),
                          Tensor(np.ones((1, 1, 5, 5))))


class TestDeformSample:
    def test_integer_offsets_index_directly(self, rng):
        x = rng.standard_normal((2, 5, 6))
        offsets = np.zeros((2, 5, 6))
        offsets[0] = 1.0
        offsets[1] = -2.0
        cols = tensor.deform_sample(Tensor(x), Tensor(offsets), 1).data
        expected = np.zeros((2, 5, 6))
        expected[:, :4, 2:] = x[:, 1:, :4]
        np.testing.assert_array_equal(cols[:, 0], expected)

    def test_zero_offsets_give_plain_windows(self, rng):
        x = rng.standard_normal((3, 4, 4))
        weight = rng.standard_normal((3, 1, 3, 3))
        cols = tensor.deform_sample(Tensor(x), Tensor(np.zeros((18, 4, 4))),
                                    3)
        out = tensor.depthwise_apply(cols, Tensor(weight)).data
        np.testing.assert_allclose(out, _direct_conv(x, weight, 1, 3),
                                   rtol=1e-12, atol=1e-12)

    def test_half_pixel_offset_averages(self):
        x = np.arange(12, dtype=np.float64).reshape(1, 3, 4)
        offsets = np.zeros((2, 3, 4))
        offsets[1] = 0.5
        cols = tensor.deform_sample(Tensor(x), Tensor(offsets), 1).data
        np.testing.assert_allclose(cols[0, 0, :, :3],
                                   (x[0, :, :3] + x[0, :, 1:]) / 2)
        np.testing.assert_allclose(cols[0, 0, :, 3], x[0, :, 3] / 2)

    def test_offset_shape_is_checked(self):
        with pytest.raises(DimensionError):
            tensor.deform_sample(Tensor(np.ones((1, 4, 4))),
                                 Tensor(np.zeros((2, 4, 4))), 3)

    def test_bilinear_multiplies(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 5)))
        offsets = Tensor(rng.uniform(-1, 1, (2, 18, 4, 5)))
        with tensor.MultiplyCounter() as counter:
            tensor.deform_sample(x, offsets, 3)
        assert counter.total == 4 * 2 * 3 * 9 * 4 * 5


class TestModules:
    def test_named_parameters_walk_lists(self, rng):
        class Stack(Module):
            def __init__(self):
                self.first = Conv2d(2, 2, 1, rng, bias=True)
                self.rest = [Conv2d(2, 2, 1, rng), LayerNorm(2)]

        names = [name for name, _ in Stack().named_parameters()]
        assert names == ["first.weight", "first.bias", "rest.0.weight",
                         "rest.1.weight"]

    def test_zero_grad(self, rng):
        conv = Conv2d(2, 2, 1, rng)
        x = Tensor(rng.standard_normal((2, 3, 3)))
        with Tape() as tape:
            tape.backward(tensor.sum(conv(x)))
        assert conv.weight.grad is not None
        conv.zero_grad()
        assert conv.weight.grad is None

    def test_parameter_counts(self, rng):
        conv = Conv2d(4, 8, 3, rng, groups=2, bias=True)
        assert conv.num_parameters() == 8 * 2 * 9 + 8

    def test_layer_norm_unit_variance(self, rng):
        x = Tensor(rng.standard_normal((6, 3, 3)) * 5 + 2)
        out = LayerNorm(6)(x).data
        centered = out - out.mean(axis=0)
        np.testing.assert_allclose(np.mean(centered ** 2, axis=0), 1.0,
                                   rtol=1e-4)

    def test_parameter_requires_grad(self):
        assert Parameter(np.zeros(2)).requires_grad


class TestGradients:
    @pytest.mark.parametrize("suite", ["tensor", "shapes", "convolutions"])
    def test_suite(self, rng, suite):
        results = suites.gradient_suite(rng, samples=10, only=[suite])
        assert results
        for result in results:
            assert result.passed, result.to_str()

    def test_gradcheck_finds_a_wrong_gradient(self, rng):
        x = Tensor(rng.uniform(0.5, 1.0, 5), requires_grad=True)

        def wrong():
            return tensor.record(x.data ** 2, (x,), lambda g: (g * x.data,))
        result = suites.gradcheck("wrong", wrong, [("x", x)], rng=rng)
        assert not result.passed

    def test_gradcheck_needs_64_bits(self):
        with tensor.precision("f32"):
            x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ConfigurationError):
            suites.gradcheck("f32", lambda: x * x, [("x", x)])

    def test_relative_error_floor(self):
        assert suites.relative_error(0.0, 1e-9) == pytest.approx(1e-3)
        assert suites.relative_error(2.0, 1.0) == pytest.approx(0.5)
