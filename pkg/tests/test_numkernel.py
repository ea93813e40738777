"""Tensor, tape, and gradient-oracle behavior."""

import math

import numpy as np
import pytest

from pico import numkernel as nk
from pico.errors import ContractError, ShapeError
from pico.numkernel import ComputeTape, Tensor, backward, finite_diff_check

from helpers import sweep_primitive_gradients


def test_tensor_shape_data_invariant():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert t.size == 4
    assert t.grad is None


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(nk.matmul(eye, m).data, m.data)

    def test_zeros(self):
        z = Tensor(np.zeros((2, 3)))
        any_ = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        assert np.array_equal(nk.matmul(z, any_).data, np.zeros((2, 4)))

    def test_hand_product_against_triple_loop(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        expected = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    expected[i, j] += a[i, k] * b[k, j]
        assert np.array_equal(nk.matmul(Tensor(a), Tensor(b)).data, expected)
        assert expected.tolist() == [[19.0, 22.0], [43.0, 50.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            nk.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        assert "(2, 3)" in str(exc.value)

    def test_backward_rules(self):
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        b = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        with ComputeTape():
            c = nk.matmul(a, b)
            backward(c.sum())
        g = np.ones((2, 4))
        assert np.allclose(a.grad, g @ b.data.T)
        assert np.allclose(b.grad, a.data.T @ g)


class TestSoftmax:
    def test_uniform_on_equal_inputs(self):
        out = nk.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        assert np.allclose(out.data, [1 / 3] * 3)

    def test_ln2_case(self):
        out = nk.softmax(Tensor([0.0, math.log(2.0)]), axis=0)
        assert np.allclose(out.data, [1 / 3, 2 / 3])

    def test_large_inputs_stabilized(self):
        out = nk.softmax(Tensor([1000.0, 1000.0]), axis=0)
        assert np.array_equal(out.data, [0.5, 0.5])
        assert np.isfinite(out.data).all()

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            x = Tensor(rng.normal(scale=20.0, size=(5, 7)))
            s = nk.softmax(x, axis=-1).data.sum(axis=-1)
            assert np.all(np.abs(s - 1.0) <= 1e-12)
            assert np.all(nk.softmax(x, axis=-1).data >= 0.0)

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            nk.softmax(Tensor([[1.0]]), axis=5)


class TestLayerNorm:
    def test_constant_row_maps_to_bias(self):
        x = Tensor([[7.0, 7.0, 7.0]])
        out = nk.layer_norm(x, Tensor([1.0, 1.0, 1.0]), Tensor([0.0, 0.0, 0.0]))
        assert np.array_equal(out.data, np.zeros((1, 3)))

    def test_already_normalized(self):
        out = nk.layer_norm(
            Tensor([[1.0, -1.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=1e-12
        )
        assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_hand_mean_variance(self):
        # mean 4, population variance 8/3; (2-4)/sqrt(8/3) = -sqrt(1.5)
        out = nk.layer_norm(
            Tensor([[2.0, 4.0, 6.0]]), Tensor([1.0] * 3), Tensor([0.0] * 3)
        )
        expected = [-math.sqrt(1.5), 0.0, math.sqrt(1.5)]
        assert np.allclose(out.data[0], expected, atol=1e-4)

    def test_gain_bias_shape_check(self):
        with pytest.raises(ShapeError):
            nk.layer_norm(Tensor([[1.0, 2.0]]), Tensor([1.0]), Tensor([0.0, 0.0]))


class TestBackward:
    def test_square_derivative(self):
        with ComputeTape():
            x = Tensor(3.0, requires_grad=True)
            backward(x * x)
        assert float(x.grad) == pytest.approx(6.0)

    def test_frozen_factor_gets_no_grad(self):
        frozen = Tensor([1.0, 2.0, 3.0], requires_grad=False)
        w = Tensor([4.0, 5.0, 6.0], requires_grad=True)
        with ComputeTape():
            backward((frozen * w).sum())
        assert frozen.grad is None
        assert np.array_equal(w.grad, frozen.data)

    def test_non_scalar_loss_rejected(self):
        with ComputeTape():
            x = Tensor([1.0, 2.0], requires_grad=True)
            y = x * x
            with pytest.raises(ContractError):
                backward(y)

    def test_reused_tensor_accumulates(self):
        with ComputeTape():
            x = Tensor(2.0, requires_grad=True)
            backward(x * x + x)  # d/dx = 2x + 1 = 5
        assert float(x.grad) == pytest.approx(5.0)

    def test_two_layer_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        w1 = Tensor(rng.normal(size=(5, 4)))
        w2 = Tensor(rng.normal(size=(4, 1)))

        def f(x):
            h = nk.matmul(x, w1).tanh()
            return nk.matmul(h, w2).sum()

        err = finite_diff_check(f, Tensor(rng.normal(size=(2, 5))), h=1e-5)
        assert err <= 1e-4


class TestTape:
    def test_records_in_order_and_replays_reverse(self):
        with ComputeTape() as tape:
            a = Tensor(1.0, requires_grad=True)
            b = a + 1.0
            c = b * 2.0
            d = c.sum()
        assert len(tape.records) == 3
        assert tape.records[0].out is b
        assert tape.records[1].out is c
        assert tape.records[2].out is d
        backward(d)
        assert float(a.grad) == pytest.approx(2.0)

    def test_no_recording_without_tape(self):
        a = Tensor(1.0, requires_grad=True)
        b = a * 3.0
        assert b._tape is None
        assert b.requires_grad  # flag still propagates

    def test_no_recording_for_untracked_inputs(self):
        with ComputeTape() as tape:
            a = Tensor([1.0, 2.0])
            _ = a * 2.0 + 1.0
        assert len(tape.records) == 0

    def test_frozen_never_allocates_grad_buffer(self):
        frozen = Tensor(np.ones((3, 3)), requires_grad=False)
        live = Tensor(np.ones((3, 3)), requires_grad=True)
        with ComputeTape():
            out = nk.matmul(frozen, live).sum()
            backward(out)
        assert frozen.grad is None
        assert live.grad is not None


class TestFiniteDiffCheck:
    def test_linear_function_is_exact(self):
        w = Tensor([2.0, -3.0, 0.5])
        err = finite_diff_check(lambda x: (x * w).sum(), Tensor([1.0, 2.0, 3.0]))
        assert err <= 1e-9

    def test_sine_matches_cosine_oracle(self):
        point = Tensor([0.5])
        base = Tensor(point.data.copy(), requires_grad=True)
        with ComputeTape():
            backward(base.sin().sum())
        assert base.grad[0] == pytest.approx(math.cos(0.5), abs=1e-12)
        assert finite_diff_check(lambda x: x.sin().sum(), point) <= 1e-6

    def test_requires_scalar_output(self):
        with pytest.raises(ContractError):
            finite_diff_check(lambda x: x * 2.0, Tensor([1.0, 2.0]))


def test_all_primitives_pass_gradient_sweep():
    # The acceptance suite runs the full 100-point sweep; this is a fast gate.
    worst = sweep_primitive_gradients(points_per_op=5)
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    assert not bad, f"primitives failing finite-difference check: {bad}"


class TestMaximum:
    def test_tie_gradient_goes_to_first(self):
        with ComputeTape():
            a = Tensor([1.0, 5.0], requires_grad=True)
            b = Tensor([1.0, 2.0], requires_grad=True)
            backward(nk.maximum(a, b).sum())
        assert np.array_equal(a.grad, [1.0, 1.0])
        assert b.grad is None or np.array_equal(b.grad, [0.0, 0.0])

    def test_values(self):
        out = nk.maximum(Tensor([1.0, -2.0]), Tensor([0.5, 3.0]))
        assert np.array_equal(out.data, [1.0, 3.0])


def test_embed_scatter_adds_repeated_rows():
    with ComputeTape():
        table = Tensor(np.zeros((4, 2)), requires_grad=True)
        out = nk.embed(table, [1, 1, 3])
        backward(out.sum())
    assert np.array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])
