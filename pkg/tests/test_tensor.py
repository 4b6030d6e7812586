import numpy as np
import pytest

from tbvi import tensor as T


class TestAffine:
    def test_identity_weight(self):
        out = T.affine(T.Tensor([[1.0, 2.0]]), T.Tensor(np.eye(2)), T.Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.values, [[1.0, 2.0]])

    def test_hand_computed(self):
        out = T.affine(T.Tensor([[1.0, 1.0]]), T.Tensor([[2.0, 3.0], [4.0, 5.0]]), T.Tensor([1.0, 1.0]))
        np.testing.assert_array_equal(out.values, [[7.0, 9.0]])

    def test_zero_input_rows_equal_bias(self, rng):
        w = T.Tensor(rng.normal(size=(3, 4)))
        b = T.Tensor(rng.normal(size=4))
        out = T.affine(T.Tensor(np.zeros((5, 3))), w, b)
        np.testing.assert_array_equal(out.values, np.tile(b.values, (5, 1)))

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeMismatchError):
            T.affine(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))), T.Tensor(np.zeros(2)))

    def test_float64_everywhere(self):
        out = T.affine(T.Tensor([[1, 2]]), T.Tensor([[1, 0], [0, 1]]), T.Tensor([0, 0]))
        assert out.values.dtype == np.float64


class TestActivations:
    def test_tanh_zero(self):
        assert float(T.tanh(T.Tensor(0.0))) == 0.0

    def test_sigmoid_zero(self):
        assert float(T.sigmoid(T.Tensor(0.0))) == 0.5

    def test_tanh_odd_symmetry(self, rng):
        x = rng.uniform(-2, 2, size=100)
        total = T.tanh(T.Tensor(x)).values + T.tanh(T.Tensor(-x)).values
        np.testing.assert_allclose(total, 0.0, atol=1e-15)

    def test_extreme_logits_stay_finite(self):
        x = T.Tensor(np.array([-50.0, 50.0, -700.0, 700.0]))
        for op in (T.sigmoid, T.tanh, T.softplus):
            assert np.isfinite(op(x).values).all()

    def test_exp_overflow_raises(self):
        with pytest.raises(T.NumericError):
            T.exp(T.Tensor(1000.0))


class TestLogMeanExp:
    def test_single_entry_identity(self, rng):
        for a in rng.uniform(-40, 40, size=20):
            out = T.log_mean_exp(T.Tensor([[a]]), axis=1)
            assert float(out) == a

    def test_two_zeros(self):
        assert float(T.log_mean_exp(T.Tensor([[0.0, 0.0]]), axis=1)) == 0.0

    def test_log1_log3(self):
        out = T.log_mean_exp(T.Tensor([[np.log(1.0), np.log(3.0)]]), axis=1)
        np.testing.assert_allclose(float(out), np.log(2.0), rtol=1e-15)

    def test_neg_inf_mixed_with_finite(self):
        out = T.log_mean_exp(T.Tensor([[-np.inf, 0.0]]), axis=1)
        np.testing.assert_allclose(float(out), -np.log(2.0), rtol=1e-15)

    def test_all_neg_inf_row_raises(self):
        with pytest.raises(T.NumericError):
            T.log_mean_exp(T.Tensor([[-np.inf, -np.inf]]), axis=1)

    def test_empty_axis_raises(self):
        with pytest.raises(T.EmptyReductionError):
            T.log_mean_exp(T.Tensor(np.zeros((2, 0))), axis=1)

    def test_shift_invariance(self, rng):
        rows = rng.uniform(-30, 30, size=(8, 6))
        shifts = rng.uniform(-100, 100, size=(8, 1))
        base = T.log_mean_exp(T.Tensor(rows), axis=1).values
        shifted = T.log_mean_exp(T.Tensor(rows + shifts), axis=1).values - shifts[:, 0]
        np.testing.assert_allclose(shifted, base, atol=1e-12)

    def test_backward_is_self_normalized_weights(self, rng):
        rows = rng.uniform(-5, 5, size=(4, 7))
        leaf = T.Tensor(rows, requires_grad=True)
        with T.Tape() as tape:
            out = T.tsum(T.log_mean_exp(leaf, axis=1))
        grads = T.backward(out, tape)
        g = grads[leaf]
        expected = T.softmax_weights(rows, axis=1)
        np.testing.assert_allclose(g, expected, atol=1e-13)
        np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)


class TestBackward:
    def test_linear_map_gradient(self, rng):
        x = rng.normal(size=(1, 3))
        w = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with T.Tape() as tape:
            loss = T.tsum(T.affine(T.Tensor(x), w, T.Tensor(np.zeros(4))))
        grads = T.backward(loss, tape)
        np.testing.assert_allclose(grads[w], np.tile(x.T, (1, 4)), atol=1e-14)

    def test_tanh_gradient_at_zero(self):
        w = T.Tensor(0.0, requires_grad=True)
        with T.Tape() as tape:
            loss = T.tanh(w)
        grads = T.backward(loss, tape)
        assert grads[w] == 1.0

    def test_fanout_accumulates(self):
        w = T.Tensor(3.0, requires_grad=True)
        with T.Tape() as tape:
            loss = w + w
        grads = T.backward(loss, tape)
        assert grads[w] == 2.0

    def test_two_layer_mlp_matches_finite_differences(self, rng):
        w1 = T.Tensor(rng.uniform(-2, 2, size=(3, 5)), requires_grad=True)
        b1 = T.Tensor(rng.uniform(-2, 2, size=5), requires_grad=True)
        w2 = T.Tensor(rng.uniform(-2, 2, size=(5, 2)), requires_grad=True)
        b2 = T.Tensor(rng.uniform(-2, 2, size=2), requires_grad=True)
        x = rng.uniform(-2, 2, size=(4, 3))

        def f():
            h = T.tanh(T.affine(T.Tensor(x), w1, b1))
            return T.tmean(T.square(T.affine(h, w2, b2)))

        assert T.finite_diff_check(f, [w1, b1, w2, b2], step=1e-5) < 1e-4

    def test_non_scalar_loss_rejected(self):
        w = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            out = w * 2.0
        with pytest.raises(T.ShapeMismatchError):
            T.backward(out, tape)

    def test_tape_consumed_once(self):
        w = T.Tensor(1.0, requires_grad=True)
        with T.Tape() as tape:
            loss = w * 2.0
        T.backward(loss, tape)
        with pytest.raises(T.TapeError):
            T.backward(loss, tape)

    def test_grad_accumulator_matches_map(self):
        w = T.Tensor([1.0, -1.0], requires_grad=True)
        with T.Tape() as tape:
            loss = T.tsum(T.square(w))
        grads = T.backward(loss, tape)
        np.testing.assert_array_equal(w.grad, grads[w])

    def test_broadcast_gradients(self, rng):
        a = T.Tensor(rng.normal(size=(2, 1, 3)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)

        def f():
            return T.tmean(T.square(a + b) * 0.5 + a * b)

        assert T.finite_diff_check(f, [a, b], step=1e-6) < 1e-6


class TestPrimitiveGradients:
    """Every primitive agrees with central finite differences on [-2, 2]."""

    @pytest.mark.parametrize("op", [T.tanh, T.sigmoid, T.softplus, T.exp, T.square])
    def test_unary(self, op, rng):
        x = T.Tensor(rng.uniform(-2, 2, size=(3, 4)), requires_grad=True)
        assert T.finite_diff_check(lambda: T.tmean(op(x)), [x], step=1e-5) < 1e-4

    def test_log_mean_exp_grad(self, rng):
        x = T.Tensor(rng.uniform(-2, 2, size=(3, 4)), requires_grad=True)
        assert T.finite_diff_check(lambda: T.tmean(T.log_mean_exp(x, axis=1)), [x], step=1e-5) < 1e-4

    def test_reshape_sum_mean(self, rng):
        x = T.Tensor(rng.uniform(-2, 2, size=(2, 6)), requires_grad=True)

        def f():
            r = T.reshape(x, (3, 4))
            return T.tmean(T.tsum(r, axis=1))

        assert T.finite_diff_check(f, [x], step=1e-5) < 1e-4


class TestFiniteDiffCheck:
    def test_quadratic_is_nearly_exact(self):
        w = T.Tensor(3.0, requires_grad=True)
        err = T.finite_diff_check(lambda: T.square(w), [w], step=1e-5)
        assert err < 1e-8

    def test_unused_parameter_has_zero_gradient_both_ways(self):
        w = T.Tensor(2.0, requires_grad=True)
        unused = T.Tensor(2.0, requires_grad=True)
        err = T.finite_diff_check(lambda: T.square(w), [unused, w], step=1e-5)
        assert err < 1e-8


class TestNaNPolicy:
    def test_no_silent_nan_on_extreme_inputs(self, rng):
        # Either the output is finite or a NumericError is raised; never NaN.
        for _ in range(50):
            x = T.Tensor(rng.uniform(-50, 50, size=(2, 3)))
            for op in (T.tanh, T.sigmoid, T.softplus, T.square):
                assert np.isfinite(op(x).values).all()
            try:
                out = T.exp(x)
            except T.NumericError:
                continue
            assert np.isfinite(out.values).all()
