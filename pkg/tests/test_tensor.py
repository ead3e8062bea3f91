"""Tensor core: forward semantics against simple oracles, gradients against
central finite differences in float64."""
import numpy as np
import pytest

from conftest import gradcheck
from svkit import tensor as T
from svkit.tensor import BatchNormState, ConvParams, ShapeError, Tensor


def t64(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad,
                  dtype=np.float64)


# ---------------------------------------------------------------- conv2d
class TestConv2d:
    def test_all_ones_center(self):
        x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        k = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = T.conv2d(x, ConvParams(k, stride=(1, 1), padding=(1, 1)))
        assert out.data[0, 0, 1, 1] == pytest.approx(9.0)

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 1, 5, 7)).astype(np.float32))
        k = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        out = T.conv2d(x, ConvParams(k))
        np.testing.assert_allclose(out.data, x.data)

    def test_against_nested_loop_oracle(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        bias = rng.standard_normal(4).astype(np.float32)
        sh = sw = 2
        ph = pw = 1
        out = T.conv2d(Tensor(x), ConvParams(Tensor(k), Tensor(bias),
                                             stride=(sh, sw), padding=(ph, pw)))
        # direct quadruple-nested-loop cross-correlation
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        ho = (8 + 2 * ph - 3) // sh + 1
        wo = (8 + 2 * pw - 3) // sw + 1
        ref = np.zeros((2, 4, ho, wo))
        for b in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[b, :, i * sh:i * sh + 3, j * sw:j * sw + 3]
                        ref[b, o, i, j] = np.sum(patch * k[o]) + bias[o]
        np.testing.assert_allclose(out.data, ref, atol=1e-5)

    def test_same_padding_preserves_extent(self):
        rng = np.random.default_rng(1)
        for k in (1, 3, 5):
            x = Tensor(rng.standard_normal((1, 2, 9, 11)).astype(np.float32))
            kern = Tensor(rng.standard_normal((2, 2, k, k)).astype(np.float32))
            out = T.conv2d(x, ConvParams(kern, padding=((k - 1) // 2, (k - 1) // 2)))
            assert out.shape == x.shape

    def test_channel_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
        k = Tensor(np.zeros((2, 4, 3, 3), dtype=np.float32))
        with pytest.raises(ShapeError, match=r"\(1, 3, 4, 4\).*\(2, 4, 3, 3\)"):
            T.conv2d(x, ConvParams(k))

    def test_empty_output_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
        k = Tensor(np.zeros((1, 1, 3, 3), dtype=np.float32))
        with pytest.raises(ShapeError, match="empty"):
            T.conv2d(x, ConvParams(k))

    def test_determinism(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 10, 10)).astype(np.float32)
        k = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
        p = ConvParams(Tensor(k), stride=(2, 1), padding=(1, 1))
        a = T.conv2d(Tensor(x), p).data
        b = T.conv2d(Tensor(x), p).data
        assert np.array_equal(a, b)


# ------------------------------------------------------------- batchnorm
class TestBatchNorm:
    def test_constant_input_zeros(self):
        st = BatchNormState.create(2)
        x = Tensor(np.full((3, 2, 4, 4), 7.0, dtype=np.float32))
        out = T.batchnorm(x, st)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_beta_shift(self):
        st = BatchNormState.create(2)
        st.beta.data[:] = 5.0
        x = Tensor(np.full((3, 2, 4, 4), 2.0, dtype=np.float32))
        out = T.batchnorm(x, st)
        np.testing.assert_allclose(out.data, 5.0, atol=1e-6)

    def test_normalizes_statistics(self):
        rng = np.random.default_rng(3)
        st = BatchNormState.create(2)
        x = Tensor(rng.standard_normal((4, 2, 3, 3)).astype(np.float32) * 3 + 1)
        out = T.batchnorm(x, st).data
        for c in range(2):
            vals = out[:, c]
            assert abs(vals.mean()) < 1e-5
            assert abs(vals.var() - 1.0) < 1e-3

    def test_eval_mode_is_pure(self):
        st = BatchNormState.create(3)
        st.running_mean[:] = 0.5
        st.running_var[:] = 2.0
        st.training_mode = False
        rm, rv = st.running_mean.copy(), st.running_var.copy()
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32))
        a = T.batchnorm(x, st).data
        b = T.batchnorm(x, st).data
        assert np.array_equal(a, b)
        assert np.array_equal(st.running_mean, rm)
        assert np.array_equal(st.running_var, rv)

    def test_training_updates_running_stats(self):
        st = BatchNormState.create(1)
        x = Tensor(np.full((2, 1, 2, 2), 4.0, dtype=np.float32))
        T.batchnorm(x, st)
        assert st.running_mean[0] == pytest.approx(0.4)

    def test_nonfinite_running_var_rejected(self):
        st = BatchNormState.create(1)
        st.running_var[0] = np.nan
        st.training_mode = False
        x = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError, match="non-finite"):
            T.batchnorm(x, st)


# ------------------------------------------------------------ activations
class TestActivations:
    def test_odd_functions_at_origin(self):
        z = Tensor(np.zeros(3, dtype=np.float32))
        assert np.all(T.activation(z, "silu").data == 0)
        assert np.all(T.activation(z, "tanh").data == 0)

    def test_relu_definition(self):
        x = Tensor(np.array([-3.0, 2.5], dtype=np.float32))
        np.testing.assert_allclose(T.relu(x).data, [0.0, 2.5])

    def test_silu_formula_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(64).astype(np.float32)
        out = T.silu(Tensor(x)).data
        ref = x * (1.0 / (1.0 + np.exp(-x)))
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            T.activation(Tensor(np.zeros(1)), "gelu")


# ----------------------------------------------------------------- linear
class TestLinear:
    def test_identity(self):
        x = Tensor(np.array([[1.0, 2.0]], dtype=np.float32))
        w = Tensor(np.eye(2, dtype=np.float32))
        np.testing.assert_allclose(T.linear(x, w).data, x.data)

    def test_hand_arithmetic(self):
        x = Tensor(np.array([[1.0, 2.0]], dtype=np.float32))
        w = Tensor(np.array([[3.0, 4.0]], dtype=np.float32))
        b = Tensor(np.array([5.0], dtype=np.float32))
        np.testing.assert_allclose(T.linear(x, w, b).data, [[16.0]])

    def test_against_nested_loop_matmul(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((3, 5)).astype(np.float32)
        w = rng.standard_normal((7, 5)).astype(np.float32)
        out = T.linear(Tensor(x), Tensor(w)).data
        ref = np.zeros((3, 7))
        for i in range(3):
            for j in range(7):
                for k in range(5):
                    ref[i, j] += x[i, k] * w[j, k]
        np.testing.assert_allclose(out, ref, atol=1e-5)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# --------------------------------------------------------------- backward
class TestBackward:
    def test_sum_gives_ones(self):
        x = t64(np.random.default_rng(0).standard_normal((3, 4)))
        T.sum_(x).backward()
        np.testing.assert_allclose(x.grad, np.ones((3, 4)))

    def test_square_sum_gives_2x(self):
        x = t64(np.random.default_rng(1).standard_normal(6))
        T.sum_(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)

    def test_nonscalar_root_rejected(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            (x + x).backward()

    def test_repeated_backward_accumulates(self):
        x = t64(np.ones(3))
        out = T.sum_(x)
        out.backward()
        out.backward()
        np.testing.assert_allclose(x.grad, 2 * np.ones(3))

    def test_grad_reused_node(self):
        x = t64(np.array([2.0]))
        y = T.mul(x, x)
        out = T.sum_(T.add(y, y))
        out.backward()
        np.testing.assert_allclose(x.grad, [8.0])


# ------------------------------------------------- finite-difference suite
def _rand(rng, *shape):
    return rng.standard_normal(shape)


class TestGradientsVsFiniteDifferences:
    """Every differentiable op, 10 seeds, relative error < 1e-4."""

    def test_elementwise_binary(self):
        def case(rng):
            a = t64(_rand(rng, 3, 4))
            b = t64(np.abs(_rand(rng, 3, 4)) + 1.0)

            def fwd():
                return T.sum_(T.mul(T.div(T.add(a, b), b), T.sub(a, b)))
            return [a, b], fwd
        gradcheck(case)

    def test_broadcasting(self):
        def case(rng):
            a = t64(_rand(rng, 2, 3, 4))
            b = t64(_rand(rng, 1, 3, 1))

            def fwd():
                return T.sum_(T.mul(T.add(a, b), b))
            return [a, b], fwd
        gradcheck(case)

    def test_unary(self):
        def case(rng):
            a = t64(np.abs(_rand(rng, 3, 3)) + 0.5)

            def fwd():
                return T.sum_(T.add(T.log(a), T.mul(T.exp(T.neg(a)), T.sqrt(a))))
            return [a], fwd
        gradcheck(case)

    def test_activations(self):
        def case(rng):
            a = t64(_rand(rng, 4, 5))
            c = Tensor(_rand(rng, 4, 5), dtype=np.float64)

            def fwd():
                z = T.add(T.silu(a), T.add(T.tanh(a), T.sigmoid(a)))
                return T.sum_(T.mul(z, c))
            return [a], fwd
        gradcheck(case)

    def test_relu(self):
        def case(rng):
            vals = _rand(rng, 5, 5)
            vals = np.where(np.abs(vals) < 0.05, 0.5, vals)  # avoid the kink
            a = t64(vals)

            def fwd():
                return T.sum_(T.mul(T.relu(a), a))
            return [a], fwd
        gradcheck(case)

    def test_matmul_linear(self):
        def case(rng):
            x = t64(_rand(rng, 3, 5))
            w = t64(_rand(rng, 4, 5))
            b = t64(_rand(rng, 4))

            def fwd():
                out = T.linear(x, w, b)
                return T.sum_(T.mul(out, out))
            return [x, w, b], fwd
        gradcheck(case)

    @pytest.mark.parametrize("stride,pad", [((1, 1), (1, 1)), ((2, 2), (1, 1)),
                                            ((2, 1), (0, 1))])
    def test_conv2d(self, stride, pad):
        def case(rng):
            x = t64(_rand(rng, 2, 3, 6, 5))
            k = t64(_rand(rng, 4, 3, 3, 3) * 0.5)
            b = t64(_rand(rng, 4))

            def fwd():
                out = T.conv2d(x, ConvParams(k, b, stride=stride, padding=pad))
                return T.sum_(T.mul(out, out))
            return [x, k, b], fwd
        gradcheck(case, seeds=range(10))

    def test_conv2d_1x1(self):
        def case(rng):
            x = t64(_rand(rng, 2, 4, 5, 5))
            k = t64(_rand(rng, 3, 4, 1, 1))

            def fwd():
                out = T.conv2d(x, ConvParams(k, stride=(2, 2)))
                return T.sum_(T.mul(out, out))
            return [x, k], fwd
        gradcheck(case)

    def test_batchnorm_training(self):
        def case(rng):
            x = t64(_rand(rng, 3, 2, 4, 4))
            gamma = t64(1.0 + 0.1 * _rand(rng, 2))
            beta = t64(0.1 * _rand(rng, 2))

            def fwd():
                st = BatchNormState(gamma=gamma, beta=beta,
                                    running_mean=np.zeros(2),
                                    running_var=np.ones(2))
                out = T.batchnorm(x, st)
                return T.sum_(T.mul(out, out))
            return [x, gamma, beta], fwd
        gradcheck(case, tol=1e-4)

    def test_reductions_and_movement(self):
        def case(rng):
            a = t64(_rand(rng, 2, 3, 4))

            def fwd():
                m = T.mean(a, axis=(0, 2), keepdims=True)
                z = T.transpose(T.reshape(T.sub(a, m), (6, 4)))
                return T.sum_(T.mul(z, z))
            return [a], fwd
        gradcheck(case)

    def test_concat_slice(self):
        def case(rng):
            a = t64(_rand(rng, 2, 3))
            b = t64(_rand(rng, 2, 2))

            def fwd():
                c = T.concat([a, b], axis=1)
                left = c[:, :2]
                right = c[:, 2:]
                return T.sum_(T.mul(left, left)) + T.sum_(right)
            return [a, b], fwd
        gradcheck(case)

    def test_where_clamp(self):
        def case(rng):
            a = t64(_rand(rng, 4, 4) * 2)

            def fwd():
                mask = a.data > 0.3
                z = T.where(mask, T.mul(a, a), T.neg(a))
                return T.sum_(T.mul(z, T.clamp(a, -5.0, 5.0)))
            return [a], fwd
        gradcheck(case)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(123)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32),
                   requires_grad=True)
        k = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
                   requires_grad=True)
        out = T.conv2d(x, ConvParams(k, padding=(1, 1)))
        loss = T.sum_(T.mul(out, out))
        loss.backward()
        return loss.data.copy(), x.grad.copy(), k.grad.copy()

    a = run()
    b = run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)
