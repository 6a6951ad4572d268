import math

import numpy as np
import pytest

from albumgen import tensor as T
from albumgen.rng import make_rng

from conftest import check_gradients, finite_difference, relative_grad_error


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop reference product, no BLAS."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(k):
                acc += float(a[i, l]) * float(b[l, j])
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = T.tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = T.tensor(np.eye(2))
        assert np.array_equal((a @ eye).numpy(), a.numpy())

    def test_orthogonal_rows(self):
        out = T.tensor([[1.0, 0.0]]) @ T.tensor([[0.0], [1.0]])
        assert out.numpy().tolist() == [[0.0]]

    def test_against_triple_loop_oracle(self):
        rng = make_rng(11)
        a = rng.standard_normal((4, 3)).astype(np.float32)
        b = rng.standard_normal((3, 5)).astype(np.float32)
        got = (T.tensor(a) @ T.tensor(b)).numpy()
        want = naive_matmul(a, b)
        assert np.max(np.abs(got - want) / (np.abs(want) + 1e-6)) <= 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.tensor(np.zeros((2, 3))) @ T.tensor(np.zeros((4, 2)))

    def test_batched_broadcast(self):
        rng = make_rng(12)
        a = rng.standard_normal((3, 4, 5)).astype(np.float32)
        w = rng.standard_normal((5, 2)).astype(np.float32)
        out = T.tensor(a) @ T.tensor(w)
        assert out.shape == (3, 4, 2)
        np.testing.assert_allclose(out.numpy(), a @ w, rtol=1e-6)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(T.tensor([0.0, 0.0]), axis=0).numpy()
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_shift_invariance_no_overflow(self):
        out = T.softmax(T.tensor([1000.0, 1000.0]), axis=0).numpy()
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_high_precision_value(self):
        # exp(1)/(1+exp(1)), 1/(1+exp(1)) evaluated at float64 then frozen
        out = T.softmax(T.tensor([1.0, 0.0]), axis=0).numpy()
        np.testing.assert_allclose(out, [0.7310585786300049, 0.2689414213699951],
                                   atol=1e-6)

    def test_rows_sum_to_one(self):
        rng = make_rng(13)
        x = rng.standard_normal((6, 9)).astype(np.float32) * 10
        out = T.softmax(T.tensor(x), axis=1).numpy()
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_invalid_axis(self):
        with pytest.raises(ValueError):
            T.softmax(T.tensor([1.0, 2.0]), axis=3)


class TestBackward:
    def test_square_at_three(self):
        x = T.parameter(np.array(3.0))
        loss = x * x
        T.backward(loss)
        assert x.grad == pytest.approx(6.0)

    def test_sum_of_softmax_has_zero_gradient(self):
        x = T.parameter(np.array([0.3, -1.2, 2.0], dtype=np.float32))
        loss = T.sum_(T.softmax(x, axis=0))
        T.backward(loss)
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-6)

    def test_non_scalar_loss_rejected(self):
        x = T.parameter(np.ones(3, dtype=np.float32))
        with pytest.raises(ValueError):
            T.backward(x * x)

    def test_disconnected_tensor_gets_no_gradient(self):
        x = T.parameter(np.array(2.0))
        y = T.parameter(np.array(5.0))
        T.backward(x * x)
        assert y.grad is None  # zero by convention

    def test_gradient_accumulates(self):
        x = T.parameter(np.array(3.0))
        T.backward(x * x)
        T.backward(x * x)
        assert x.grad == pytest.approx(12.0)

    def test_diamond_graph_visits_once(self):
        x = T.parameter(np.array(2.0))
        y = x * x          # 4
        z = y + y          # shared node used twice
        T.backward(z)
        assert x.grad == pytest.approx(8.0)

    def test_gradient_map_returned(self):
        x = T.parameter(np.array([1.0, 2.0], dtype=np.float32))
        leaf_map = T.backward(T.sum_(x * x))
        assert x in leaf_map
        np.testing.assert_allclose(leaf_map[x], [2.0, 4.0])


class TestFiniteDifferenceSuite:
    """Every differentiable op vs the central-difference oracle."""

    def _p(self, rng, shape, scale=1.0):
        return T.parameter((rng.standard_normal(shape) * scale).astype(np.float32))

    def test_elementwise_and_broadcast(self):
        rng = make_rng(21)
        a = self._p(rng, (3, 4))
        b = self._p(rng, (4,))
        check_gradients(lambda: T.sum_(T.silu(a * b + a - b) * a), {"a": a, "b": b})

    def test_matmul_grad(self):
        rng = make_rng(22)
        a = self._p(rng, (3, 4))
        b = self._p(rng, (4, 2))
        check_gradients(lambda: T.sum_(T.square(a @ b)), {"a": a, "b": b})

    def test_batched_matmul_grad(self):
        rng = make_rng(23)
        a = self._p(rng, (2, 3, 4))
        w = self._p(rng, (4, 3))
        check_gradients(lambda: T.sum_(T.square(a @ w)), {"a": a, "w": w})

    def test_softmax_grad(self):
        rng = make_rng(24)
        x = self._p(rng, (4, 5))
        w = self._p(rng, (5,))
        check_gradients(lambda: T.sum_(T.softmax(x, axis=1) * w), {"x": x, "w": w})

    def test_log_softmax_grad(self):
        rng = make_rng(25)
        x = self._p(rng, (3, 6))
        c = T.tensor(rng.standard_normal((3, 6)).astype(np.float32))
        check_gradients(lambda: T.sum_(T.log_softmax(x, axis=-1) * c), {"x": x})

    def test_layer_norm_grad(self):
        rng = make_rng(26)
        x = self._p(rng, (4, 8))
        g = self._p(rng, (8,))
        b = self._p(rng, (8,))
        check_gradients(lambda: T.sum_(T.square(T.layer_norm(x, g, b))),
                        {"x": x, "g": g, "b": b})

    def test_reductions_reshape_permute_concat(self):
        rng = make_rng(27)
        a = self._p(rng, (2, 6))
        b = self._p(rng, (2, 6))

        def loss():
            c = T.concatenate([a, b], axis=1)          # (2, 12)
            c = T.permute(T.reshape(c, (2, 3, 4)), (1, 0, 2))
            return T.mean_(T.square(c)) + T.sum_(T.mean_(c, axis=2))

        check_gradients(loss, {"a": a, "b": b})

    def test_conv2d_grad_stride1(self):
        rng = make_rng(28)
        x = self._p(rng, (2, 3, 5, 5))
        w = self._p(rng, (4, 3, 3, 3), scale=0.5)
        b = self._p(rng, (4,))
        check_gradients(lambda: T.sum_(T.square(T.conv2d(x, w, b, stride=1, padding=1))),
                        {"x": x, "w": w, "b": b}, tol=2e-3)

    def test_conv2d_grad_stride2(self):
        rng = make_rng(29)
        x = self._p(rng, (1, 2, 6, 6))
        w = self._p(rng, (3, 2, 3, 3), scale=0.5)
        b = self._p(rng, (3,))
        check_gradients(lambda: T.sum_(T.square(T.conv2d(x, w, b, stride=2, padding=1))),
                        {"x": x, "w": w, "b": b}, tol=2e-3)

    def test_upsample_grad(self):
        rng = make_rng(30)
        x = self._p(rng, (1, 2, 3, 3))
        check_gradients(lambda: T.sum_(T.square(T.upsample_nearest(x, 2))), {"x": x})

    def test_gather_rows_grad(self):
        rng = make_rng(31)
        table = self._p(rng, (7, 4))
        ids = np.array([[0, 3, 3], [6, 1, 0]])
        check_gradients(lambda: T.sum_(T.square(T.gather_rows(table, ids))),
                        {"table": table})

    def test_where_mask_grad(self):
        rng = make_rng(32)
        a = self._p(rng, (4, 3))
        b = self._p(rng, (4, 3))
        mask = np.array([[True], [False], [True], [False]])
        check_gradients(lambda: T.sum_(T.square(T.where_mask(mask, a, b))),
                        {"a": a, "b": b})

    def test_random_small_tensors_sweep(self):
        # per-op property on fresh random <=64-element tensors, several seeds
        for seed in range(5):
            rng = make_rng(40 + seed)
            x = self._p(rng, (4, 8))
            w = self._p(rng, (8, 8))
            g = self._p(rng, (8,))
            b = self._p(rng, (8,))
            check_gradients(lambda: T.mean_(T.square(T.silu(x @ w))), {"x": x, "w": w})
            check_gradients(lambda: T.mean_(T.square(T.layer_norm(x, g, b))),
                            {"x": x, "g": g, "b": b})
            check_gradients(lambda: T.sum_(T.softmax(x, axis=-1) * b), {"x": x, "b": b})


class TestConv2dForward:
    def test_matches_scipy_correlate(self):
        from scipy.signal import correlate2d
        rng = make_rng(50)
        x = rng.standard_normal((1, 2, 6, 7)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        out = T.conv2d(T.tensor(x), T.tensor(w), stride=1, padding=1).numpy()
        for o in range(3):
            want = np.zeros((6, 7))
            for c in range(2):
                want += correlate2d(x[0, c], w[o, c], mode="same")
            np.testing.assert_allclose(out[0, o], want, rtol=1e-4, atol=1e-5)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            T.conv2d(T.tensor(np.zeros((1, 3, 4, 4))), T.tensor(np.zeros((2, 4, 3, 3))))

    def test_stride_two_shape(self):
        out = T.conv2d(T.tensor(np.zeros((2, 3, 8, 8))),
                       T.tensor(np.zeros((5, 3, 3, 3))), stride=2, padding=1)
        assert out.shape == (2, 5, 4, 4)


class TestDebugMode:
    def test_nan_detection_raises(self):
        x = T.tensor([1.0, 2.0])
        with pytest.raises(FloatingPointError):
            T.tensor([np.nan])
        bad = T.tensor([0.0])
        T.set_debug_checks(False)
        bignum = T.exp(T.tensor([200.0]))  # inf in float32
        T.set_debug_checks(True)
        with pytest.raises(FloatingPointError):
            bignum * x


class TestRandomness:
    def test_seeded_gaussian_bit_reproducible(self):
        a = T.gaussian((3, 4), make_rng(7, 1)).numpy()
        b = T.gaussian((3, 4), make_rng(7, 1)).numpy()
        assert a.tobytes() == b.tobytes()

    def test_streams_independent(self):
        a = T.gaussian((8,), make_rng(7, 1)).numpy()
        b = T.gaussian((8,), make_rng(7, 2)).numpy()
        assert not np.array_equal(a, b)


class TestModule:
    def test_hierarchical_names(self):
        class Leaf(T.Module):
            def __init__(self):
                self.w = T.parameter(np.zeros((2, 2), dtype=np.float32))

        class Net(T.Module):
            def __init__(self):
                self.emb = T.parameter(np.zeros(3, dtype=np.float32))
                self.blocks = [Leaf(), Leaf()]
                self.head = Leaf()

        names = set(Net().named_parameters())
        assert names == {"emb", "blocks0.w", "blocks1.w", "head.w"}

    def test_state_roundtrip(self):
        class Net(T.Module):
            def __init__(self):
                self.w = T.init_normal(make_rng(1), (3, 3))

        a, b = Net(), Net()
        b.w.data = np.zeros((3, 3), dtype=np.float32)
        b.load_state(a.state())
        assert np.array_equal(a.w.data, b.w.data)


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = T.parameter(np.array(2.0))
        with T.no_grad():
            y = x * x
        assert not y.requires_grad
