import numpy as np
import pytest

from conftest import finite_diff
from enmloc import autodiff as ad
from enmloc.autodiff import AdamState, Tensor


class TestAffine:
    def test_identity(self):
        W = Tensor(np.eye(2), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        y = ad.affine_apply(W, b, Tensor([3.0, 4.0]))
        assert np.allclose(y.values, [3, 4])

    def test_zero_weights(self):
        W = Tensor(np.zeros((2, 3)), requires_grad=True)
        b = Tensor([1.0, 2.0], requires_grad=True)
        y = ad.affine_apply(W, b, Tensor([9.0, -9.0, 1.0]))
        assert np.allclose(y.values, [1, 2])

    def test_hand_arithmetic(self):
        W = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = Tensor([0.0, 0.0], requires_grad=True)
        y = ad.affine_apply(W, b, Tensor([1.0, 1.0]))
        assert np.allclose(y.values, [3, 7])

    def test_shape_mismatch(self):
        W = Tensor(np.zeros((2, 3)), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(ad.ShapeError):
            ad.affine_apply(W, b, Tensor([1.0, 2.0]))
        with pytest.raises(ad.ShapeError):
            ad.affine_apply(W, Tensor(np.zeros(3)), Tensor(np.zeros(3)))


class TestActivations:
    def test_relu(self):
        y = ad.activation_apply("relu", Tensor([-1.0, 0.0, 2.0]))
        assert np.allclose(y.values, [0, 0, 2])

    def test_sigmoid_zero(self):
        assert ad.activation_apply("sigmoid", Tensor(0.0)).values == 0.5

    def test_sigmoid_symmetry(self):
        x = np.random.default_rng(0).normal(0, 3, 100)
        s1 = ad.sigmoid(Tensor(x)).values
        s2 = ad.sigmoid(Tensor(-x)).values
        assert np.all(np.abs(s1 + s2 - 1) <= 1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ad.activation_apply("tanh", Tensor(0.0))


class TestConcat:
    def test_order_preserved(self):
        out = ad.concat_apply(Tensor([1.0, 2.0]), Tensor([3.0]))
        assert np.allclose(out.values, [1, 2, 3])

    def test_empty_right(self):
        out = ad.concat_apply(Tensor([1.0, 2.0]), Tensor(np.zeros(0)))
        assert np.allclose(out.values, [1, 2])

    def test_backward_splits_gradient(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0], requires_grad=True)
        out = ad.tsum(ad.concat_apply(a, b))
        ad.backward(out)
        assert np.allclose(a.grad, [1, 1])
        assert np.allclose(b.grad, [1])


class TestBackward:
    def test_relu_chain_rule(self):
        w = Tensor(1.0, requires_grad=True)
        b = Tensor(0.0, requires_grad=True)
        x = Tensor(2.0, requires_grad=True)
        y = ad.relu(ad.add(ad.mul(w, x), b))
        ad.backward(y)
        assert w.grad == 2.0 and b.grad == 1.0 and x.grad == 1.0

    def test_dead_relu(self):
        w = Tensor(1.0, requires_grad=True)
        b = Tensor(0.0, requires_grad=True)
        x = Tensor(-2.0, requires_grad=True)
        y = ad.relu(ad.add(ad.mul(w, x), b))
        ad.backward(y)
        assert w.grad == 0.0 and b.grad == 0.0 and x.grad == 0.0

    def test_two_layer_net_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        W1 = Tensor(rng.normal(0, 1, (4, 3)), requires_grad=True)
        b1 = Tensor(rng.normal(0, 1, 4), requires_grad=True)
        W2 = Tensor(rng.normal(0, 1, (1, 4)), requires_grad=True)
        b2 = Tensor(rng.normal(0, 1, 1), requires_grad=True)
        x = rng.normal(0, 1, 3)

        def forward():
            h = ad.relu(ad.affine_apply(W1, b1, Tensor(x)))
            return ad.affine_apply(W2, b2, h)

        out = forward()
        ad.backward(out)
        for p in (W1, b1, W2, b2):
            fd = finite_diff(lambda: float(forward().values[0]), p.values)
            rel = np.abs(p.grad - fd) / np.maximum(np.maximum(np.abs(fd), np.abs(p.grad)), 1e-8)
            assert np.max(rel) <= 1e-4

    def test_backward_is_linear_in_seed(self):
        rng = np.random.default_rng(8)
        W = Tensor(rng.normal(0, 1, (2, 2)), requires_grad=True)
        b = Tensor(rng.normal(0, 1, 2), requires_grad=True)
        x = rng.normal(0, 1, 2)

        def grads(seed):
            W.zero_grad(), b.zero_grad()
            out = ad.tsum(ad.relu(ad.affine_apply(W, b, Tensor(x))))
            ad.backward(out, seed)
            return W.grad.copy(), b.grad.copy()

        g1W, g1b = grads(1.0)
        g2W, g2b = grads(2.0)
        assert np.array_equal(g2W, 2 * g1W)
        assert np.array_equal(g2b, 2 * g1b)

    def test_consumed_tape_raises(self):
        w = Tensor(1.0, requires_grad=True)
        y = ad.mul(w, 2.0)
        ad.backward(y)
        with pytest.raises(ad.TapeConsumedError):
            ad.backward(y)


class TestAdam:
    def test_zero_grads_leave_params(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        state = AdamState.for_params([p], lr=0.001)
        ad.adam_step([p], state)
        assert np.allclose(p.values, [1, -2])
        assert state.step_count == 1

    def test_first_step_magnitude(self):
        p = Tensor(0.0, requires_grad=True)
        p.grad = np.asarray(1.0)
        state = AdamState.for_params([p], lr=0.001)
        ad.adam_step([p], state)
        assert float(p.values) == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)

    def test_constant_gradient_asymptote(self):
        p = Tensor(0.0, requires_grad=True)
        state = AdamState.for_params([p], lr=0.001)
        prev = 0.0
        for _ in range(2000):
            p.grad = np.asarray(3.0)
            before = float(p.values)
            ad.adam_step([p], state)
            prev = before - float(p.values)
        assert prev == pytest.approx(0.001, rel=1e-3)

    def test_deterministic(self):
        def run():
            p = Tensor([0.5, -0.5], requires_grad=True)
            state = AdamState.for_params([p], lr=0.01)
            for k in range(10):
                p.grad = np.array([0.1 * k, -0.2])
                ad.adam_step([p], state)
            return p.values.copy()

        assert np.array_equal(run(), run())


class TestParamInit:
    def test_constant_zero(self):
        p = ad.param_init((3, 2), np.random.default_rng(0), scheme="constant")
        assert np.all(p.values == 0)
        assert p.requires_grad and p.grad.shape == (3, 2)

    def test_seed_determinism(self):
        a = ad.param_init((4, 4), np.random.default_rng(11))
        b = ad.param_init((4, 4), np.random.default_rng(11))
        assert np.array_equal(a.values, b.values)

    def test_fan_in_bound(self):
        p = ad.param_init((100, 4), np.random.default_rng(1))
        assert np.all(np.abs(p.values) <= 0.5)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            ad.param_init((2,), np.random.default_rng(0), scheme="orthogonal")
