"""Autodiff engine checks against finite differences and closed forms."""

import numpy as np
import pytest

from gnnfp import autodiff as ad
from gradcheck import finite_difference_grads, max_relative_error


def run_loss(build):
    """Record build() on a fresh tape, backprop, return (value, params' grads)."""
    with ad.Tape():
        loss = build()
    ad.backward(loss)
    return loss


class TestPrimitiveForward:
    def test_relu_values_and_grads(self):
        x = ad.parameter([-1.0, 2.0])
        with ad.Tape():
            loss = ad.tsum(ad.relu(x))
        assert np.array_equal(loss.data, 2.0)
        ad.backward(loss)
        assert np.array_equal(x.grad, [0.0, 1.0])

    def test_reduce_mean_backprop(self):
        x = ad.parameter(np.arange(5.0))
        with ad.Tape():
            loss = ad.reduce_mean(x, axis=0)
        ad.backward(loss)
        assert np.allclose(x.grad, np.full(5, 0.2))

    def test_reduce_max_first_index_on_ties(self):
        x = ad.parameter([3.0, 3.0, 1.0])
        with ad.Tape():
            loss = ad.reduce_max(x, axis=0)
        ad.backward(loss)
        assert np.array_equal(x.grad, [1.0, 0.0, 0.0])

    def test_select_rows_repeated_indices_accumulate(self):
        x = ad.parameter(np.eye(3))
        idx = np.array([0, 0, 1])
        with ad.Tape():
            loss = ad.tsum(ad.select_rows(x, idx))
        ad.backward(loss)
        assert np.allclose(x.grad, np.array([[2, 2, 2], [1, 1, 1], [0, 0, 0]], dtype=float))

    def test_sum_all_ones_gradient(self):
        x = ad.parameter(np.random.default_rng(0).standard_normal((3, 4)))
        with ad.Tape():
            loss = ad.tsum(x)
        ad.backward(loss)
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_quadratic_form_gradient(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((4, 4))
        a = (a + a.T) / 2
        x = ad.parameter(rng.standard_normal(4))
        with ad.Tape():
            xs = ad.reshape(x, (1, 4))
            loss = ad.tsum(ad.elementwise_mul(ad.matmul(xs, ad.constant(a)), xs))
        ad.backward(loss)
        assert np.allclose(x.grad, 2 * a @ x.data, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = ad.parameter([1.0, 2.0])
        with ad.Tape():
            y = ad.relu(x)
        with pytest.raises(ad.NonScalarLoss):
            ad.backward(y)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ad.ShapeMismatch):
            ad.matmul(ad.parameter(np.ones((2, 3))), ad.parameter(np.ones((2, 3))))


class TestFiniteDifference:
    def test_relu_composite(self):
        rng = np.random.default_rng(2)
        w = ad.parameter(rng.standard_normal((3, 5)))
        x = ad.parameter(rng.standard_normal((4, 3)))

        def forward():
            return ad.tsum(ad.square(ad.relu(ad.matmul(x, w))))

        with ad.Tape():
            loss = forward()
        ad.backward(loss)
        fd = finite_difference_grads(lambda: float(forward().data), [w, x], step=1e-4)
        assert max_relative_error([w.grad, x.grad], fd) < 1e-5

    def test_everything_composite(self):
        # exercises concat, swapaxes, reshape, select, pooling, projection math
        rng = np.random.default_rng(3)
        w1 = ad.parameter(rng.standard_normal((6, 7)))
        w2 = ad.parameter(rng.standard_normal((7, 2)))
        x = ad.parameter(rng.standard_normal((5, 3)))
        mats = rng.standard_normal((5, 2, 2))
        mats = mats + np.swapaxes(mats, 1, 2)
        idx = np.array([0, 2, 3, 3, 1])

        def forward():
            h = ad.concat([x, ad.scale(x, 0.5)], axis=1)
            h = ad.relu(ad.matmul(h, w1))
            h = ad.select_rows(h, idx)
            pooled = ad.concat([
                ad.reshape(ad.reduce_max(h, axis=0), (1, 7)),
                ad.reshape(ad.reduce_mean(h, axis=0), (1, 7)),
            ], axis=0)
            z = ad.matmul(pooled, w2)
            z = ad.swapaxes(z, 0, 1)
            q = ad.batched_matvec(mats[:2, :, :], ad.reshape(z, (2, 2)))
            power = ad.tsum(ad.square(q))
            s = ad.tsqrt(ad.reciprocal(ad.clamp_min(power, 0.3)))
            return ad.tsum(ad.elementwise_mul(q, ad.reshape(s, (1, 1))))

        with ad.Tape():
            loss = forward()
        ad.backward(loss)
        fd = finite_difference_grads(lambda: float(forward().data), [w1, w2, x], step=1e-5)
        assert max_relative_error([w1.grad, w2.grad, x.grad], fd) < 1e-5

    def test_backward_deterministic(self):
        rng = np.random.default_rng(4)
        w = ad.parameter(rng.standard_normal((4, 4)))
        x = rng.standard_normal((6, 4))

        def once():
            ad.zero_grads([w])
            with ad.Tape():
                loss = ad.tsum(ad.square(ad.relu(ad.matmul(ad.constant(x), w))))
            ad.backward(loss)
            return w.grad.copy()

        g1, g2 = once(), once()
        assert np.array_equal(g1, g2)


class TestBatchNorm:
    def test_eval_identity_with_unit_stats(self):
        state = ad.BatchNormState(3)
        x = np.random.default_rng(5).standard_normal((4, 3))
        out = ad.batchnorm(ad.constant(x), ad.parameter(np.ones(3)),
                           ad.parameter(np.zeros(3)), state, training=False)
        assert np.allclose(out.data, x, rtol=1e-5, atol=1e-7)

    def test_training_normalizes(self):
        rng = np.random.default_rng(6)
        x = 100.0 * rng.standard_normal((64, 4))  # large variance so eps is negligible
        state = ad.BatchNormState(4)
        out = ad.batchnorm(ad.constant(x), ad.parameter(np.ones(4)),
                           ad.parameter(np.zeros(4)), state, training=True)
        assert np.abs(out.data.mean(axis=0)).max() < 1e-6
        assert np.abs(out.data.var(axis=0) - 1).max() < 1e-6

    def test_running_statistics_update(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((10, 2)) + 5.0
        state = ad.BatchNormState(2)
        ad.batchnorm(ad.constant(x), ad.parameter(np.ones(2)),
                     ad.parameter(np.zeros(2)), state, training=True)
        assert np.allclose(state.running_mean, 0.1 * x.mean(axis=0))
        assert np.allclose(state.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))

    def test_degenerate_batch(self):
        state = ad.BatchNormState(2)
        with pytest.raises(ad.DegenerateBatch):
            ad.batchnorm(ad.constant(np.ones((1, 2))), ad.parameter(np.ones(2)),
                         ad.parameter(np.zeros(2)), state, training=True)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradient_matches_finite_differences(self, training):
        rng = np.random.default_rng(8)
        x = ad.parameter(rng.standard_normal((8, 3)))
        gamma = ad.parameter(rng.standard_normal(3) + 1.0)
        beta = ad.parameter(rng.standard_normal(3))
        state = ad.BatchNormState(3)
        state.running_mean = rng.standard_normal(3)
        state.running_var = rng.random(3) + 0.5

        mix = ad.constant(rng.standard_normal((8, 3)))

        def forward():
            frozen = state.copy()  # keep running stats fixed across FD evals
            out = ad.batchnorm(x, gamma, beta, frozen, training=training)
            return ad.tsum(ad.square(ad.relu(ad.elementwise_mul(out, mix))))

        ad.zero_grads([x, gamma, beta])
        with ad.Tape():
            loss = forward()
        ad.backward(loss)
        fd = finite_difference_grads(lambda: float(forward().data), [x, gamma, beta])
        assert max_relative_error([x.grad, gamma.grad, beta.grad], fd) < 1e-4


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = ad.parameter(np.ones(5))
        assert ad.dropout(x, 0.4, training=False) is x

    def test_expectation_preserved(self):
        rng = ad.dropout_rng(1, 2, 3, 4)
        x = ad.constant(np.ones(100_000))
        out = ad.dropout(x, 0.3, training=True, rng=rng)
        kept = out.data > 0
        assert abs(out.data.mean() - 1.0) < 0.01
        assert abs((~kept).mean() - 0.3) < 0.01
        assert np.allclose(out.data[kept], 1.0 / 0.7)

    def test_counter_rng_reproducible(self):
        a = ad.dropout(ad.constant(np.ones(64)), 0.5, True, ad.dropout_rng(9, 0, 1, 2))
        b = ad.dropout(ad.constant(np.ones(64)), 0.5, True, ad.dropout_rng(9, 0, 1, 2))
        assert np.array_equal(a.data, b.data)
        c = ad.dropout(ad.constant(np.ones(64)), 0.5, True, ad.dropout_rng(9, 0, 1, 3))
        assert not np.array_equal(a.data, c.data)

    def test_gradient_uses_mask(self):
        rng = ad.dropout_rng(0, 0, 0, 0)
        x = ad.parameter(np.ones(32))
        with ad.Tape():
            out = ad.dropout(x, 0.25, training=True, rng=rng)
            loss = ad.tsum(out)
        ad.backward(loss)
        assert np.array_equal(x.grad, (out.data > 0) / 0.75)


class TestOptimizer:
    def test_zero_gradient_no_motion(self):
        p = ad.parameter([1.0, -2.0])
        p.grad = np.zeros(2)
        state = ad.OptimizerState()
        ad.optimizer_step([p], state)
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_constant_gradient_monotone(self):
        p = ad.parameter([0.0])
        state = ad.OptimizerState(lr=1e-2)
        prev = p.data.copy()
        for _ in range(50):
            p.grad = np.array([2.5])
            ad.optimizer_step([p], state)
            assert p.data[0] < prev[0]
            prev = p.data.copy()

    def test_quadratic_converges(self):
        p = ad.parameter([1.0])
        state = ad.OptimizerState(lr=1e-2)
        for _ in range(2000):
            p.grad = 2.0 * (p.data - 3.0)
            ad.optimizer_step([p], state)
        assert abs(p.data[0] - 3.0) < 1e-3

    def test_shape_mismatch(self):
        p = ad.parameter([1.0, 2.0])
        p.grad = np.zeros(3)
        with pytest.raises(ad.ShapeMismatch):
            ad.optimizer_step([p], ad.OptimizerState())
