import numpy as np
import pytest

import stdiff.autodiff as ad
from stdiff.autodiff import ParamArray, Tape, Tensor, grad_check
from stdiff.errors import ShapeError
from stdiff.sparse import SparseMatrix, sparsify

from conftest import random_sparse


def project(tape, out, weights):
    """Scalar readout sum(out * weights) as a taped op."""
    w = np.asarray(weights)
    loss = Tensor((out.value * w).sum())

    def backward():
        out.ensure_grad()
        out.grad += loss.grad * w

    tape.record(backward)
    return loss


def check_op(params, build, rng, tol=1e-4):
    """Finite-difference check: build(tape) -> output Tensor."""
    w = rng.standard_normal(build(Tape()).value.shape)

    def loss_fn(tape):
        return project(tape, build(tape), w)

    reports = grad_check(loss_fn, params, tol=tol, rng=rng)
    assert all(r.passed for r in reports), reports
    return reports


class TestLinear:
    def test_identity_theta(self, rng):
        x = Tensor(rng.random((4, 3)))
        y = ad.linear(Tape(), x, Tensor(np.eye(3)))
        assert np.array_equal(y.value, x.value)

    def test_zero_input_zero_grad(self, rng):
        theta = ParamArray("t", rng.random((3, 2)))
        tape = Tape()
        y = ad.linear(tape, Tensor(np.zeros((4, 3))), theta)
        loss = project(tape, y, np.ones(y.value.shape))
        tape.backward(loss)
        assert np.array_equal(y.value, np.zeros((4, 2)))
        assert np.array_equal(theta.grad, np.zeros((3, 2)))

    def test_finite_differences(self, rng):
        for _ in range(100):
            x = ParamArray("x", rng.standard_normal((4, 3)))
            theta = ParamArray("theta", rng.standard_normal((3, 2)))
            check_op([x, theta], lambda tape: ad.linear(tape, x, theta), rng)

    def test_batched_leading_axes(self, rng):
        x = ParamArray("x", rng.standard_normal((2, 3, 4, 3)))
        theta = ParamArray("theta", rng.standard_normal((3, 2)))
        check_op([x, theta], lambda tape: ad.linear(tape, x, theta), rng)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ad.linear(Tape(), Tensor(rng.random((2, 3))), Tensor(rng.random((4, 2))))


class TestSpmmDiff:
    def test_identity_passthrough(self, rng):
        x = ParamArray("x", rng.standard_normal((5, 2)))
        tape = Tape()
        y = ad.spmm_diff(tape, SparseMatrix.identity(5), x)
        loss = project(tape, y, np.ones(y.value.shape))
        tape.backward(loss)
        assert np.array_equal(y.value, x.value)
        assert np.array_equal(x.grad, np.ones((5, 2)))

    def test_shift_semantics(self, rng):
        shift = sparsify([[0, 1, 0], [0, 0, 1], [0, 0, 0]])
        x = Tensor(rng.random((3, 2)))
        y = ad.spmm_diff(Tape(), shift, x)
        assert np.array_equal(y.value[:2], x.value[1:])
        assert np.array_equal(y.value[2], np.zeros(2))

    def test_finite_differences(self, rng):
        for _ in range(100):
            p = random_sparse(rng, 5, 5)
            x = ParamArray("x", rng.standard_normal((5, 3)))
            check_op([x], lambda tape: ad.spmm_diff(tape, p, x), rng)


class TestLayerNorm:
    def make(self, rng, d):
        return (ParamArray("scale", rng.standard_normal(d) + 1.0),
                ParamArray("shift", rng.standard_normal(d)))

    def test_constant_row_maps_to_shift(self):
        scale = ParamArray("s", np.ones(4))
        shift = ParamArray("b", np.zeros(4))
        y = ad.layer_norm(Tape(), Tensor(np.full((2, 4), 3.0)), scale, shift)
        assert np.allclose(y.value, 0.0)

    def test_unit_variance_row(self):
        scale = ParamArray("s", np.ones(2))
        shift = ParamArray("b", np.zeros(2))
        y = ad.layer_norm(Tape(), Tensor(np.array([[1.0, -1.0]])), scale, shift,
                          eps=1e-300)
        assert np.allclose(y.value, [[1.0, -1.0]], atol=1e-12)

    def test_normalized_moments(self, rng):
        x = rng.standard_normal((20, 8)) * 3 + 5
        scale = ParamArray("s", np.ones(8))
        shift = ParamArray("b", np.zeros(8))
        y = ad.layer_norm(Tape(), Tensor(x), scale, shift, eps=1e-12).value
        assert np.max(np.abs(y.mean(axis=1))) < 1e-10
        assert np.max(np.abs((y ** 2).mean(axis=1) - 1.0)) < 1e-6

    def test_finite_differences(self, rng):
        for _ in range(100):
            d = int(rng.integers(2, 6))
            x = ParamArray("x", rng.standard_normal((3, d)))
            scale, shift = self.make(rng, d)
            check_op([x, scale, shift],
                     lambda tape: ad.layer_norm(tape, x, scale, shift), rng, tol=1e-4)


class TestTemporalCompress:
    def test_single_snapshot_ones_kernel(self, rng):
        x = Tensor(rng.random((1, 4, 3)))
        k = ParamArray("k", np.ones((1, 3)))
        y = ad.temporal_compress(Tape(), x, k)
        assert np.array_equal(y.value, x.value[0])

    def test_mean_kernel(self, rng):
        x = Tensor(rng.random((4, 2, 3)))
        k = ParamArray("k", np.full((4, 3), 0.25))
        y = ad.temporal_compress(Tape(), x, k)
        assert np.allclose(y.value, x.value.mean(axis=0), atol=1e-15)

    def test_kernel_slice_only_touched_rows_get_grad(self, rng):
        x = ParamArray("x", rng.standard_normal((2, 3, 2)))
        k = ParamArray("k", rng.standard_normal((5, 2)))  # extent 5, input uses 2
        tape = Tape()
        y = ad.temporal_compress(tape, x, k)
        loss = project(tape, y, np.ones(y.value.shape))
        tape.backward(loss)
        assert np.all(k.grad[2:] == 0.0)

    def test_finite_differences(self, rng):
        for _ in range(100):
            m, n, d = 3, 2, 2
            x = ParamArray("x", rng.standard_normal((m, n, d)))
            k = ParamArray("k", rng.standard_normal((m, d)))
            check_op([x, k], lambda tape: ad.temporal_compress(tape, x, k), rng)


class TestConcatFeatures:
    def test_single_part_identity(self, rng):
        x = Tensor(rng.random((3, 2)))
        assert np.array_equal(ad.concat_features(Tape(), [x]).value, x.value)

    def test_two_scalars(self):
        y = ad.concat_features(Tape(), [Tensor([[1.0]]), Tensor([[2.0]])])
        assert np.array_equal(y.value, [[1.0, 2.0]])

    def test_backward_round_trip(self, rng):
        parts = [ParamArray(f"p{i}", rng.standard_normal((3, 2))) for i in range(3)]
        tape = Tape()
        out = ad.concat_features(tape, parts)
        g = rng.standard_normal(out.value.shape)
        loss = project(tape, out, g)
        tape.backward(loss)
        for i, p in enumerate(parts):
            assert np.array_equal(p.grad, g[:, 2 * i:2 * i + 2])

    def test_finite_differences(self, rng):
        parts = [ParamArray(f"p{i}", rng.standard_normal((2, 3))) for i in range(2)]
        check_op(parts, lambda tape: ad.concat_features(tape, parts), rng)


class TestMlpDecode:
    def make_params(self, rng, d, hidden, horizon, d_out):
        return (ParamArray("w1", rng.standard_normal((d, hidden)) * 0.5),
                ParamArray("b1", rng.standard_normal(hidden) * 0.1),
                ParamArray("w2", rng.standard_normal((hidden, horizon * d_out)) * 0.5),
                ParamArray("b2", rng.standard_normal(horizon * d_out) * 0.1))

    def test_zero_weights_zero_output(self, rng):
        x = Tensor(rng.random((4, 3)))
        zeros = [ParamArray(n, np.zeros(s)) for n, s in
                 [("w1", (3, 5)), ("b1", 5), ("w2", (5, 4)), ("b2", 4)]]
        y = ad.mlp_decode(Tape(), x, *zeros, horizon=2, d_out=2)
        assert np.array_equal(y.value, np.zeros((2, 4, 2)))

    def test_output_layout(self, rng):
        # H=1, d_out=d, identity second layer after a pass-through first layer
        d = 3
        w1 = ParamArray("w1", np.eye(d))
        b1 = ParamArray("b1", np.zeros(d))
        w2 = ParamArray("w2", np.eye(d))
        b2 = ParamArray("b2", np.zeros(d))
        x = np.abs(rng.random((4, d)))  # positive: relu transparent
        y = ad.mlp_decode(Tape(), Tensor(x), w1, b1, w2, b2, horizon=1, d_out=d)
        assert np.array_equal(y.value[0], x)

    def test_finite_differences(self, rng):
        for _ in range(30):
            x = ParamArray("x", rng.standard_normal((3, 4)))
            params = self.make_params(rng, 4, 5, 2, 2)
            check_op([x, *params],
                     lambda tape: ad.mlp_decode(tape, x, *params, horizon=2, d_out=2),
                     rng, tol=1e-3)  # relu kinks make FD noisier


class TestTapeDeterminism:
    def test_replay_bit_identical(self, rng):
        p = random_sparse(rng, 6, 6)
        x = ParamArray("x", rng.standard_normal((6, 4)))
        theta = ParamArray("t", rng.standard_normal((4, 4)))
        grads = []
        for _ in range(2):
            x.zero_grad()
            theta.zero_grad()
            tape = Tape()
            y = ad.linear(tape, ad.spmm_diff(tape, p, x), theta)
            loss = project(tape, y, np.ones(y.value.shape))
            tape.backward(loss)
            grads.append((x.grad.copy(), theta.grad.copy()))
        assert np.array_equal(grads[0][0], grads[1][0])
        assert np.array_equal(grads[0][1], grads[1][1])


class TestGradCheckHarness:
    def test_quadratic(self):
        theta = ParamArray("theta", np.array([3.0]).reshape(1, 1))

        def loss_fn(tape):
            sq = ad.linear(tape, theta, theta)
            return project(tape, sq, np.ones((1, 1)))

        (report,) = grad_check(loss_fn, [theta], h=1e-5)
        assert report.passed
        tape = Tape()
        theta.zero_grad()
        loss = loss_fn(tape)
        tape.backward(loss)
        assert theta.grad[0, 0] == pytest.approx(6.0, abs=1e-9)

    def test_linear_exact(self, rng):
        theta = ParamArray("theta", rng.standard_normal((3, 1)))
        c = rng.standard_normal((1, 3))

        def loss_fn(tape):
            return project(tape, ad.linear(tape, Tensor(c), theta), np.ones((1, 1)))

        (report,) = grad_check(loss_fn, [theta], h=1e-5)
        assert report.passed and report.max_rel_err < 1e-9

    def test_detects_wrong_backward(self, rng):
        theta = ParamArray("theta", rng.standard_normal((2, 2)))

        def loss_fn(tape):
            out = Tensor((theta.value ** 2).sum())

            def backward():
                theta.ensure_grad()
                theta.grad += out.grad * 3.0 * theta.value  # deliberately wrong

            tape.record(backward)
            return out

        (report,) = grad_check(loss_fn, [theta])
        assert not report.passed
