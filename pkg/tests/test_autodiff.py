"""Tests for the reverse-mode tape: op values, gradients, Adam, grad_check."""

import math

import numpy as np
import pytest

from modalrec import autodiff as ad
from modalrec.errors import ConfigError, NumericError, ShapeError


def fd_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 4))
        out = ad.matmul(ad.Tensor(a), ad.Tensor(np.eye(4)))
        np.testing.assert_allclose(out.data, a, atol=1e-12)

    def test_hand_product(self):
        out = ad.matmul(ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0], [4.0]]))
        np.testing.assert_allclose(out.data, [[11.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))

    def test_rejects_1d(self):
        with pytest.raises(ShapeError):
            ad.matmul(ad.Tensor(np.zeros(3)), ad.Tensor(np.zeros((3, 2))))

    def test_grad_matches_finite_difference(self):
        rng = np.random.default_rng(1)
        a = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = ad.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        loss = ad.sum_(ad.matmul(a, b))
        ad.backward(loss)
        ga = fd_grad(lambda x: float((x @ b.data).sum()), a.data.copy())
        gb = fd_grad(lambda x: float((a.data @ x).sum()), b.data.copy())
        np.testing.assert_allclose(a.grad, ga, rtol=1e-4, atol=1e-7)
        np.testing.assert_allclose(b.grad, gb, rtol=1e-4, atol=1e-7)

    def test_batched_broadcast_grad(self):
        rng = np.random.default_rng(2)
        a = ad.Tensor(rng.normal(size=(5, 3, 4)), requires_grad=True)
        b = ad.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        loss = ad.sum_(ad.mul(ad.matmul(a, b), ad.Tensor(rng.normal(size=(5, 3, 2)))))
        ad.backward(loss)
        assert a.grad.shape == (5, 3, 4)
        assert b.grad.shape == (4, 2)
        report = ad.grad_check(
            lambda: ad.sum_(ad.matmul(a, b)), {"a": a, "b": b}, h=1e-5)
        assert report.ok(1e-4), report


class TestSoftmax:
    def test_uniform(self):
        out = ad.softmax(ad.Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-12)

    def test_two_class_value(self):
        # softmax((0, ln 3)) = (1/4, 3/4)
        out = ad.softmax(ad.Tensor([0.0, math.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=7)
        a = ad.softmax(ad.Tensor(x)).data
        b = ad.softmax(ad.Tensor(x + 123.4)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_simplex_property(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            x = rng.normal(scale=10.0, size=rng.integers(1, 9))
            y = ad.softmax(ad.Tensor(x)).data
            assert np.all(y >= 0)
            assert abs(y.sum() - 1.0) < 1e-12

    def test_large_logits_stable(self):
        y = ad.softmax(ad.Tensor([1000.0, 0.0])).data
        np.testing.assert_allclose(y, [1.0, 0.0], atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            ad.softmax(ad.Tensor([np.nan, 0.0]))

    def test_grad(self):
        rng = np.random.default_rng(5)
        x = ad.Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        w = rng.normal(size=(2, 5))
        report = ad.grad_check(
            lambda: ad.sum_(ad.mul(ad.softmax(x), ad.Tensor(w))), {"x": x})
        assert report.ok(1e-4), report


class TestCrossEntropy:
    def test_uniform_four_class(self):
        loss = ad.cross_entropy(ad.Tensor([0.0, 0.0, 0.0, 0.0]), 0)
        np.testing.assert_allclose(loss.item(), math.log(4.0), atol=1e-12)

    def test_peaked_logits(self):
        # -log softmax_0 of (10, 0, 0) = log(1 + 2 e^-10)
        loss = ad.cross_entropy(ad.Tensor([10.0, 0.0, 0.0]), 0)
        np.testing.assert_allclose(loss.item(), math.log(1 + 2 * math.exp(-10)),
                                   atol=1e-15)

    def test_nonnegative(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            n = int(rng.integers(1, 10))
            x = rng.normal(scale=5.0, size=n)
            t = int(rng.integers(0, n))
            assert ad.cross_entropy(ad.Tensor(x), t).item() >= 0.0

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            ad.cross_entropy(ad.Tensor([0.0, 1.0]), 2)

    def test_grad(self):
        rng = np.random.default_rng(7)
        x = ad.Tensor(rng.normal(size=6), requires_grad=True)
        report = ad.grad_check(lambda: ad.cross_entropy(x, 2), {"x": x})
        assert report.ok(1e-4), report


class TestShapeOps:
    def test_gather_scatter_roundtrip(self):
        rng = np.random.default_rng(8)
        v = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        placed = ad.scatter_rows(v, [5, 1, 3], n_rows=7)
        back = ad.gather_rows(placed, [5, 1, 3])
        np.testing.assert_allclose(back.data, v.data)
        w = ad.Tensor(rng.normal(size=(4, 4)))
        report = ad.grad_check(
            lambda: ad.sum_(ad.mul(ad.gather_rows(ad.scatter_rows(v, [5, 1, 3], 7),
                                                  [5, 1, 3, 1]),
                                   w)),
            {"v": v})
        assert report.ok(1e-4), report

    def test_scatter_duplicate_rows_accumulate(self):
        v = ad.Tensor(np.array([[1.0, 2.0], [10.0, 20.0]]), requires_grad=True)
        placed = ad.scatter_rows(v, [1, 1], n_rows=3)
        np.testing.assert_allclose(placed.data,
                                   [[0.0, 0.0], [11.0, 22.0], [0.0, 0.0]])
        w = ad.Tensor(np.array([[0.0, 0.0], [3.0, 5.0], [0.0, 0.0]]))
        ad.backward(ad.sum_(ad.mul(placed, w)))
        np.testing.assert_allclose(v.grad, [[3.0, 5.0], [3.0, 5.0]])

    def test_take_pairs(self):
        a = ad.Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        out = ad.take_pairs(a, [0, 2], [1, 3])
        np.testing.assert_allclose(out.data, [1.0, 11.0])
        ad.backward(ad.sum_(out))
        expected = np.zeros((3, 4))
        expected[0, 1] = expected[2, 3] = 1.0
        np.testing.assert_allclose(a.grad, expected)

    def test_concat_reshape_swap_grads(self):
        rng = np.random.default_rng(9)
        a = ad.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = ad.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        w = rng.normal(size=(2, 5))

        def f():
            cat = ad.concat([a, b], axis=1)
            return ad.sum_(ad.mul(ad.swapaxes(ad.reshape(cat, (5, 2)), 0, 1),
                                  ad.Tensor(w)))

        report = ad.grad_check(f, {"a": a, "b": b})
        assert report.ok(1e-4), report

    def test_logsumexp_value_and_grad(self):
        x = ad.Tensor([[0.0, math.log(3.0)]], requires_grad=True)
        out = ad.logsumexp(x)
        np.testing.assert_allclose(out.data, [math.log(4.0)], atol=1e-12)
        report = ad.grad_check(lambda: ad.sum_(ad.logsumexp(x)), {"x": x})
        assert report.ok(1e-4), report

    def test_layernorm_value_and_grad(self):
        rng = np.random.default_rng(10)
        x = ad.Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        gamma = ad.Tensor(rng.normal(size=6), requires_grad=True)
        beta = ad.Tensor(rng.normal(size=6), requires_grad=True)
        out = ad.layernorm(x, gamma, beta)
        normed = (out.data - beta.data) / gamma.data
        np.testing.assert_allclose(normed.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(normed.std(axis=-1), 1.0, atol=1e-4)
        w = rng.normal(size=(3, 6))
        report = ad.grad_check(
            lambda: ad.sum_(ad.mul(ad.layernorm(x, gamma, beta), ad.Tensor(w))),
            {"x": x, "gamma": gamma, "beta": beta})
        assert report.ok(1e-4), report


class TestBackward:
    def test_requires_scalar(self):
        x = ad.Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ShapeError):
            ad.backward(ad.mul(x, x))

    def test_shared_subexpression_accumulates(self):
        x = ad.Tensor([2.0], requires_grad=True)
        y = ad.mul(x, x)  # d/dx x^2 = 2x
        ad.backward(ad.sum_(y))
        np.testing.assert_allclose(x.grad, [4.0])

    def test_frozen_leaf_gets_no_grad(self):
        x = ad.Tensor([1.0], requires_grad=True)
        frozen = ad.Tensor([2.0], requires_grad=False)
        ad.backward(ad.sum_(ad.mul(x, frozen)))
        assert frozen.grad is None
        np.testing.assert_allclose(x.grad, [2.0])


class TestAdam:
    def test_first_step_value(self):
        # one step from 0 with g=2, lr=0.1: -lr * g/|g| scale, eps-corrected
        p = ad.Tensor([0.0], requires_grad=True)
        p.grad = np.array([2.0])
        state = ad.AdamState(learning_rate=0.1)
        ad.adam_step({"p": p}, state)
        np.testing.assert_allclose(p.data, [-0.0999999995], atol=1e-12)

    def test_zero_grad_no_motion(self):
        p = ad.Tensor([1.0, -2.0], requires_grad=True)
        state = ad.AdamState(learning_rate=0.1)
        ad.adam_step({"p": p}, state)  # grad is None -> zero
        np.testing.assert_allclose(p.data, [1.0, -2.0])
        assert state.t == 1

    def test_bitwise_determinism(self):
        def run():
            rng = np.random.default_rng(11)
            p = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            state = ad.AdamState(learning_rate=0.01)
            for _ in range(5):
                p.grad = rng.normal(size=(4, 3))
                ad.adam_step({"p": p}, state)
            return p.data.copy(), state.m["p"].copy(), state.v["p"].copy()

        a, b = run(), run()
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_grad_shape_mismatch(self):
        p = ad.Tensor(np.zeros((2, 2)), requires_grad=True)
        p.grad = np.zeros(3)
        with pytest.raises(ShapeError):
            ad.adam_step({"p": p}, ad.AdamState())


class TestGradCheck:
    def test_quadratic_exact(self):
        # f(x) = x^2 at x=3: analytic 6; h = 2^-10 makes the central
        # difference exact in binary floating point.
        x = ad.Tensor([3.0], requires_grad=True)
        report = ad.grad_check(lambda: ad.sum_(ad.mul(x, x)), {"x": x}, h=2.0 ** -10)
        assert report.max_rel_err == 0.0
        assert report.n_checked == 1

    def test_constant_function(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        report = ad.grad_check(lambda: ad.sum_(ad.mul(x, ad.Tensor([0.0, 0.0]))),
                               {"x": x})
        assert report.max_rel_err == 0.0

    def test_detects_wrong_gradient(self):
        # A deliberately broken backward: use a stale grad by scaling the
        # loss without the tape seeing it.
        x = ad.Tensor([1.5], requires_grad=True)
        calls = {"n": 0}

        def f():
            calls["n"] += 1
            t = ad.mul(x, x)
            if calls["n"] == 1:
                return ad.sum_(t)  # analytic grad of x^2
            return ad.sum_(ad.scale(t, 2.0))  # numeric sees 2x^2

        report = ad.grad_check(f, {"x": x})
        assert not report.ok(1e-4)

    def test_coordinate_subsample(self):
        rng = np.random.default_rng(12)
        x = ad.Tensor(rng.normal(size=100), requires_grad=True)
        w = ad.Tensor(rng.normal(size=100))
        report = ad.grad_check(lambda: ad.sum_(ad.mul(x, w)), {"x": x},
                               max_coords_per_tensor=7,
                               rng=np.random.default_rng(0))
        assert report.n_checked == 7
        assert report.ok(1e-4)

    def test_bad_step_size(self):
        x = ad.Tensor([1.0], requires_grad=True)
        with pytest.raises(ConfigError):
            ad.grad_check(lambda: ad.sum_(x), {"x": x}, h=0.0)
