import numpy as np
import pytest
from scipy.sparse.linalg import aslinearoperator

from greedyprecond.exceptions import InvalidInputError
from greedyprecond.linalg import op_norm_sq
from greedyprecond.objectives import (
    GaussianBlur,
    HuberTV,
    LeastSquares,
    diff_norm_sq,
    finite_gradient,
    forward_diff,
    forward_diff_adjoint,
    huber,
    smoothness_bound,
    stack,
)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def huber_tv_oracle(x, Ax, y, alpha, eps):
    # per-pixel loops, independent of the vectorised code
    m1, m2 = x.shape
    val = 0.5 * np.sum((Ax - y) ** 2)
    for i in range(m1):
        for j in range(m2):
            d1 = x[i + 1, j] - x[i, j] if i < m1 - 1 else 0.0
            d2 = x[i, j + 1] - x[i, j] if j < m2 - 1 else 0.0
            s = np.hypot(d1, d2)
            val += alpha * (s * s / (2 * eps) if s <= eps else s - eps / 2)
    return val


class TestLeastSquares:
    def test_examples(self):
        f = LeastSquares(np.eye(2), np.array([1.0, 2.0]))
        assert f.value(np.array([1.0, 2.0])) == 0
        np.testing.assert_array_equal(f.grad(np.array([1.0, 2.0])), 0)
        g = LeastSquares(np.eye(2), np.zeros(2))
        assert g.value(np.array([1.0, 2.0])) == 2.5
        np.testing.assert_array_equal(g.grad(np.array([1.0, 2.0])), [1, 2])
        h = LeastSquares(np.array([[1.0, 2.0], [0.0, 1.0]]), np.array([1.0, 0.0]))
        assert h.value(np.ones(2)) == 2.5

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(0)
        f = LeastSquares(rng.standard_normal((4, 3)), rng.standard_normal(4))
        for _ in range(20):
            x = rng.standard_normal(3)
            assert rel_err(f.grad(x), finite_gradient(f.value, x)) < 1e-6

    def test_smoothness_constants(self):
        A = np.diag([1.0, 3.0])
        f = LeastSquares(A, np.zeros(2))
        assert abs(f.L - 9) < 1e-12
        assert abs(f.mu - 1) < 1e-12
        rank_deficient = LeastSquares(np.array([[1.0, 1.0]]), np.zeros(1))
        assert rank_deficient.mu is None

    def test_linear_operator_input(self):
        rng = np.random.default_rng(1)
        A = rng.standard_normal((5, 4))
        f = LeastSquares(aslinearoperator(A), np.ones(5))
        dense = LeastSquares(A, np.ones(5))
        x = rng.standard_normal(4)
        np.testing.assert_allclose(f.grad(x), dense.grad(x), atol=1e-12)
        assert abs(f.L - dense.L) < 1e-8 * dense.L

    def test_dimension_mismatch(self):
        f = LeastSquares(np.eye(3), np.zeros(3))
        with pytest.raises(InvalidInputError):
            f.value(np.zeros(2))
        with pytest.raises(InvalidInputError):
            LeastSquares(np.eye(3), np.zeros(2))

    def test_lipschitz_sampled(self):
        rng = np.random.default_rng(2)
        f = LeastSquares(rng.standard_normal((6, 4)), rng.standard_normal(6))
        for _ in range(100):
            a, b = rng.standard_normal(4), rng.standard_normal(4)
            assert np.linalg.norm(f.grad(a) - f.grad(b)) <= f.L * np.linalg.norm(a - b) + 1e-9


class TestGaussianBlur:
    def test_kernel_properties(self):
        blur = GaussianBlur(2.0)
        assert blur.radius == 6
        k = blur.kernel
        assert k.shape == (13, 13)
        assert abs(k.sum() - 1) < 1e-14
        np.testing.assert_allclose(k, k[::-1, ::-1], atol=0)

    def test_self_adjoint(self):
        blur = GaussianBlur(2.0, (9, 11))
        rng = np.random.default_rng(0)
        x, z = rng.standard_normal((9, 11)), rng.standard_normal((9, 11))
        assert abs(np.vdot(blur.apply(x), z) - np.vdot(x, blur.apply(z))) < 1e-12

    def test_matches_zero_padded_convolution(self):
        from greedyprecond.linalg import conv2d

        blur = GaussianBlur(2.0, (10, 8))
        x = np.random.default_rng(1).standard_normal((10, 8))
        np.testing.assert_allclose(blur.apply(x), conv2d(blur.kernel, x), atol=1e-14)

    def test_norm_at_most_one(self):
        assert GaussianBlur().norm_sq() <= 1.0

    def test_batch_matches_single(self):
        blur = GaussianBlur()
        X = np.random.default_rng(2).standard_normal((3, 28, 28))
        np.testing.assert_allclose(blur.apply(X)[1], blur.apply(X[1]), atol=1e-14)


class TestHuberTV:
    def test_huber_branches_meet(self):
        eps = 0.01
        assert abs(huber(eps, eps) - eps / 2) < 1e-15
        assert abs(huber(eps * (1 + 1e-12), eps) - eps / 2) < 1e-12
        assert abs(huber(1.0, eps) - 0.995) < 1e-15

    def test_constant_image_is_minimum(self):
        blur = GaussianBlur(2.0, (8, 8))
        x = np.full((8, 8), 0.3)
        f = HuberTV(blur, blur.apply(x))
        assert f.value(x) == 0
        np.testing.assert_allclose(f.grad(x), 0, atol=1e-15)

    def test_unit_step_edge_contribution(self):
        blur = GaussianBlur(2.0, (3, 3))
        x = np.zeros((3, 3))
        x[2, 1] = 1.0  # single vertical unit step on one pixel pair ... plus horizontal neighbours
        f = HuberTV(blur, blur.apply(x), alpha=1.0, eps=0.01)
        assert abs(f.value(x) - huber_tv_oracle(x, blur.apply(x), blur.apply(x), 1.0, 0.01)) < 1e-12
        step = np.zeros((2, 1))
        step[1, 0] = 1.0
        g = HuberTV(GaussianBlur(2.0, (2, 1)), GaussianBlur(2.0, (2, 1)).apply(step), alpha=1.0)
        assert abs(g.value(step) - 0.995) < 1e-12

    def test_value_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        blur = GaussianBlur(2.0, (4, 4))
        y = rng.standard_normal((4, 4))
        f = HuberTV(blur, y, alpha=0.3, eps=0.5)
        for _ in range(5):
            x = rng.standard_normal((4, 4)) * 0.5
            assert abs(f.value(x) - huber_tv_oracle(x, blur.apply(x), y, 0.3, 0.5)) < 1e-12

    def test_difference_adjoint(self):
        rng = np.random.default_rng(1)
        x, w = rng.standard_normal((6, 7)), rng.standard_normal((6, 7, 2))
        assert abs(np.vdot(forward_diff(x), w) - np.vdot(x, forward_diff_adjoint(w))) < 1e-12

    @pytest.mark.parametrize("scale", [1.0, 0.005])
    def test_gradient_finite_differences(self, scale):
        # scale 0.005 puts many pixel pairs in the quadratic branch
        rng = np.random.default_rng(2)
        blur = GaussianBlur(2.0, (8, 8))
        f = HuberTV(blur, rng.random((8, 8)), alpha=0.05, eps=0.01)
        for _ in range(20):
            x = scale * rng.standard_normal((8, 8))
            assert rel_err(f.grad(x), finite_gradient(f.value, x)) < 1e-5

    def test_convex_along_segments(self):
        rng = np.random.default_rng(3)
        blur = GaussianBlur(2.0, (8, 8))
        f = HuberTV(blur, rng.random((8, 8)), alpha=0.1, eps=0.01)
        for _ in range(50):
            a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
            assert f.value(0.5 * (a + b)) <= 0.5 * f.value(a) + 0.5 * f.value(b) + 1e-12

    def test_lipschitz_sampled(self):
        rng = np.random.default_rng(4)
        blur = GaussianBlur(2.0, (12, 12))
        f = HuberTV(blur, rng.random((12, 12)))
        for _ in range(100):
            a = rng.random((12, 12))
            b = a + 0.01 * rng.standard_normal((12, 12))
            assert np.linalg.norm(f.grad(a) - f.grad(b)) <= f.L * np.linalg.norm(a - b) + 1e-9

    def test_smoothness_bound(self):
        blur = GaussianBlur()
        f = HuberTV(blur, np.zeros((28, 28)))
        assert smoothness_bound(f) <= 1 + 8e-4 / 0.01
        no_reg = HuberTV(blur, np.zeros((28, 28)), alpha=0.0)
        assert abs(no_reg.L - blur.norm_sq()) < 1e-15
        assert no_reg.L <= 1.0

    def test_identity_operator_bound(self):
        # with A = I the bound is 1 + 1e-2 ||D||^2
        identity_norm = op_norm_sq(lambda v: v, lambda v: v, (28, 28))
        d = diff_norm_sq((28, 28))
        assert 7.9 < d <= 8.0
        assert abs(identity_norm - 1) < 1e-12

    def test_rejects_bad_parameters(self):
        blur = GaussianBlur(2.0, (4, 4))
        with pytest.raises(InvalidInputError):
            HuberTV(blur, np.zeros((4, 4)), eps=0)
        with pytest.raises(InvalidInputError):
            HuberTV(blur, np.zeros((3, 4)))


class TestStack:
    def test_huber_stack_matches_loop(self):
        rng = np.random.default_rng(0)
        blur = GaussianBlur(2.0, (8, 8))
        objs = [HuberTV(blur, rng.random((8, 8))) for _ in range(4)]
        S = stack(objs)
        X = rng.standard_normal((4, 8, 8))
        np.testing.assert_allclose(S.value(X), [f.value(x) for f, x in zip(objs, X)], rtol=1e-13)
        np.testing.assert_allclose(S.grad(X), [f.grad(x) for f, x in zip(objs, X)], atol=1e-13)

    def test_dense_ls_stack_matches_loop(self):
        rng = np.random.default_rng(1)
        objs = [LeastSquares(rng.standard_normal((5, 3)), rng.standard_normal(5)) for _ in range(3)]
        S = stack(objs)
        X = rng.standard_normal((3, 3))
        np.testing.assert_allclose(S.value(X), [f.value(x) for f, x in zip(objs, X)], rtol=1e-13)
        np.testing.assert_allclose(S.grad(X), [f.grad(x) for f, x in zip(objs, X)], atol=1e-13)
        np.testing.assert_array_equal(S.L, [f.L for f in objs])

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            stack([])
