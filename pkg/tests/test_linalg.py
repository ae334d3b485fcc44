import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from greedyprecond.exceptions import CapacityError, InvalidInputError
from greedyprecond.linalg import (
    KernelGeometry,
    conv2d,
    hadamard,
    kernel_xcorr,
    kron,
    op_norm_sq,
    pinv_solve,
    translate,
)
from greedyprecond.objectives import forward_diff, forward_diff_adjoint


def conv_oracle(kernel, x):
    # literal double sum over kernel offsets and output pixels
    h1, h2 = kernel.shape
    r1, r2 = (h1 - 1) // 2, (h2 - 1) // 2
    m1, m2 = x.shape
    out = np.zeros_like(x)
    for n1 in range(m1):
        for n2 in range(m2):
            for a in range(h1):
                for b in range(h2):
                    i, j = n1 - (a - r1), n2 - (b - r2)
                    if 0 <= i < m1 and 0 <= j < m2:
                        out[n1, n2] += kernel[a, b] * x[i, j]
    return out


class TestKernelGeometry:
    @pytest.mark.parametrize("h", [1, 2, 3, 4, 13, 28])
    def test_offset_range_covers_h(self, h):
        g = KernelGeometry(h, h)
        assert (g.r1 + g.delta1) - (-g.r1) + 1 == h
        assert g.r1 == (h - 1) // 2
        assert g.delta1 == (1 if h % 2 == 0 else 0)

    def test_center_index_is_zero_offset(self):
        g = KernelGeometry(4, 3)
        offs = {(a, b): (k1, k2) for a, b, k1, k2 in g.offsets()}
        assert offs[g.center] == (0, 0)
        assert min(k for k, _ in offs.values()) == -1
        assert max(k for k, _ in offs.values()) == 2

    def test_rejects_empty(self):
        with pytest.raises(InvalidInputError):
            KernelGeometry(0, 3)


class TestPinvSolve:
    def test_identity(self):
        np.testing.assert_allclose(pinv_solve(np.eye(2), np.array([2.0, 3.0])), [2, 3])

    def test_zero_matrix(self):
        np.testing.assert_array_equal(pinv_solve(np.zeros((2, 2)), np.ones(2)), [0, 0])

    def test_singular_matches_svd_pinv(self):
        M = np.array([[1.0, 0.0], [0.0, 0.0]])
        b = np.array([2.0, 3.0])
        np.testing.assert_allclose(pinv_solve(M, b), np.linalg.pinv(M) @ b)
        np.testing.assert_allclose(pinv_solve(M, b), [2, 0])

    def test_asymmetric_rejected(self):
        with pytest.raises(InvalidInputError):
            pinv_solve(np.array([[1.0, 1.0], [0.0, 1.0]]), np.ones(2))

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidInputError):
            pinv_solve(np.array([[np.nan, 0.0], [0.0, 1.0]]), np.ones(2))
        with pytest.raises(InvalidInputError):
            pinv_solve(np.eye(2), np.array([np.inf, 1.0]))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 8), st.integers(1, 7), st.integers(0, 2**31))
    def test_minimum_norm_preimage(self, n, rank, seed):
        rank = min(rank, n - 1)
        rng = np.random.default_rng(seed)
        F = rng.standard_normal((n, rank))
        M = F @ F.T
        theta = rng.standard_normal(n)
        b = M @ theta
        x = pinv_solve(M, b)
        assert np.linalg.norm(x) <= np.linalg.norm(theta) + 1e-12
        assert np.linalg.norm(M @ x - b) <= 1e-9 * np.linalg.norm(b)


class TestKronHadamard:
    def test_identity(self):
        np.testing.assert_array_equal(kron(np.eye(2), np.eye(2)), np.eye(4))

    def test_column_vectors(self):
        np.testing.assert_array_equal(kron([1, 2], [3, 4])[:, 0], [3, 4, 6, 8])

    def test_block_definition(self):
        rng = np.random.default_rng(1)
        A, B = rng.standard_normal((2, 3)), rng.standard_normal((4, 2))
        K = kron(A, B)
        for i in range(2):
            for j in range(3):
                np.testing.assert_array_equal(K[4 * i:4 * i + 4, 2 * j:2 * j + 2], A[i, j] * B)

    def test_vec_identity_lemma(self):
        rng = np.random.default_rng(2)
        v, w = rng.standard_normal(3), rng.standard_normal(4)
        lhs = kron(v, np.eye(4)) @ w
        np.testing.assert_allclose(lhs, kron(v, w)[:, 0], atol=1e-14)

    def test_mixed_product(self):
        rng = np.random.default_rng(3)
        A, C = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
        B, D = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        np.testing.assert_allclose(kron(A, B) @ kron(C, D), kron(A @ C, B @ D), atol=1e-12)

    def test_norm_multiplicative(self):
        rng = np.random.default_rng(4)
        v, w = rng.standard_normal(5), rng.standard_normal(7)
        assert abs(np.linalg.norm(kron(v, w)) - np.linalg.norm(v) * np.linalg.norm(w)) < 1e-12

    def test_capacity(self):
        with pytest.raises(CapacityError):
            kron(np.ones((10, 10)), np.ones((10, 10)), max_entries=9999)

    def test_hadamard(self):
        np.testing.assert_array_equal(hadamard([1, 2, 3], [1, 1, 1]), [1, 2, 3])
        np.testing.assert_array_equal(hadamard([1, 2, 3], [0, 0, 0]), [0, 0, 0])
        np.testing.assert_array_equal(hadamard([2, 3], [5, 7]), [10, 21])
        with pytest.raises(InvalidInputError):
            hadamard([1, 2], [1, 2, 3])


class TestConvTranslate:
    def test_delta_kernel_is_identity(self):
        x = np.random.default_rng(0).standard_normal((5, 6))
        k = np.zeros((3, 3))
        k[1, 1] = 1.0
        np.testing.assert_array_equal(conv2d(k, x), x)
        np.testing.assert_array_equal(conv2d(2.5 * k, x), 2.5 * x)

    def test_single_offset_shifts(self):
        x = np.random.default_rng(1).standard_normal((4, 5))
        k = np.zeros((3, 3))
        k[2, 1] = 1.0  # offset (1, 0)
        out = conv2d(k, x)
        np.testing.assert_array_equal(out, conv_oracle(k, x))
        np.testing.assert_array_equal(out[1:], x[:-1])
        np.testing.assert_array_equal(out[0], 0)

    def test_ones_kernel_on_small_image(self):
        np.testing.assert_array_equal(conv2d(np.ones((3, 3)), np.ones((2, 2))), 4 * np.ones((2, 2)))

    @pytest.mark.parametrize("kshape,xshape", [((3, 3), (5, 5)), ((4, 2), (5, 6)), ((6, 7), (4, 5))])
    def test_matches_double_sum(self, kshape, xshape):
        rng = np.random.default_rng(5)
        k, x = rng.standard_normal(kshape), rng.standard_normal(xshape)
        np.testing.assert_allclose(conv2d(k, x), conv_oracle(k, x), atol=1e-13)

    def test_bilinear(self):
        rng = np.random.default_rng(6)
        k1, k2, x = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal((6, 6))
        np.testing.assert_allclose(conv2d(2 * k1 - 3 * k2, x), 2 * conv2d(k1, x) - 3 * conv2d(k2, x), atol=1e-12)
        y = rng.standard_normal((6, 6))
        np.testing.assert_allclose(conv2d(k1, 2 * x + y), 2 * conv2d(k1, x) + conv2d(k1, y), atol=1e-12)

    def test_batch_axes(self):
        rng = np.random.default_rng(7)
        k, X = rng.standard_normal((3, 3)), rng.standard_normal((2, 3, 5, 5))
        out = conv2d(k, X)
        np.testing.assert_allclose(out[1, 2], conv2d(k, X[1, 2]))

    def test_translate(self):
        x = np.arange(9.0).reshape(3, 3)
        np.testing.assert_array_equal(translate(x, 0, 0), x)
        np.testing.assert_array_equal(translate(x, 3, 0), 0)
        np.testing.assert_array_equal(translate(x, 0, -5), 0)
        t = translate(x, 1, 0)
        np.testing.assert_array_equal(t[:2], x[1:])
        np.testing.assert_array_equal(t[2], 0)

    def test_translate_roundtrip(self):
        x = np.random.default_rng(8).standard_normal((6, 7))
        back = translate(translate(x, 2, -1), -2, 1)
        # out[i, j] = x[i + 2, j - 1] then back: rows 0-1 and the last column are evicted
        np.testing.assert_array_equal(back[2:, :-1], x[2:, :-1])
        assert not back[:2].any() and not back[:, -1].any()

    def test_xcorr_is_kernel_gradient(self):
        rng = np.random.default_rng(9)
        g, r = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
        grad = kernel_xcorr(r, g, (3, 3))
        h = 1e-6
        for a in range(3):
            for b in range(3):
                e = np.zeros((3, 3))
                e[a, b] = h
                fd = (np.vdot(r, conv2d(e, g)) - np.vdot(r, conv2d(-e, g))) / (2 * h)
                assert abs(fd - grad[a, b]) <= 1e-6 * max(1.0, abs(fd))


class TestOpNorm:
    def test_identity_and_scaling(self):
        assert abs(op_norm_sq(lambda v: v, lambda v: v, 10) - 1) < 1e-12
        assert abs(op_norm_sq(lambda v: 3 * v, lambda v: 3 * v, (4, 4)) - 9) < 1e-10

    def test_zero_operator(self):
        assert op_norm_sq(lambda v: 0 * v, lambda v: 0 * v, 5) == 0.0

    def test_matches_dense_norm(self):
        A = np.random.default_rng(0).standard_normal((7, 5))
        est = op_norm_sq(lambda v: A @ v, lambda z: A.T @ z, 5, tol=1e-14, iters=5000)
        assert abs(est - np.linalg.norm(A, 2) ** 2) < 1e-8 * est

    def test_difference_operator_bound(self):
        est = op_norm_sq(forward_diff, forward_diff_adjoint, (28, 28), tol=1e-12)
        assert 7.9 < est <= 8.0

    def test_adjoint_check(self):
        A = np.random.default_rng(0).standard_normal((4, 3))
        with pytest.raises(InvalidInputError):
            op_norm_sq(lambda v: A @ v, lambda z: 2 * A.T @ z, 3, check_adjoint=True)
