import numpy as np
import pytest

from greedyprecond.closed_form import (
    LsSnapshot,
    diagonal_ls,
    full_ls,
    general_affine_ls,
    interpolating_full,
    scalar_ls,
    uniqueness_certificate,
)
from greedyprecond.exceptions import CapacityError, RankDeficientError
from greedyprecond.linalg import kron
from greedyprecond.objectives import GaussianBlur, LeastSquares
from greedyprecond.preconditioners import Diagonal, FullMatrix, Scalar
from greedyprecond.trainer import GreedySubproblem


def random_snapshot(rng, N, n, m=None):
    m = m or n + 3
    objs = [LeastSquares(rng.standard_normal((m, n)), rng.standard_normal(m)) for _ in range(N)]
    xs = [rng.standard_normal(n) for _ in range(N)]
    return LsSnapshot(objs, xs)


def golden_section(phi, lo, hi, tol=1e-12):
    # independent 1-D minimiser for the exact line search oracle
    gr = (np.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - gr * (b - a), a + gr * (b - a)
    while b - a > tol:
        if phi(c) < phi(d):
            b, d = d, c
            c = b - gr * (b - a)
        else:
            a, c = c, d
            d = a + gr * (b - a)
    return 0.5 * (a + b)


def subproblem(snap, param):
    return GreedySubproblem(snap.objectives, np.stack(snap.xs), param, 0.0 + 1e-3)


class TestGeneralAffine:
    def test_identity_scalar_embedding(self):
        f = LeastSquares(np.eye(2), np.zeros(2))
        x = np.array([1.0, 2.0])
        snap = LsSnapshot([f], [x])
        theta = general_affine_ls([snap.grads[0][:, None]], [x], snap)
        np.testing.assert_allclose(theta, [1.0])

    def test_zero_expansion(self):
        rng = np.random.default_rng(0)
        snap = random_snapshot(rng, 2, 3)
        theta = general_affine_ls([np.zeros((3, 2))] * 2, snap.xs, snap)
        np.testing.assert_array_equal(theta, 0)

    def test_matches_normal_equations(self):
        rng = np.random.default_rng(1)
        snap = random_snapshot(rng, 3, 4)
        Bs = [rng.standard_normal((4, 4)) for _ in range(3)]
        theta = general_affine_ls(Bs, snap.xs, snap)
        # stack every residual into one least-squares problem in theta
        big_A = np.vstack([f.A @ B for f, B in zip(snap.objectives, Bs)])
        big_b = np.concatenate([f.A @ v - f.y for f, v in zip(snap.objectives, snap.xs)])
        ref = np.linalg.lstsq(big_A, big_b, rcond=None)[0]

        def total(th):
            return sum(f.value(v - B @ th) for f, v, B in zip(snap.objectives, snap.xs, Bs))

        assert abs(total(theta) - total(ref)) < 1e-10

    def test_capacity(self):
        rng = np.random.default_rng(2)
        snap = random_snapshot(rng, 1, 3)
        with pytest.raises(CapacityError):
            general_affine_ls([np.zeros((3, 5))], snap.xs, snap, max_params=4)


class TestScalar:
    def test_examples(self):
        f = LeastSquares(np.eye(2), np.zeros(2))
        assert scalar_ls(LsSnapshot([f], [np.array([1.0, 2.0])])) == 1.0
        g = LeastSquares(np.diag([1.0, 2.0]), np.zeros(2))
        assert abs(scalar_ls(LsSnapshot([g], [np.ones(2)])) - 17 / 65) < 1e-15
        assert scalar_ls(LsSnapshot([g], [np.zeros(2)])) == 0.0

    def test_golden_section_oracle(self):
        g = LeastSquares(np.diag([1.0, 2.0]), np.zeros(2))
        x = np.ones(2)
        d = g.grad(x)
        alpha = golden_section(lambda a: g.value(x - a * d), 0, 2)
        assert abs(alpha - 17 / 65) < 1e-6


class TestDiagonal:
    def test_identity_gives_ones(self):
        f = LeastSquares(np.eye(3), np.zeros(3))
        p = diagonal_ls(LsSnapshot([f], [np.array([1.0, -2.0, 3.0])]))
        np.testing.assert_allclose(p, 1.0)

    def test_zero_component_gets_zero(self):
        f = LeastSquares(np.eye(3), np.zeros(3))
        p = diagonal_ls(LsSnapshot([f], [np.array([1.0, 0.0, 3.0])]))
        np.testing.assert_allclose(p, [1, 0, 1], atol=1e-15)

    def test_one_step_lands_on_optimum(self):
        f = LeastSquares(np.diag([1.0, 2.0]), np.zeros(2))
        x0 = np.ones(2)
        p = diagonal_ls(LsSnapshot([f], [x0]))
        np.testing.assert_allclose(x0 - p * f.grad(x0), 0, atol=1e-14)

    def test_image_snapshot_is_in_vec_order(self):
        rng = np.random.default_rng(3)
        blur = GaussianBlur(1.0, (3, 4))
        objs = [LeastSquares(blur, rng.standard_normal((3, 4))) for _ in range(2)]
        xs = [rng.standard_normal((3, 4)) for _ in range(2)]
        snap = LsSnapshot(objs, xs)
        theta = diagonal_ls(snap)
        sub = GreedySubproblem(objs, np.stack(xs), Diagonal((3, 4)), 0.1)
        g0 = np.linalg.norm(sub.grad_g(np.zeros(12)))
        assert np.linalg.norm(sub.grad_g(theta)) <= 1e-8 * max(1.0, g0)


class TestFull:
    def test_identity_one_step(self):
        f = LeastSquares(np.eye(2), np.zeros(2))
        x0 = np.array([1.0, 2.0])
        P = full_ls(LsSnapshot([f], [x0]))
        np.testing.assert_allclose(x0 - P @ f.grad(x0), 0, atol=1e-14)

    def test_instant_convergence_two_points(self):
        rng = np.random.default_rng(4)
        objs = [LeastSquares(rng.standard_normal((5, 3)), rng.standard_normal(5)) for _ in range(2)]
        xs = [rng.standard_normal(3) for _ in range(2)]
        P = full_ls(LsSnapshot(objs, xs))
        for f, x in zip(objs, xs):
            x_star = np.linalg.lstsq(f.A, f.y, rcond=None)[0]
            assert np.linalg.norm(x - P @ f.grad(x) - x_star) < 1e-8

    def test_matches_general_affine_kron(self):
        rng = np.random.default_rng(5)
        snap = random_snapshot(rng, 2, 4)
        P = full_ls(snap)
        # P g = (g^T kron I) vec(P) with column-stacked vec
        Bs = [kron(g[None, :], np.eye(4)) for g in snap.grads]
        theta = general_affine_ls(Bs, snap.xs, snap)

        def total(Pm):
            return sum(f.value(x - Pm @ g) for f, x, g in zip(snap.objectives, snap.xs, snap.grads))

        assert abs(total(P) - total(theta.reshape(4, 4, order="F"))) < 1e-10

    def test_capacity(self):
        rng = np.random.default_rng(6)
        snap = random_snapshot(rng, 1, 5)
        with pytest.raises(CapacityError):
            full_ls(snap, max_n=4)


class TestStationarity:
    @pytest.mark.parametrize("N,n", [(1, 4), (3, 6), (10, 16)])
    def test_closed_forms_are_stationary_and_minimal(self, N, n):
        rng = np.random.default_rng(N * 100 + n)
        snap = random_snapshot(rng, N, n)
        X = np.stack(snap.xs)
        cases = [(Scalar(n), np.array([scalar_ls(snap)])), (Diagonal(n), diagonal_ls(snap))]
        if n <= 8:
            cases.append((FullMatrix(n), full_ls(snap).ravel(order="F")))
        for param, theta in cases:
            sub = GreedySubproblem(snap.objectives, X, param, 1e-3)
            g0 = np.linalg.norm(sub.grad_g(np.zeros(param.param_dim)))
            assert np.linalg.norm(sub.grad_g(theta)) <= 1e-8 * max(1.0, g0), param.tag
            best = sub.eval_g(theta)
            for _ in range(100):
                other = theta + rng.standard_normal(param.param_dim) * 0.1
                assert best <= sub.eval_g(other) + 1e-12

    def test_diagonal_one_step_property(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            A = rng.standard_normal((8, 5))
            f = LeastSquares(A, rng.standard_normal(8))
            x0 = rng.standard_normal(5)
            while np.min(np.abs(f.grad(x0))) < 1e-3:
                x0 = rng.standard_normal(5)
            x_star = np.linalg.lstsq(A, f.y, rcond=None)[0]
            f_star = f.value(x_star)
            p = diagonal_ls(LsSnapshot([f], [x0]))
            x1 = x0 - p * f.grad(x0)
            assert f.value(x1) - f_star <= 1e-10 * (f.value(x0) - f_star)


class TestInterpolating:
    def test_single_condition_rank_one(self):
        g, d = np.array([1.0, 2.0, 2.0]), np.array([0.5, -1.0, 3.0])
        P = interpolating_full([g], [d])
        np.testing.assert_allclose(P, np.outer(d, g) / g.dot(g), atol=1e-14)
        np.testing.assert_allclose(P @ g, d, atol=1e-14)

    def test_square_invertible(self):
        rng = np.random.default_rng(8)
        G, D = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
        P = interpolating_full(list(G.T), list(D.T))
        np.testing.assert_allclose(P @ G, D, atol=1e-10)
        np.testing.assert_allclose(P, D @ np.linalg.inv(G), atol=1e-10)

    def test_parallel_gradients_rejected(self):
        g = np.array([1.0, 2.0, 3.0])
        with pytest.raises(RankDeficientError) as info:
            interpolating_full([g, 2 * g], [g, g])
        assert info.value.rank == 1


class TestUniqueness:
    def test_examples(self):
        assert uniqueness_certificate([np.eye(2)], [1.0]) == 1.0
        assert uniqueness_certificate([np.eye(2)], [None]) is None
        B = np.array([[1.0, 0.0], [0.0, 0.0], [2.0, 0.0]])
        assert uniqueness_certificate([B], [1.0]) is None

    def test_takes_best_over_points(self):
        out = uniqueness_certificate([np.eye(2), 2 * np.eye(2)], [1.0, 1.0])
        assert abs(out - 2.0) < 1e-14
