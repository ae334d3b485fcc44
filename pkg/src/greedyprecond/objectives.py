"""Convex objectives: least squares, Gaussian blur, Huber-regularised TV.

Each objective acts on arrays of a fixed ``shape`` (a vector for plain
least squares, an image for deblurring problems) and exposes ``value``,
``grad``, a smoothness constant ``L`` and, when known, a strong-convexity
constant ``mu``.

For training, a list of objectives is turned into a *stack* with
:func:`stack`; a stack evaluates all members on a batch ``X`` of shape
``(N, *shape)`` at once and is vectorised when the members share an
operator.
"""

import abc
from functools import lru_cache
import math

import numpy as np
from scipy.sparse.linalg import LinearOperator

from .exceptions import InvalidInputError
from .linalg import as_finite, op_norm_sq

__all__ = [
    "Objective",
    "LeastSquares",
    "GaussianBlur",
    "HuberTV",
    "ObjectiveStack",
    "stack",
    "finite_gradient",
    "forward_diff",
    "forward_diff_adjoint",
    "huber",
    "diff_norm_sq",
    "smoothness_bound",
]


class Objective(abc.ABC):
    """A convex, continuously differentiable function of arrays of ``shape``."""

    shape = ()
    L = None
    mu = None

    @abc.abstractmethod
    def value(self, x):
        """Objective value at ``x``."""

    @abc.abstractmethod
    def grad(self, x):
        """Gradient at ``x``, same shape as ``x``."""

    def __call__(self, x):
        return self.value(x)

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.shape:
            raise InvalidInputError(f"expected input of shape {self.shape}, got {x.shape}")
        return x


def finite_gradient(f, x, h=None):
    """Central-difference gradient of a scalar function, coordinate by coordinate.

    The default step is ``1e-6 * (||x||_inf + 1)``.
    """
    x = np.array(x, dtype=np.float64)
    if h is None:
        h = 1e-6 * (np.max(np.abs(x), initial=0.0) + 1.0)
    g = np.empty_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# Least squares


class LeastSquares(Objective):
    """``f(x) = 0.5 * ||A x - y||^2``.

    ``A`` may be a dense 2-D array, a :class:`scipy.sparse.linalg.LinearOperator`,
    or any object with ``apply``/``adjoint`` methods and a ``shape``
    attribute giving the (square) image shape it acts on, such as
    :class:`GaussianBlur`.

    ``L`` defaults to ``||A||^2`` (exact for dense ``A``, power iteration
    otherwise); ``mu`` to the smallest eigenvalue of ``A^T A`` for dense
    injective ``A`` and ``None`` otherwise.
    """

    def __init__(self, A, y, L=None, mu=None):
        self.y = as_finite(y, "y")
        if isinstance(A, np.ndarray) or isinstance(A, (list, tuple)):
            A = as_finite(A, "A")
            if A.ndim != 2:
                raise InvalidInputError(f"A must be 2-D, got shape {A.shape}")
            self.A = A
            self._fwd = A.__matmul__
            self._adj = A.T.__matmul__
            self.shape = (A.shape[1],)
            out_shape = (A.shape[0],)
        elif isinstance(A, LinearOperator):
            self.A = A
            self._fwd = A.matvec
            self._adj = A.rmatvec
            self.shape = (A.shape[1],)
            out_shape = (A.shape[0],)
        elif hasattr(A, "apply") and hasattr(A, "adjoint"):
            self.A = A
            self._fwd = A.apply
            self._adj = A.adjoint
            self.shape = tuple(A.shape)
            out_shape = tuple(A.shape)
        else:
            raise InvalidInputError(f"unsupported operator type {type(A).__name__}")
        if self.y.shape != out_shape:
            raise InvalidInputError(f"y has shape {self.y.shape}, expected {out_shape}")
        if L is None:
            if isinstance(self.A, np.ndarray):
                L = float(np.linalg.norm(self.A, 2) ** 2)
            elif hasattr(self.A, "norm_sq"):
                L = self.A.norm_sq()
            else:
                L = op_norm_sq(self._fwd, self._adj, self.shape)
        self.L = float(L)
        if mu is None and isinstance(self.A, np.ndarray):
            m, n = self.A.shape
            if m >= n:
                lam = float(np.linalg.eigvalsh(self.A.T @ self.A)[0])
                if lam > 1e-12 * max(self.L, 1e-300):
                    mu = lam
        self.mu = mu

    def apply_A(self, x):
        return self._fwd(x)

    def apply_At(self, z):
        return self._adj(z)

    def residual(self, x):
        return self._fwd(self._check(x)) - self.y

    def value(self, x):
        r = self.residual(x)
        return 0.5 * float(np.vdot(r, r))

    def grad(self, x):
        return self._adj(self.residual(x))

    def matrix(self, max_cols=4096):
        """Dense ``A`` as an ``(m, n)`` array (flattened for image operators)."""
        if isinstance(self.A, np.ndarray):
            return self.A
        n = int(np.prod(self.shape))
        if n > max_cols:
            raise InvalidInputError(f"refusing to materialise an operator with {n} columns")
        cols = []
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            cols.append(np.ravel(self._fwd(e.reshape(self.shape))))
        return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# Gaussian blur


def _gaussian_taps(sigma, radius):
    k = np.exp(-(np.arange(-radius, radius + 1) ** 2) / (2.0 * sigma**2))
    return k / k.sum()


def _toeplitz_band(taps, m):
    radius = (len(taps) - 1) // 2
    T = np.zeros((m, m))
    for d in range(-min(radius, m - 1), min(radius, m - 1) + 1):
        T += np.diag(np.full(m - abs(d), taps[d + radius]), k=d)
    return T


class GaussianBlur:
    """Gaussian blur on ``shape`` images with zero padding.

    The kernel is truncated at ``radius`` (default ``ceil(3 sigma)``) and
    renormalised to unit sum. Because the 2-D kernel is the outer product of
    two symmetric 1-D kernels, the operator is applied as ``T1 @ x @ T2.T``
    with banded Toeplitz factors; it is self-adjoint.
    """

    def __init__(self, sigma=2.0, shape=(28, 28), radius=None):
        if sigma <= 0:
            raise InvalidInputError("sigma must be positive")
        self.sigma = float(sigma)
        self.radius = int(math.ceil(3 * sigma)) if radius is None else int(radius)
        self.shape = tuple(int(s) for s in shape)
        taps = _gaussian_taps(self.sigma, self.radius)
        self.taps = taps
        self._T1 = _toeplitz_band(taps, self.shape[0])
        self._T2 = _toeplitz_band(taps, self.shape[1])
        self._norm_sq = None

    @property
    def kernel(self):
        """The normalised ``(2R+1) x (2R+1)`` kernel as an image."""
        return np.outer(self.taps, self.taps)

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-2:] != self.shape:
            raise InvalidInputError(f"expected images of shape {self.shape}, got {x.shape}")
        if x.ndim == 2:
            return self._T1 @ x @ self._T2.T
        # one GEMM for the row pass over the whole batch
        z = (x.reshape(-1, self.shape[1]) @ self._T2.T).reshape(x.shape)
        return np.matmul(self._T1, z)

    adjoint = apply

    def norm_sq(self):
        """Power-iteration estimate of ``||A||^2`` (cached)."""
        if self._norm_sq is None:
            self._norm_sq = op_norm_sq(self.apply, self.adjoint, self.shape, tol=1e-12)
        return self._norm_sq

    def as_linear_operator(self):
        """The blur acting on flattened (row-major) images."""
        n = int(np.prod(self.shape))
        return LinearOperator(
            (n, n),
            matvec=lambda v: self.apply(np.reshape(v, self.shape)).ravel(),
            rmatvec=lambda v: self.adjoint(np.reshape(v, self.shape)).ravel(),
            dtype=np.float64,
        )


# ---------------------------------------------------------------------------
# Huber total variation


def forward_diff(u):
    """Forward differences along rows and columns, shape ``(..., m1, m2, 2)``.

    The last row (resp. column) difference is zero.
    """
    u = np.asarray(u, dtype=np.float64)
    out = np.zeros(u.shape + (2,))
    out[..., :-1, :, 0] = u[..., 1:, :] - u[..., :-1, :]
    out[..., :, :-1, 1] = u[..., :, 1:] - u[..., :, :-1]
    return out


def forward_diff_adjoint(p):
    """Adjoint of :func:`forward_diff` (the negative divergence)."""
    p = np.asarray(p, dtype=np.float64)
    p1, p2 = p[..., 0], p[..., 1]
    out = np.zeros(p.shape[:-1])
    out[..., :-1, :] -= p1[..., :-1, :]
    out[..., 1:, :] += p1[..., :-1, :]
    out[..., :, :-1] -= p2[..., :, :-1]
    out[..., :, 1:] += p2[..., :, :-1]
    return out


def huber(s, eps):
    """``s^2 / (2 eps)`` for ``|s| <= eps``, ``|s| - eps/2`` beyond."""
    a = np.abs(s)
    return np.where(a <= eps, 0.5 * a * a / eps, a - 0.5 * eps)


@lru_cache(maxsize=None)
def diff_norm_sq(shape):
    """Power-iteration estimate of ``||D||^2`` for :func:`forward_diff` on ``shape``."""
    return op_norm_sq(forward_diff, forward_diff_adjoint, tuple(shape), tol=1e-12)


class HuberTV(Objective):
    """``f(x) = 0.5 ||A x - y||^2 + alpha * sum_ij h_eps(|(D x)_ij|)``.

    ``A`` is a :class:`GaussianBlur`, ``D`` the forward-difference operator
    and ``|.|`` the Euclidean norm of each pixel's difference pair. ``L`` is
    ``||A||^2 + alpha ||D||^2 / eps`` with both norms from power iteration.
    """

    def __init__(self, blur, y, alpha=1e-4, eps=0.01, L=None):
        if eps <= 0:
            raise InvalidInputError("eps must be positive")
        if alpha < 0:
            raise InvalidInputError("alpha must be nonnegative")
        self.blur = blur
        self.shape = blur.shape
        self.y = as_finite(y, "y")
        if self.y.shape != self.shape:
            raise InvalidInputError(f"y has shape {self.y.shape}, expected {self.shape}")
        self.alpha = float(alpha)
        self.eps = float(eps)
        self.L = float(smoothness_bound(self) if L is None else L)
        self.mu = None

    def value(self, x):
        x = self._check(x)
        r = self.blur.apply(x) - self.y
        fid = 0.5 * float(np.vdot(r, r))
        if self.alpha == 0.0:
            return fid
        mag = np.sqrt(np.sum(forward_diff(x) ** 2, axis=-1))
        return fid + self.alpha * float(np.sum(huber(mag, self.eps)))

    def grad(self, x):
        x = self._check(x)
        return _huber_tv_grad(x, self.blur, self.y, self.alpha, self.eps)


def _huber_tv_grad(x, blur, y, alpha, eps):
    g = blur.adjoint(blur.apply(x) - y)
    if alpha == 0.0:
        return g
    # forward_diff / forward_diff_adjoint fused, without the stacked layout
    d1 = np.zeros_like(x)
    d2 = np.zeros_like(x)
    np.subtract(x[..., 1:, :], x[..., :-1, :], out=d1[..., :-1, :])
    np.subtract(x[..., :, 1:], x[..., :, :-1], out=d2[..., :, :-1])
    w = np.sqrt(d1 * d1 + d2 * d2)
    np.maximum(w, eps, out=w)
    np.divide(alpha, w, out=w)
    d1 *= w
    d2 *= w
    g[..., :-1, :] -= d1[..., :-1, :]
    g[..., 1:, :] += d1[..., :-1, :]
    g[..., :, :-1] -= d2[..., :, :-1]
    g[..., :, 1:] += d2[..., :, :-1]
    return g


def smoothness_bound(obj):
    """``||A||^2 + alpha ||D||^2 / eps`` for a :class:`HuberTV` objective."""
    L = obj.blur.norm_sq()
    if obj.alpha:
        L += obj.alpha * diff_norm_sq(obj.shape) / obj.eps
    return L


# ---------------------------------------------------------------------------
# Batched evaluation


class ObjectiveStack:
    """Evaluate a list of same-shape objectives on a batch ``X``, one row each."""

    def __init__(self, objectives):
        objectives = list(objectives)
        if not objectives:
            raise InvalidInputError("empty objective list")
        shape = objectives[0].shape
        for f in objectives:
            if f.shape != shape:
                raise InvalidInputError("objectives must share their input shape")
        self.objectives = objectives
        self.shape = shape
        self.L = np.array([f.L for f in objectives], dtype=np.float64)
        mus = [f.mu for f in objectives]
        self.mu = None if any(m is None for m in mus) else np.array(mus, dtype=np.float64)

    def __len__(self):
        return len(self.objectives)

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape != (len(self),) + self.shape:
            raise InvalidInputError(
                f"expected batch of shape {(len(self),) + self.shape}, got {X.shape}"
            )
        return X

    def value(self, X):
        X = self._check(X)
        return np.array([f.value(x) for f, x in zip(self.objectives, X)])

    def grad(self, X):
        X = self._check(X)
        return np.stack([f.grad(x) for f, x in zip(self.objectives, X)])


class _HuberTVStack(ObjectiveStack):
    def __init__(self, objectives):
        super().__init__(objectives)
        f0 = self.objectives[0]
        self.blur, self.alpha, self.eps = f0.blur, f0.alpha, f0.eps
        self.Y = np.stack([f.y for f in self.objectives])

    def value(self, X):
        X = self._check(X)
        r = self.blur.apply(X) - self.Y
        axes = tuple(range(1, X.ndim))
        out = 0.5 * np.sum(r * r, axis=axes)
        if self.alpha:
            mag = np.sqrt(np.sum(forward_diff(X) ** 2, axis=-1))
            out = out + self.alpha * np.sum(huber(mag, self.eps), axis=axes)
        return out

    def grad(self, X):
        X = self._check(X)
        return _huber_tv_grad(X, self.blur, self.Y, self.alpha, self.eps)


class _DenseLeastSquaresStack(ObjectiveStack):
    def __init__(self, objectives):
        super().__init__(objectives)
        self.As = np.stack([f.A for f in self.objectives])
        self.Y = np.stack([f.y for f in self.objectives])

    def value(self, X):
        X = self._check(X)
        r = (self.As @ X[:, :, None])[:, :, 0] - self.Y
        return 0.5 * np.sum(r * r, axis=1)

    def grad(self, X):
        X = self._check(X)
        r = (self.As @ X[:, :, None])[:, :, 0] - self.Y
        return (r[:, None, :] @ self.As)[:, 0, :]


class _SharedOperatorLeastSquaresStack(ObjectiveStack):
    def __init__(self, objectives):
        super().__init__(objectives)
        self.op = self.objectives[0].A
        self.Y = np.stack([f.y for f in self.objectives])

    def value(self, X):
        X = self._check(X)
        r = self.op.apply(X) - self.Y
        return 0.5 * np.sum(r * r, axis=tuple(range(1, X.ndim)))

    def grad(self, X):
        X = self._check(X)
        return self.op.adjoint(self.op.apply(X) - self.Y)


def stack(objectives):
    """Batch evaluator for ``objectives``, vectorised where possible."""
    objectives = list(objectives)
    if objectives and all(isinstance(f, HuberTV) for f in objectives):
        f0 = objectives[0]
        if all(f.blur is f0.blur and f.alpha == f0.alpha and f.eps == f0.eps for f in objectives):
            return _HuberTVStack(objectives)
    if objectives and all(isinstance(f, LeastSquares) for f in objectives):
        A0 = objectives[0].A
        if all(isinstance(f.A, np.ndarray) and f.A.shape == getattr(A0, "shape", None)
               for f in objectives):
            return _DenseLeastSquaresStack(objectives)
        if isinstance(A0, GaussianBlur) and all(f.A is A0 for f in objectives):
            return _SharedOperatorLeastSquaresStack(objectives)
    return ObjectiveStack(objectives)
