"""Closed-form greedy parameters when every objective is least squares.

With ``f_k(x) = 0.5 ||A_k x - y_k||^2`` the training objective
``g(theta) = mean_k f_k(v_k - B_k theta)`` is a convex quadratic in
``theta``, so its least-norm minimiser solves the normal equations

    mean_k (A_k B_k)^T (A_k B_k) theta = mean_k B_k^T grad f_k(v_k)

through a pseudoinverse.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import CapacityError, InvalidInputError, RankDeficientError
from .linalg import hadamard, kron, pinv_solve
from .objectives import LeastSquares
from .preconditioners import _unvec, _vec

__all__ = [
    "LsSnapshot",
    "general_affine_ls",
    "scalar_ls",
    "diagonal_ls",
    "full_ls",
    "interpolating_full",
    "uniqueness_certificate",
    "FULL_LS_MAX_N",
    "AFFINE_MAX_PARAMS",
]

FULL_LS_MAX_N = 64
AFFINE_MAX_PARAMS = 4096
GRAM_MAX_N = 4096


@dataclass
class LsSnapshot:
    """Least-squares objectives frozen at the current iterates.

    ``objectives[k]`` must be :class:`~greedyprecond.objectives.LeastSquares`;
    gradients are computed on construction. Dense forward matrices and
    their Gram matrices are cached per distinct operator, so a dataset
    sharing one ``A`` pays for one Gram.
    """

    objectives: list
    xs: list
    grads: list = field(init=False)

    def __post_init__(self):
        if len(self.objectives) != len(self.xs) or not self.objectives:
            raise InvalidInputError("need one iterate per objective and at least one objective")
        for f in self.objectives:
            if not isinstance(f, LeastSquares):
                raise InvalidInputError("closed forms need least-squares objectives")
        shape = self.objectives[0].shape
        if any(f.shape != shape for f in self.objectives):
            raise InvalidInputError("objectives must share their input shape")
        self.shape = shape
        self.xs = [np.asarray(x, dtype=np.float64) for x in self.xs]
        self.grads = [f.grad(x) for f, x in zip(self.objectives, self.xs)]
        for g in self.grads:
            if not np.all(np.isfinite(g)):
                raise InvalidInputError("non-finite gradient in snapshot")
        self._mats = {}
        self._grams = {}

    @property
    def N(self):
        return len(self.objectives)

    @property
    def n(self):
        return int(np.prod(self.shape))

    def matrix(self, k):
        """Dense ``A_k`` acting on vec'd iterates."""
        A = self.objectives[k].A
        key = id(A)
        if key not in self._mats:
            M = self.objectives[k].matrix(max_cols=GRAM_MAX_N)
            if len(self.shape) == 2:
                # operator matrices are built on row-major flattening; reorder to vec
                m1, m2 = self.shape
                perm = np.arange(m1 * m2).reshape(m1, m2).ravel(order="F")
                out_shape = np.shape(self.objectives[k].y)
                M = M[:, perm]
                if len(out_shape) == 2:
                    M = M[np.arange(M.shape[0]).reshape(out_shape).ravel(order="F"), :]
            self._mats[key] = M
        return self._mats[key]

    def gram(self, k):
        """``A_k^T A_k`` in vec coordinates (cached per operator)."""
        key = id(self.objectives[k].A)
        if key not in self._grams:
            if self.n > GRAM_MAX_N:
                raise CapacityError(f"Gram matrix of size {self.n} exceeds cap {GRAM_MAX_N}")
            M = self.matrix(k)
            self._grams[key] = M.T @ M
        return self._grams[key]

    def vec_grad(self, k):
        return _vec(self.grads[k], self.shape)


def general_affine_ls(B_list, v_list, snapshot, max_params=AFFINE_MAX_PARAMS):
    """Least-norm minimiser for an arbitrary affine expansion ``x_k - G g_k = v_k - B_k theta``.

    ``B_list[k]`` is an ``n x r`` matrix and ``v_list[k]`` a length-``n``
    vector, both in vec coordinates.
    """
    N = snapshot.N
    if len(B_list) != N or len(v_list) != N:
        raise InvalidInputError("need one B and one v per data point")
    B_list = [np.asarray(B, dtype=np.float64) for B in B_list]
    r = B_list[0].shape[1]
    if r > max_params:
        raise CapacityError(f"{r} parameters exceed the cap of {max_params}")
    M = np.zeros((r, r))
    rhs = np.zeros(r)
    for k in range(N):
        B = B_list[k]
        v = np.asarray(v_list[k], dtype=np.float64).reshape(-1)
        if B.shape != (snapshot.n, r) or v.shape != (snapshot.n,):
            raise InvalidInputError(f"B_{k} must be {(snapshot.n, r)} and v_{k} length {snapshot.n}")
        AB = snapshot.matrix(k) @ B
        M += AB.T @ AB
        f = snapshot.objectives[k]
        grad_v = _vec(f.grad(_unvec(v, snapshot.shape)), snapshot.shape)
        rhs += B.T @ grad_v
    return pinv_solve(M / N, rhs / N)


def scalar_ls(snapshot):
    """Optimal greedy step size; exact line search when ``N = 1``.

    ``sum ||g_k||^2 / sum ||A_k g_k||^2``, or 0 when every ``A_k g_k`` vanishes.
    """
    num = 0.0
    den = 0.0
    for f, g in zip(snapshot.objectives, snapshot.grads):
        Ag = f.apply_A(g)
        num += float(np.vdot(g, g))
        den += float(np.vdot(Ag, Ag))
    if den <= 0.0:
        return 0.0
    return num / den


def diagonal_ls(snapshot):
    """Least-norm optimal diagonal, as a vec-ordered length-``n`` vector."""
    n, N = snapshot.n, snapshot.N
    M = np.zeros((n, n))
    rhs = np.zeros(n)
    for k in range(N):
        g = snapshot.vec_grad(k)
        M += hadamard(np.outer(g, g), snapshot.gram(k))
        rhs += hadamard(g, g)
    return pinv_solve(M / N, rhs / N)


def full_ls(snapshot, max_n=FULL_LS_MAX_N):
    """Least-norm optimal full matrix ``P`` (``n x n``, acting on vec'd iterates).

    Solves the ``n^2 x n^2`` Kronecker system, so ``n`` is capped.
    """
    n, N = snapshot.n, snapshot.N
    if n > max_n:
        raise CapacityError(f"full-matrix closed form limited to n <= {max_n}, got {n}")
    M = np.zeros((n * n, n * n))
    rhs = np.zeros(n * n)
    for k in range(N):
        g = snapshot.vec_grad(k)
        M += kron(np.outer(g, g), snapshot.gram(k))
        rhs += kron(g, g)[:, 0]
    theta = pinv_solve(M / N, rhs / N)
    return theta.reshape(n, n, order="F")


def interpolating_full(grads, displacements, rtol=1e-10):
    """Least-norm ``P`` with ``P g_k = d_k`` for every ``k``.

    Requires ``N <= n`` linearly independent gradients; when ``N = n`` the
    solution is unique.

    Raises
    ------
    RankDeficientError
        If the stacked gradients have numerical rank below ``N``.
    """
    G = np.column_stack([np.ravel(g) for g in grads]).astype(np.float64)
    D = np.column_stack([np.ravel(d) for d in displacements]).astype(np.float64)
    n, N = G.shape
    if D.shape != (n, N):
        raise InvalidInputError("grads and displacements must match in count and length")
    if N > n:
        raise RankDeficientError(f"{N} gradients in dimension {n} cannot be independent", rank=n, expected=N)
    s = np.linalg.svd(G, compute_uv=False)
    rank = int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0
    if rank < N:
        raise RankDeficientError(f"gradients have numerical rank {rank} < {N}", rank=rank, expected=N)
    # P = D (G^T G)^{-1} G^T
    return np.linalg.solve(G.T @ G, D.T).T @ G.T


def uniqueness_certificate(B_list, mu_list, rtol=1e-10):
    """Strong-convexity modulus of the greedy objective, if one can be certified.

    Returns ``max_j mu_j * lambda_min(B_j^T B_j) / N`` over data points with a
    known ``mu_j`` and injective ``B_j``, or ``None``.
    """
    N = len(B_list)
    best = None
    for B, mu in zip(B_list, mu_list):
        if mu is None or mu <= 0:
            continue
        B = np.atleast_2d(np.asarray(B, dtype=np.float64))
        if B.ndim == 2 and B.shape[0] < B.shape[1]:
            continue
        s = np.linalg.svd(B, compute_uv=False)
        if s.size == 0 or s[0] == 0 or np.sum(s > rtol * s[0]) < B.shape[1]:
            continue
        cert = mu * float(s[-1] ** 2) / N
        best = cert if best is None else max(best, cert)
    return best
