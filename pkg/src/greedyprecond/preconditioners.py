"""Affine preconditioner parametrisations ``theta -> G_theta``.

Four families are provided:

========== ================================ ===============
tag        ``G_theta g``                    ``len(theta)``
========== ================================ ===============
scalar     ``theta * g``                    1
diagonal   ``theta (.) g``                  n
full       ``P g``                          n**2
conv       ``kappa * g`` (2-D convolution)  h1 * h2
========== ================================ ===============

Multi-dimensional objects are flattened column-major ("vec"): an image
``x`` becomes ``(x[0,0], x[1,0], ..., x[m1-1, m2-1])``, the full matrix
``P`` is stored as ``theta[j*n + i] = P[i, j]`` and a kernel ``kappa`` as
``theta[b*h1 + a] = kappa[a, b]``.

``apply`` accepts gradients with leading batch axes. ``adjoint_apply``
computes ``B^T r`` where ``G_theta g = B theta``; with batch axes the
per-item results are summed, which is what the training objective needs.
"""

import abc

import numpy as np
import scipy.fft as sfft

from .exceptions import InvalidInputError
from .linalg import KernelGeometry, conv2d, kernel_xcorr

__all__ = [
    "Parametrization",
    "Scalar",
    "Diagonal",
    "FullMatrix",
    "Conv",
    "from_tag",
    "TAGS",
]

TAGS = ("scalar", "diagonal", "full", "conv")

def _vec(a, shape):
    """Column-major flatten of the trailing ``shape`` axes."""
    a = np.asarray(a, dtype=np.float64)
    lead = a.shape[: a.ndim - len(shape)]
    if len(shape) == 2:
        a = np.swapaxes(a, -1, -2)
    return a.reshape(lead + (int(np.prod(shape)),))


def _unvec(v, shape):
    v = np.asarray(v, dtype=np.float64)
    lead = v.shape[:-1]
    if len(shape) == 2:
        return np.swapaxes(v.reshape(lead + (shape[1], shape[0])), -1, -2)
    return v.reshape(lead + tuple(shape))


class Parametrization(abc.ABC):
    """Base class; ``shape`` is the shape of the iterates being preconditioned."""

    tag = None

    def __init__(self, shape):
        self.shape = tuple(int(s) for s in np.atleast_1d(shape))
        self.n = int(np.prod(self.shape))

    @property
    @abc.abstractmethod
    def param_dim(self):
        """Length of the parameter vector."""

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape})"

    def __eq__(self, other):
        return type(self) is type(other) and self.describe() == other.describe()

    def __hash__(self):
        return hash((type(self).__name__, tuple(sorted(self.describe().items()))))

    def describe(self):
        """Plain-data description, used for schedule files."""
        return {"tag": self.tag, "shape": list(self.shape)}

    def check_theta(self, theta):
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        if theta.shape != (self.param_dim,):
            raise InvalidInputError(
                f"{self.tag} parameters must have length {self.param_dim}, got {theta.size}"
            )
        return theta

    def _check_g(self, g):
        g = np.asarray(g, dtype=np.float64)
        if g.shape[g.ndim - len(self.shape):] != self.shape or g.ndim < len(self.shape):
            raise InvalidInputError(f"expected arrays ending in shape {self.shape}, got {g.shape}")
        return g

    @abc.abstractmethod
    def apply(self, theta, g):
        """``G_theta g``."""

    @abc.abstractmethod
    def adjoint_apply(self, g, r):
        """Gradient of ``theta -> <r, G_theta g>``, summed over batch axes."""

    @abc.abstractmethod
    def embed_tau(self, tau):
        """Parameters with ``G_theta = tau * I``."""

    @abc.abstractmethod
    def _operator_norm_sq(self, G):
        """Per-item bound on ``||B_k||^2`` for a batch of gradients ``G``."""

    def lipschitz_bound(self, grads, L_list):
        """Smoothness constant of the greedy training objective.

        ``mean_k L_k * ||B_k||^2`` with the per-family bound on ``||B_k||^2``.
        """
        G = self._check_g(grads)
        if G.ndim == len(self.shape):
            G = G[None]
        L_list = np.atleast_1d(np.asarray(L_list, dtype=np.float64))
        if G.shape[0] == 0:
            raise InvalidInputError("empty dataset")
        if L_list.shape != (G.shape[0],):
            raise InvalidInputError("one smoothness constant per gradient is required")
        return float(np.mean(L_list * self._operator_norm_sq(G)))

    def expansion(self, G):
        """Bind a fixed batch of gradients ``G`` for repeated apply/adjoint calls."""
        return _Expansion(self, self._check_g(G))

    def as_operator(self, theta):
        """``theta`` in its natural form (scalar, diagonal image, matrix, kernel)."""
        return self.check_theta(theta)


class _Expansion:
    def __init__(self, param, G):
        self.param = param
        self.G = G

    def apply(self, theta):
        return self.param.apply(theta, self.G)

    def adjoint(self, R):
        return self.param.adjoint_apply(self.G, R)


class _DiagonalExpansion:
    # keeps G in vec layout so each inner step is one multiply or one reduction
    def __init__(self, param, G):
        self.param = param
        self.lead = G.shape[: G.ndim - len(param.shape)]
        self.Gv = _vec(G, param.shape).reshape(-1, param.n)

    def apply(self, theta):
        theta = self.param.check_theta(theta)
        return _unvec(self.Gv * theta, self.param.shape).reshape(self.lead + self.param.shape)

    def adjoint(self, R):
        R = np.asarray(R, dtype=np.float64)
        if R.shape != self.lead + self.param.shape:
            raise InvalidInputError(f"shape mismatch: {R.shape} vs {self.lead + self.param.shape}")
        if len(self.param.shape) == 1:
            return np.sum(self.Gv * R.reshape(self.Gv.shape), axis=0)
        return np.einsum("kn,kn->n", self.Gv, _vec(R, self.param.shape).reshape(-1, self.param.n))


class Scalar(Parametrization):
    """``G = theta * I``."""

    tag = "scalar"

    @property
    def param_dim(self):
        return 1

    def apply(self, theta, g):
        theta = self.check_theta(theta)
        return theta[0] * self._check_g(g)

    def adjoint_apply(self, g, r):
        g, r = self._check_g(g), np.asarray(r, dtype=np.float64)
        if g.shape != r.shape:
            raise InvalidInputError(f"shape mismatch: {g.shape} vs {r.shape}")
        return np.array([np.vdot(g, r)])

    def embed_tau(self, tau):
        return np.array([float(tau)])

    def _operator_norm_sq(self, G):
        return np.sum(G.reshape(G.shape[0], -1) ** 2, axis=1)

    def as_operator(self, theta):
        return float(self.check_theta(theta)[0])


class Diagonal(Parametrization):
    """``G = diag(theta)`` acting on vec(x)."""

    tag = "diagonal"

    @property
    def param_dim(self):
        return self.n

    def apply(self, theta, g):
        theta = self.check_theta(theta)
        return _unvec(theta, self.shape) * self._check_g(g)

    def adjoint_apply(self, g, r):
        g, r = self._check_g(g), np.asarray(r, dtype=np.float64)
        if g.shape != r.shape:
            raise InvalidInputError(f"shape mismatch: {g.shape} vs {r.shape}")
        prod = (g * r).reshape((-1,) + self.shape).sum(axis=0)
        return _vec(prod, self.shape)

    def embed_tau(self, tau):
        return np.full(self.n, float(tau))

    def expansion(self, G):
        return _DiagonalExpansion(self, self._check_g(G))

    def _operator_norm_sq(self, G):
        return np.max(np.abs(G.reshape(G.shape[0], -1)), axis=1) ** 2

    def as_operator(self, theta):
        return _unvec(self.check_theta(theta), self.shape)


class FullMatrix(Parametrization):
    """``G = P`` with ``P`` an ``n x n`` matrix acting on vec(x)."""

    tag = "full"

    @property
    def param_dim(self):
        return self.n * self.n

    def matrix(self, theta):
        return self.check_theta(theta).reshape(self.n, self.n, order="F")

    def apply(self, theta, g):
        P = self.matrix(theta)
        g = self._check_g(g)
        return _unvec(_vec(g, self.shape) @ P.T, self.shape)

    def adjoint_apply(self, g, r):
        g, r = self._check_g(g), np.asarray(r, dtype=np.float64)
        if g.shape != r.shape:
            raise InvalidInputError(f"shape mismatch: {g.shape} vs {r.shape}")
        gv = _vec(g, self.shape).reshape(-1, self.n)
        rv = _vec(r, self.shape).reshape(-1, self.n)
        # sum_k r_k g_k^T, column-stacked
        return (rv.T @ gv).ravel(order="F")

    def embed_tau(self, tau):
        return (float(tau) * np.eye(self.n)).ravel(order="F")

    def _operator_norm_sq(self, G):
        return np.sum(G.reshape(G.shape[0], -1) ** 2, axis=1)

    def as_operator(self, theta):
        return self.matrix(theta)


class Conv(Parametrization):
    """``G g = kappa * g`` with a centred ``kernel_shape`` kernel, zero padding."""

    tag = "conv"

    def __init__(self, shape, kernel_shape=None):
        super().__init__(shape)
        if len(self.shape) != 2:
            raise InvalidInputError(f"convolutional preconditioning needs 2-D images, got {self.shape}")
        kernel_shape = self.shape if kernel_shape is None else tuple(int(h) for h in kernel_shape)
        self.geometry = KernelGeometry(*kernel_shape)
        self.kernel_shape = self.geometry.shape

    def __repr__(self):
        return f"Conv(shape={self.shape}, kernel_shape={self.kernel_shape})"

    def describe(self):
        return {"tag": self.tag, "shape": list(self.shape), "kernel_shape": list(self.kernel_shape)}

    @property
    def param_dim(self):
        return self.geometry.h1 * self.geometry.h2

    def kernel(self, theta):
        return _unvec(self.check_theta(theta), self.kernel_shape)

    def apply(self, theta, g):
        return conv2d(self.kernel(theta), self._check_g(g))

    def adjoint_apply(self, g, r):
        g, r = self._check_g(g), np.asarray(r, dtype=np.float64)
        if g.shape != r.shape:
            raise InvalidInputError(f"shape mismatch: {g.shape} vs {r.shape}")
        return _vec(kernel_xcorr(r, g, self.kernel_shape), self.kernel_shape)

    def embed_tau(self, tau):
        k = np.zeros(self.kernel_shape)
        k[self.geometry.center] = float(tau)
        return _vec(k, self.kernel_shape)

    def _operator_norm_sq(self, G):
        return self.param_dim * np.sum(G.reshape(G.shape[0], -1) ** 2, axis=1)

    def as_operator(self, theta):
        return self.kernel(theta)

    def expansion(self, G):
        return _ConvFFT(self, self._check_g(G))


class _ConvFFT:
    """Conv expansion for a fixed gradient batch, evaluated with FFTs.

    Images are zero padded to at least ``m + h - 1`` per axis, so circular
    convolution and correlation on the padded grid equal their linear,
    zero-padded counterparts on the original one.
    """

    def __init__(self, param, G):
        self.param = param
        self.G = G
        geom = param.geometry
        m1, m2 = param.shape
        self.P = (sfft.next_fast_len(m1 + geom.h1 - 1, real=True),
                  sfft.next_fast_len(m2 + geom.h2 - 1, real=True))
        self.Gf = sfft.rfft2(G, s=self.P)
        self._batch_axes = tuple(range(G.ndim - 2))
        # kernel offsets -r..r+delta as indices into the padded grid
        self._i1 = np.arange(-geom.r1, geom.r1 + geom.delta1 + 1) % self.P[0]
        self._i2 = np.arange(-geom.r2, geom.r2 + geom.delta2 + 1) % self.P[1]
        self._ix = np.ix_(self._i1, self._i2)

    def apply(self, theta):
        kp = np.zeros(self.P)
        kp[self._ix] = self.param.kernel(theta)
        out = sfft.irfft2(self.Gf * sfft.rfft2(kp), s=self.P)
        m1, m2 = self.param.shape
        return out[..., :m1, :m2]

    def adjoint(self, R):
        R = np.asarray(R, dtype=np.float64)
        if R.shape != self.G.shape:
            raise InvalidInputError(f"shape mismatch: {self.G.shape} vs {R.shape}")
        prod = sfft.rfft2(R, s=self.P) * np.conj(self.Gf)
        if self._batch_axes:
            prod = prod.sum(axis=self._batch_axes)
        corr = sfft.irfft2(prod, s=self.P)
        return _vec(corr[self._ix], self.param.kernel_shape)


def from_tag(tag, shape, kernel_shape=None):
    """Construct a parametrisation from its tag."""
    if tag == "scalar":
        return Scalar(shape)
    if tag == "diagonal":
        return Diagonal(shape)
    if tag == "full":
        return FullMatrix(shape)
    if tag == "conv":
        return Conv(shape, kernel_shape)
    raise InvalidInputError(f"unknown parametrisation {tag!r}; expected one of {TAGS}")
