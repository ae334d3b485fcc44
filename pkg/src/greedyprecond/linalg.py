"""Dense and structured linear algebra primitives.

Everything here works in float64. Images are 2-D arrays indexed ``x[i, j]``
with ``i`` the row (down) and ``j`` the column (right); most image routines
also accept leading batch axes and act on the last two.

Convolution kernels use a centred offset convention. A kernel of shape
``(h1, h2)`` stores offsets ``-r_i .. r_i + delta_i`` along each axis, where
``r_i = (h_i - 1) // 2`` and ``delta_i = 1`` for even ``h_i`` (0 otherwise),
so array index ``(r1, r2)`` holds offset ``(0, 0)``.
"""

from dataclasses import dataclass
import logging

import numpy as np

from .exceptions import CapacityError, InvalidInputError

logger = logging.getLogger(__name__)

__all__ = [
    "KernelGeometry",
    "as_finite",
    "pinv_solve",
    "kron",
    "hadamard",
    "translate",
    "conv2d",
    "kernel_xcorr",
    "op_norm_sq",
    "PINV_RCOND",
    "KRON_MAX_ENTRIES",
]

PINV_RCOND = 1e-12
SYMMETRY_RTOL = 1e-12
KRON_MAX_ENTRIES = 2**26


def as_finite(a, name="array"):
    """Return ``a`` as a float64 array, raising if any entry is NaN or infinite."""
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class KernelGeometry:
    """Offset bookkeeping for a ``h1 x h2`` convolution kernel."""

    h1: int
    h2: int

    def __post_init__(self):
        if self.h1 < 1 or self.h2 < 1:
            raise InvalidInputError(f"kernel dims must be positive, got {(self.h1, self.h2)}")

    @classmethod
    def of(cls, kernel):
        kernel = np.asarray(kernel)
        if kernel.ndim != 2:
            raise InvalidInputError(f"kernel must be 2-D, got shape {kernel.shape}")
        return cls(*kernel.shape)

    @property
    def shape(self):
        return (self.h1, self.h2)

    @property
    def r1(self):
        return (self.h1 - 1) // 2

    @property
    def r2(self):
        return (self.h2 - 1) // 2

    @property
    def delta1(self):
        return 0 if self.h1 % 2 else 1

    @property
    def delta2(self):
        return 0 if self.h2 % 2 else 1

    @property
    def center(self):
        """Array index holding offset (0, 0)."""
        return (self.r1, self.r2)

    def offsets(self):
        """Yield ``(a, b, k1, k2)``: array index and the offset it stores."""
        for a in range(self.h1):
            for b in range(self.h2):
                yield a, b, a - self.r1, b - self.r2


def pinv_solve(M, b, rcond=PINV_RCOND):
    """Least-norm minimiser of ``||M theta - b||`` for symmetric PSD ``M``.

    Uses the eigendecomposition of ``M``; eigenvalues with magnitude below
    ``rcond * max|eig|`` are treated as zero.

    Raises
    ------
    InvalidInputError
        If ``M`` or ``b`` have non-finite entries, the shapes disagree, or
        ``M`` is asymmetric beyond ``1e-12`` relative tolerance.
    """
    M = as_finite(M, "M")
    b = as_finite(b, "b")
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidInputError(f"M must be square, got shape {M.shape}")
    if b.shape != (M.shape[0],):
        raise InvalidInputError(f"b must have shape ({M.shape[0]},), got {b.shape}")
    scale = np.max(np.abs(M)) if M.size else 0.0
    if scale > 0 and np.max(np.abs(M - M.T)) > SYMMETRY_RTOL * scale:
        raise InvalidInputError("M is not symmetric")
    if scale == 0:
        return np.zeros_like(b)
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    cutoff = rcond * np.max(np.abs(w))
    keep = np.abs(w) > cutoff
    coef = (V[:, keep].T @ b) / w[keep]
    return V[:, keep] @ coef


def _as_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        return a[:, None]
    if a.ndim != 2:
        raise InvalidInputError(f"expected a vector or matrix, got shape {a.shape}")
    return a


def kron(A, B, max_entries=KRON_MAX_ENTRIES):
    """Kronecker product; block ``(i, j)`` of the result is ``A[i, j] * B``.

    1-D inputs are read as column vectors, so ``kron(v, w)`` has shape
    ``(len(v) * len(w), 1)``.
    """
    A = _as_matrix(as_finite(A, "A"))
    B = _as_matrix(as_finite(B, "B"))
    (m, n), (p, q) = A.shape, B.shape
    if m * p * n * q > max_entries:
        raise CapacityError(
            f"kron result {m * p}x{n * q} exceeds the cap of {max_entries} entries"
        )
    return np.kron(A, B)


def hadamard(a, b):
    """Element-wise product of two equal-shape arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def _shift_slices(k, m):
    # destination/source index ranges for out[n] = x[n - k] along an axis of length m
    lo, hi = max(0, k), min(m, m + k)
    if lo >= hi:
        return None
    return slice(lo, hi), slice(lo - k, hi - k)


def _shift_add(out, x, k1, k2, coef=1.0):
    m1, m2 = x.shape[-2:]
    s1 = _shift_slices(k1, m1)
    s2 = _shift_slices(k2, m2)
    if s1 is None or s2 is None:
        return
    out[..., s1[0], s2[0]] += coef * x[..., s1[1], s2[1]]


def translate(x, a1, a2):
    """Image translated by ``a1`` pixels down and ``a2`` right, zero filled.

    ``out[i, j] = x[i + a1, j + a2]`` where that index exists, else 0.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    _shift_add(out, x, -int(a1), -int(a2))
    return out


def conv2d(kernel, x):
    """Zero-padded 2-D convolution with a centred kernel, same-size output.

    ``out[n1, n2] = sum_k kernel(k1, k2) * x[n1 - k1, n2 - k2]`` with offsets
    ``k`` ranging over the kernel geometry. Direct summation over the taps;
    ``x`` may carry leading batch axes.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    geom = KernelGeometry.of(kernel)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise InvalidInputError(f"image must be at least 2-D, got shape {x.shape}")
    out = np.zeros_like(x)
    for a, b, k1, k2 in geom.offsets():
        c = kernel[a, b]
        if c != 0.0:
            _shift_add(out, x, k1, k2, c)
    return out


def kernel_xcorr(r, g, kernel_shape):
    """Gradient of ``kappa -> <r, kappa * g>`` laid out as a kernel.

    Entry for offset ``(i, j)`` is ``sum_n r[n] * g[n - (i, j)]``, summed over
    any leading batch axes as well.
    """
    r = np.asarray(r, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if r.shape != g.shape:
        raise InvalidInputError(f"shape mismatch: {r.shape} vs {g.shape}")
    geom = KernelGeometry(*kernel_shape)
    m1, m2 = g.shape[-2:]
    out = np.zeros(geom.shape)
    for a, b, k1, k2 in geom.offsets():
        s1 = _shift_slices(k1, m1)
        s2 = _shift_slices(k2, m2)
        if s1 is None or s2 is None:
            continue
        out[a, b] = np.vdot(r[..., s1[0], s2[0]], g[..., s1[1], s2[1]])
    return out


def op_norm_sq(apply, adjoint_apply, shape, iters=1000, tol=1e-10, seed=0,
               check_adjoint=False):
    """Power-iteration estimate of ``||A||^2`` for a linear map given as a pair.

    Iterates ``v <- A^T A v / ||A^T A v||`` from a seeded random start and
    returns the Rayleigh quotient ``||A v||^2``, which is nondecreasing in
    the iteration count. Stops once successive estimates agree to ``tol``
    relatively.

    Parameters
    ----------
    apply, adjoint_apply : callable
        ``x -> A x`` and ``z -> A^T z``.
    shape : int or tuple
        Shape of the domain arrays.
    check_adjoint : bool
        Verify ``<A x, z> == <x, A^T z>`` on random inputs first.
    """
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    rng = np.random.default_rng(seed)
    if check_adjoint:
        x = rng.standard_normal(shape)
        Ax = np.asarray(apply(x))
        z = rng.standard_normal(Ax.shape)
        lhs = np.vdot(Ax, z)
        rhs = np.vdot(x, adjoint_apply(z))
        if abs(lhs - rhs) > 1e-9 * max(1.0, abs(lhs), abs(rhs)):
            raise InvalidInputError(f"apply/adjoint_apply are not adjoint: {lhs} vs {rhs}")
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for it in range(iters):
        Av = apply(v)
        new = float(np.vdot(Av, Av))
        if new == 0.0:
            return 0.0
        w = adjoint_apply(Av)
        wn = np.linalg.norm(w)
        converged = it > 0 and abs(new - est) <= tol * new
        est = max(est, new)
        if converged or wn == 0.0:
            break
        v = w / wn
    else:
        logger.debug("op_norm_sq: no convergence after %d iterations", iters)
    return est
