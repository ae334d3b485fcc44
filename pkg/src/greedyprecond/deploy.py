"""Running learned schedules on new objectives, and classical baselines.

Every runner returns a :class:`RunTrace` with one entry per iterate,
``x_0`` included. A run stops early and sets ``diverged`` when the objective
becomes non-finite or exceeds ``1e12 * f(x_0)``.
"""

from dataclasses import dataclass, field
import enum
import json
import struct
import time
import warnings

import numpy as np
from scipy.optimize import line_search

from .exceptions import InvalidInputError, NumericalFailure, ParseError
from .objectives import stack as stack_objectives
from .preconditioners import from_tag
from .trainer import PreconditionerSchedule

__all__ = [
    "DeployPolicy",
    "RunTrace",
    "run_schedule",
    "gd_fixed",
    "backtracking_gd",
    "exact_line_search_ls",
    "fista",
    "fista_momentum",
    "bfgs",
    "reference_optimum",
    "reference_optima",
    "save_schedule",
    "load_schedule",
    "SCHEDULE_MAGIC",
    "SCHEDULE_VERSION",
]

DIVERGENCE_FACTOR = 1e12
_EPS = np.finfo(np.float64).eps


class DeployPolicy(enum.Enum):
    """What to use after the last learned parameters."""

    FREEZE = "freeze"
    RECYCLE = "recycle"

    def index(self, t, T):
        if self is DeployPolicy.RECYCLE:
            return t % T
        return min(t, T - 1)


@dataclass
class RunTrace:
    """Iterate-by-iterate record of one optimisation run.

    ``monotone`` says whether the method guarantees a nonincreasing
    objective (plain descent with a safe step, line searches); accelerated
    methods and learned schedules are labelled non-monotone.
    """

    label: str
    f: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    time: list = field(default_factory=list)
    diverged: bool = False
    monotone: bool = True
    f_star: float = None
    snapshots: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.f)

    @property
    def x(self):
        return self.meta.get("x_final")


class _Recorder:
    def __init__(self, f, label, f_star, monotone, record_at):
        self.f = f
        self.trace = RunTrace(label=label, monotone=monotone, f_star=f_star)
        self.record_at = set(record_at or ())
        self.t0 = time.perf_counter()
        self.limit = None

    def record(self, t, x, fx=None, gx=None):
        """Append iterate ``t``; returns False when the run has diverged."""
        fx = self.f.value(x) if fx is None else fx
        tr = self.trace
        if not np.isfinite(fx) or (self.limit is not None and fx > self.limit):
            tr.diverged = True
            return False
        if self.limit is None:
            self.limit = DIVERGENCE_FACTOR * fx if fx > 0 else np.inf
        gx = self.f.grad(x) if gx is None else gx
        tr.f.append(float(fx))
        tr.gap.append(float(fx - tr.f_star) if tr.f_star is not None else None)
        tr.grad_norm.append(float(np.linalg.norm(gx)))
        tr.time.append(time.perf_counter() - self.t0)
        if t in self.record_at:
            tr.snapshots[t] = np.array(x, copy=True)
        tr.meta["x_final"] = x
        return True


def _start(f, x0):
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != f.shape:
        raise InvalidInputError(f"x0 has shape {x0.shape}, expected {f.shape}")
    return x0.copy()


def run_schedule(f, x0, schedule, policy=DeployPolicy.FREEZE, iters=100, f_star=None,
                 record_at=(), label=None):
    """``x_{t+1} = x_t - G_{theta_sel(t)} grad f(x_t)`` with ``sel`` from ``policy``."""
    policy = DeployPolicy(policy)
    param = schedule.param
    if param.shape != f.shape:
        raise InvalidInputError(f"schedule is for shape {param.shape}, objective has {f.shape}")
    label = label or f"learned-{param.tag}-{policy.value}"
    rec = _Recorder(f, label, f_star, False, record_at)
    x = _start(f, x0)
    used = []
    g = f.grad(x)
    if rec.record(0, x, gx=g):
        for t in range(iters):
            i = policy.index(t, schedule.T)
            used.append(i)
            x = x - param.apply(schedule.thetas[i], g)
            g = f.grad(x)
            if not np.all(np.isfinite(x)) or not rec.record(t + 1, x, gx=g):
                rec.trace.diverged = True
                break
    rec.trace.meta["theta_index"] = used
    return rec.trace


def gd_fixed(f, x0, step, iters=100, f_star=None, record_at=(), label="gd-fixed"):
    """Gradient descent with a constant step."""
    if not step > 0:
        raise InvalidInputError("step must be positive")
    rec = _Recorder(f, label, f_star, step <= 1.0 / f.L * (1 + 1e-12), record_at)
    x = _start(f, x0)
    g = f.grad(x)
    if rec.record(0, x, gx=g):
        for t in range(iters):
            x = x - step * g
            g = f.grad(x)
            if not rec.record(t + 1, x, gx=g):
                break
    return rec.trace


def backtracking_gd(f, x0, iters=100, c=1e-4, rho=0.5, step0=1.0, f_star=None,
                    record_at=(), label="backtracking", max_backtracks=100):
    """Gradient descent with Armijo backtracking restarted from ``step0`` each iteration."""
    if not (0 < c < 1 and 0 < rho < 1):
        raise InvalidInputError("need 0 < c < 1 and 0 < rho < 1")
    rec = _Recorder(f, label, f_star, True, record_at)
    x = _start(f, x0)
    fx, g = f.value(x), f.grad(x)
    steps = []
    if rec.record(0, x, fx, g):
        for t in range(iters):
            gg = float(np.vdot(g, g))
            s = step0
            for _ in range(max_backtracks + 1):
                x_new = x - s * g
                f_new = f.value(x_new)
                if f_new <= fx - c * s * gg:
                    break
                s *= rho
            else:
                raise NumericalFailure(f"more than {max_backtracks} backtracks", iteration=t)
            steps.append(s)
            x, fx = x_new, f_new
            g = f.grad(x)
            if not rec.record(t + 1, x, fx, g):
                break
    rec.trace.meta["steps"] = steps
    return rec.trace


def exact_line_search_ls(p, x0, iters=100, f_star=None, record_at=(), label="exact-line-search"):
    """Exact line search for a least-squares objective: step ``||g||^2 / ||A g||^2``."""
    if not hasattr(p, "apply_A"):
        raise InvalidInputError("exact line search needs least-squares structure")
    rec = _Recorder(p, label, f_star, True, record_at)
    x = _start(p, x0)
    g = p.grad(x)
    steps = []
    if rec.record(0, x, gx=g):
        for t in range(iters):
            Ag = p.apply_A(g)
            den = float(np.vdot(Ag, Ag))
            alpha = float(np.vdot(g, g)) / den if den > 0 else 0.0
            steps.append(alpha)
            x = x - alpha * g
            g = p.grad(x)
            if not rec.record(t + 1, x, gx=g):
                break
    rec.trace.meta["steps"] = steps
    return rec.trace


def fista_momentum(count):
    """First ``count`` terms of ``t_1 = 1, t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2``."""
    ts = [1.0]
    while len(ts) < count:
        t = ts[-1]
        ts.append(0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t)))
    return ts[:count]


def fista(f, x0, iters=100, f_star=None, record_at=(), label="fista"):
    """Accelerated gradient method with constant step ``1 / L`` (no proximal term)."""
    rec = _Recorder(f, label, f_star, False, record_at)
    x = _start(f, x0)
    step = 1.0 / f.L
    y, t_k = x.copy(), 1.0
    if rec.record(0, x):
        for t in range(iters):
            x_new = y - step * f.grad(y)
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_k * t_k))
            y = x_new + ((t_k - 1.0) / t_next) * (x_new - x)
            x, t_k = x_new, t_next
            if not rec.record(t + 1, x):
                break
    return rec.trace


def bfgs(f, x0, iters=100, c1=1e-4, c2=0.9, f_star=None, record_at=(), label="bfgs",
         max_n=4096, max_ls=50):
    """BFGS with a dense inverse-Hessian approximation and a Wolfe line search.

    ``H_0 = I``; curvature pairs with ``<s, y> <= 1e-12 ||s|| ||y||`` are skipped.
    ``meta`` records the accepted step lengths, skipped updates and the
    largest asymmetry ``max|H - H^T|`` seen.
    """
    x = _start(f, x0)
    shape = x.shape
    n = x.size
    if n > max_n:
        raise InvalidInputError(f"dense BFGS limited to n <= {max_n}")
    rec = _Recorder(f, label, f_star, True, record_at)
    fun = lambda v: f.value(v.reshape(shape))
    jac = lambda v: f.grad(v.reshape(shape)).reshape(-1)
    H = np.eye(n)
    xv = x.reshape(-1)
    fx, g = f.value(x), jac(xv)
    meta = {"steps": [], "skipped": 0, "asymmetry": 0.0}
    if rec.record(0, x, fx, g.reshape(shape)):
        for t in range(iters):
            if not np.any(g):
                # stationary: keep recording the same point
                rec.record(t + 1, xv.reshape(shape), fx, g.reshape(shape))
                continue
            d = -H @ g
            with warnings.catch_warnings():
                # a failed search is reported through alpha is None
                warnings.filterwarnings("ignore", message="The line search algorithm")
                alpha, _, _, f_new, _, g_new = line_search(
                    fun, jac, xv, d, gfk=g, old_fval=fx, c1=c1, c2=c2, maxiter=max_ls
                )
            if alpha is None:
                # a directional derivative below rounding level of f means
                # no representable decrease is left: hold the point
                if -float(g @ d) <= _EPS * max(abs(fx), np.finfo(float).tiny):
                    meta["stalled"] = t
                    rec.record(t + 1, xv.reshape(shape), fx, g.reshape(shape))
                    continue
                raise NumericalFailure("Wolfe line search failed", iteration=t)
            s = alpha * d
            x_new = xv + s
            if g_new is None:
                g_new = jac(x_new)
            yv = g_new - g
            sy = float(s @ yv)
            if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
                rho = 1.0 / sy
                Hy = H @ yv
                # (I - rho s y^T) H (I - rho y s^T) + rho s s^T, expanded
                H = (H - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                     + (rho * rho * float(yv @ Hy) + rho) * np.outer(s, s))
            else:
                meta["skipped"] += 1
            meta["asymmetry"] = max(meta["asymmetry"], float(np.max(np.abs(H - H.T))))
            meta["steps"].append(float(alpha))
            xv, g = x_new, g_new
            fx = f.value(xv.reshape(shape)) if f_new is None else f_new
            if not rec.record(t + 1, xv.reshape(shape), fx, g.reshape(shape)):
                break
    meta["H"] = H
    rec.trace.meta.update(meta)
    return rec.trace


def reference_optima(objectives, X0, tol=1e-10, max_iter=50_000):
    """High-accuracy minimisers for a batch of objectives.

    Runs the accelerated method with step ``1 / L_k`` on all problems at
    once. Momentum is restarted per problem whenever the gradient makes an
    obtuse angle with the last step. The stopping test uses the gradient at
    the extrapolated point, so each iteration costs one batched gradient.
    A problem stops once its gradient norm is at most ``tol``; the point with
    the smallest gradient norm seen is returned.

    Returns
    -------
    X_star : array ``(N, *shape)``
    f_star : array ``(N,)``
    info : dict
        ``grad_norm`` (achieved, per problem), ``converged`` (bool array),
        ``iterations``.
    """
    fs = objectives if hasattr(objectives, "objectives") else stack_objectives(objectives)
    Y = np.array(X0, dtype=np.float64, copy=True)
    N = Y.shape[0]
    bshape = (N,) + (1,) * (Y.ndim - 1)
    step = (1.0 / fs.L).reshape(bshape)
    X = Y.copy()
    t_k = np.ones(N)
    best_X = Y.copy()
    best_g = np.full(N, np.inf)
    active = np.ones(N, dtype=bool)
    it = 0
    while True:
        G = fs.grad(Y)
        gnorm = np.sqrt(np.sum(G.reshape(N, -1) ** 2, axis=1))
        better = active & (gnorm < best_g)
        best_X[better] = Y[better]
        best_g[better] = gnorm[better]
        active &= gnorm > tol
        if not np.any(active) or it >= max_iter:
            break
        it += 1
        X_new = Y - step * G
        restart = np.sum((G * (X_new - X)).reshape(N, -1), axis=1) > 0
        t_k = np.where(restart, 1.0, t_k)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_k * t_k))
        beta = ((t_k - 1.0) / t_next).reshape(bshape)
        Y_new = X_new + beta * (X_new - X)
        act = active.reshape(bshape)
        X = np.where(act, X_new, X)
        Y = np.where(act, Y_new, Y)
        t_k = np.where(active, t_next, t_k)
    info = {"grad_norm": best_g, "converged": best_g <= tol, "iterations": it}
    return best_X, fs.value(best_X), info


def reference_optimum(f, x0, tol=1e-10, max_iter=50_000):
    """``(x*, f*, info)`` for one objective; see :func:`reference_optima`."""
    X, fv, info = reference_optima([f], np.asarray(x0, dtype=np.float64)[None], tol, max_iter)
    return X[0], float(fv[0]), {
        "grad_norm": float(info["grad_norm"][0]),
        "converged": bool(info["converged"][0]),
        "iterations": info["iterations"],
    }


# ---------------------------------------------------------------------------
# Schedule files
#
# offset  size   field
# 0       8      magic b"GPSCHED\0"
# 8       4      format version, uint32 little-endian
# 12      4      header length H in bytes, uint32 little-endian
# 16      H      UTF-8 JSON header: tag, shape, kernel_shape (conv only),
#                T, param_dim, tau, provenance
# 16+H    8*T*r  parameters, float64 little-endian, row t = theta_t

SCHEDULE_MAGIC = b"GPSCHED\x00"
SCHEDULE_VERSION = 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def save_schedule(schedule, path):
    """Write ``schedule`` in the versioned binary format described above."""
    param = schedule.param
    header = dict(param.describe())
    header.update(
        T=schedule.T,
        param_dim=param.param_dim,
        tau=float(schedule.tau),
        provenance=_jsonable(schedule.provenance),
    )
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.stack(schedule.thetas).astype("<f8", copy=False)
    with open(path, "wb") as fh:
        fh.write(SCHEDULE_MAGIC)
        fh.write(struct.pack("<II", SCHEDULE_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload.tobytes(order="C"))


def load_schedule(path):
    """Read a schedule written by :func:`save_schedule`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16:
        raise ParseError(f"{path}: truncated schedule header")
    if data[:8] != SCHEDULE_MAGIC:
        raise ParseError(f"{path}: not a schedule file (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != SCHEDULE_VERSION:
        raise ParseError(f"{path}: unsupported schedule version {version}")
    if len(data) < 16 + hlen:
        raise ParseError(f"{path}: truncated schedule header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt schedule header: {exc}") from exc
    T, r = int(header["T"]), int(header["param_dim"])
    body = data[16 + hlen:]
    if len(body) != 8 * T * r:
        raise ParseError(f"{path}: expected {8 * T * r} payload bytes, found {len(body)}")
    param = from_tag(header["tag"], header["shape"], header.get("kernel_shape"))
    if param.param_dim != r:
        raise ParseError(f"{path}: header param_dim {r} disagrees with {param!r}")
    thetas = np.frombuffer(body, dtype="<f8").reshape(T, r).astype(np.float64)
    return PreconditionerSchedule(param, list(thetas), header["tau"], header.get("provenance", {}))
