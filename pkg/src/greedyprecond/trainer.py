"""Greedy, safeguarded training of per-iteration preconditioners.

At outer iteration ``t`` all training trajectories sit at ``x_k^t``. The
parameters ``theta_t`` minimise the mean objective after one step,

    g_t(theta) = mean_k f_k(x_k^t - G_theta grad f_k(x_k^t)),

which is convex because ``theta -> G_theta g`` is affine. The inner solver
is gradient descent (optionally accelerated) with step ``1 / L_g``. A
safeguard ``theta_tilde`` with ``G = tau * I`` is always available; when the
solver ends above ``g_t(theta_tilde)`` the safeguard is used instead, which
makes the training loss provably converge.
"""

from dataclasses import asdict, dataclass, field
import hashlib
import json
import logging
import math
import time

import numpy as np

from .exceptions import InvalidInputError, NumericalFailure
from .objectives import ObjectiveStack, stack as stack_objectives

logger = logging.getLogger(__name__)

__all__ = [
    "TrainerConfig",
    "GreedySubproblem",
    "InnerResult",
    "inner_solve",
    "PreconditionerSchedule",
    "TrainingTrace",
    "train",
    "safeguard_step",
    "RateReport",
    "rate_bounds",
]


@dataclass
class TrainerConfig:
    """Training hyperparameters.

    ``inner_solver`` is ``"plain"`` (gradient descent) or ``"accelerated"``
    (Nesterov momentum with gradient-based restart). ``init`` picks the
    inner starting point: ``"safeguard"`` starts from ``theta_tilde``,
    ``"warm"`` from the previous outer iteration's parameters.
    ``tau_policy`` is ``"smooth"`` (``1 / L_max``) or ``"strong"``
    (``2 / (mu_min + L_max)``, needs every ``mu_k``).
    """

    T: int = 100
    inner_cap: int = 5000
    nu: float = 1e-3
    inner_solver: str = "plain"
    init: str = "safeguard"
    safeguard: bool = True
    tau_policy: str = "smooth"
    record_inner: bool = False

    def __post_init__(self):
        if self.T < 1 or self.inner_cap < 1:
            raise InvalidInputError("T and inner_cap must be at least 1")
        if not self.nu > 0:
            raise InvalidInputError("nu must be positive")
        if self.inner_solver not in ("plain", "accelerated"):
            raise InvalidInputError(f"unknown inner solver {self.inner_solver!r}")
        if self.init not in ("safeguard", "warm"):
            raise InvalidInputError(f"unknown init policy {self.init!r}")
        if self.tau_policy not in ("smooth", "strong"):
            raise InvalidInputError(f"unknown tau policy {self.tau_policy!r}")

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def safeguard_step(L_list, mu_list=None, policy="smooth"):
    """The classical step ``tau`` embedded by the safeguard parameters."""
    L_max = float(np.max(L_list))
    if policy == "strong":
        if mu_list is None or any(m is None for m in np.atleast_1d(mu_list)):
            raise InvalidInputError("strong tau policy needs every strong-convexity constant")
        mu_min = float(np.min(np.asarray(mu_list, dtype=np.float64)))
        return 2.0 / (mu_min + L_max)
    return 1.0 / L_max


class GreedySubproblem:
    """``g_t`` for a batch of objectives frozen at iterates ``X``.

    Parameters
    ----------
    objectives : stack or list of Objective
    X : array, shape ``(N, *shape)``
    param : Parametrization
    tau : float
        Safeguard step; ``theta_tilde = param.embed_tau(tau)``.
    """

    def __init__(self, objectives, X, param, tau, G=None):
        if isinstance(objectives, ObjectiveStack):
            self.stack = objectives
        else:
            self.stack = stack_objectives(objectives)
        self.X = np.asarray(X, dtype=np.float64)
        self.param = param
        self.N = len(self.stack)
        if param.shape != self.stack.shape:
            raise InvalidInputError(
                f"parametrisation shape {param.shape} does not match objectives {self.stack.shape}"
            )
        self.G = self.stack.grad(self.X) if G is None else np.asarray(G, dtype=np.float64)
        self.tau = float(tau)
        self.theta_tilde = param.embed_tau(tau)
        self.L_g = param.lipschitz_bound(self.G, self.stack.L)
        self._expansion = param.expansion(self.G)

    def step(self, theta):
        """Iterates after one step with parameters ``theta``."""
        return self.X - self._expansion.apply(theta)

    def values(self, theta):
        """Per-objective values ``f_k(x_k - G_theta g_k)``."""
        return self.stack.value(self.step(theta))

    def eval_g(self, theta):
        return float(np.mean(self.values(theta)))

    def grad_g(self, theta):
        R = self.stack.grad(self.step(theta))
        return -self._expansion.adjoint(R) / self.N


@dataclass
class InnerResult:
    """How an inner solve ended."""

    iterations: int
    grad_ratio: float
    g_exit: float
    g_tilde: float
    fallback: bool = False
    stationary: bool = False
    history: list = field(default_factory=list)


def _norm_checked(grad, w):
    # the norm is non-finite exactly when some entry is (or the sum overflows)
    sq = float(np.dot(grad, grad))
    if not np.isfinite(sq):
        raise NumericalFailure("non-finite gradient in inner solve", iteration=w)
    return math.sqrt(sq)


def inner_solve(sub, config, theta0=None):
    """Approximately minimise ``g_t``; returns ``(theta, InnerResult)``.

    Stops once ``||grad g(theta_w)|| / ||grad g(theta_tilde)|| < nu`` or after
    ``config.inner_cap`` steps. With the safeguard on, an exit value above
    ``g_t(theta_tilde)`` is replaced by ``theta_tilde``.

    Raises
    ------
    NumericalFailure
        On a non-finite gradient or value; ``iteration`` holds the step index.
    """
    theta_tilde = sub.theta_tilde
    grad_tilde = sub.grad_g(theta_tilde)
    ref = float(np.linalg.norm(grad_tilde))
    if not np.isfinite(ref):
        raise NumericalFailure("non-finite gradient at the safeguard parameters", iteration=0)
    if ref == 0.0 or sub.L_g == 0.0:
        g_tilde = sub.eval_g(theta_tilde)
        if not np.isfinite(g_tilde):
            raise NumericalFailure("non-finite training objective at the safeguard parameters", iteration=0)
        return theta_tilde.copy(), InnerResult(0, 0.0, g_tilde, g_tilde, stationary=True)

    if config.init == "warm" and theta0 is not None:
        theta = sub.param.check_theta(theta0).copy()
        grad = sub.grad_g(theta)
    else:
        theta = theta_tilde.copy()
        grad = grad_tilde
    step = 1.0 / sub.L_g
    history = []
    ratio = np.inf
    w = 0

    if config.inner_solver == "plain":
        while True:
            ratio = _norm_checked(grad, w) / ref
            if config.record_inner:
                history.append(sub.eval_g(theta))
            if ratio < config.nu or w >= config.inner_cap:
                break
            theta = theta - step * grad
            w += 1
            grad = sub.grad_g(theta)
    else:
        # accelerated gradient with gradient-based momentum restart; the
        # stopping test is applied at the extrapolated point, which is then returned
        y = theta
        t_k = 1.0
        while True:
            ratio = _norm_checked(grad, w) / ref
            if ratio < config.nu:
                theta = y
                break
            if w >= config.inner_cap:
                break
            theta_next = y - step * grad
            if np.vdot(grad, theta_next - theta) > 0:
                t_k = 1.0
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_k * t_k))
            y = theta_next + ((t_k - 1.0) / t_next) * (theta_next - theta)
            theta, t_k = theta_next, t_next
            w += 1
            if config.record_inner:
                history.append(sub.eval_g(theta))
            grad = sub.grad_g(y)

    g_exit = sub.eval_g(theta)
    g_tilde = sub.eval_g(theta_tilde)
    if not np.isfinite(g_exit):
        raise NumericalFailure("non-finite training objective at inner exit", iteration=w)
    result = InnerResult(w, ratio, g_exit, g_tilde, history=history)
    if config.safeguard and g_exit > g_tilde:
        result.fallback = True
        result.g_exit = g_tilde
        return theta_tilde.copy(), result
    return theta, result


@dataclass
class PreconditionerSchedule:
    """Learned parameters ``theta_0 .. theta_{T-1}`` for one parametrisation."""

    param: object
    thetas: list
    tau: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.thetas = [self.param.check_theta(th) for th in self.thetas]

    def __len__(self):
        return len(self.thetas)

    @property
    def T(self):
        return len(self.thetas)


@dataclass
class TrainingTrace:
    """Per-outer-iteration diagnostics.

    ``F`` and ``f`` have ``T + 1`` rows (including the start); the other
    columns have ``T`` rows. ``F_safeguard[t]`` is ``g_t(theta_tilde)``, the
    training loss one plain step of size ``tau`` would have reached.
    """

    F: list = field(default_factory=list)
    f: list = field(default_factory=list)
    F_safeguard: list = field(default_factory=list)
    grad_ratio: list = field(default_factory=list)
    inner_iters: list = field(default_factory=list)
    fallback: list = field(default_factory=list)
    stationary: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def rows(self):
        """One dict per outer iteration ``t`` (the final ``F`` row has no inner data)."""
        out = []
        for t, F in enumerate(self.F):
            row = {"t": t, "F": F}
            if t < len(self.grad_ratio):
                row.update(
                    F_safeguard=self.F_safeguard[t],
                    grad_ratio=self.grad_ratio[t],
                    inner_iters=self.inner_iters[t],
                    fallback=int(self.fallback[t]),
                )
            out.append(row)
        return out


def train(dataset, param, config=None, provenance=None, callback=None):
    """Learn a preconditioner schedule on ``dataset``.

    Parameters
    ----------
    dataset : sequence of (Objective, x0)
    param : Parametrization
    config : TrainerConfig, optional
    provenance : dict, optional
        Extra metadata copied into the schedule (dataset descriptor, seed).
    callback : callable, optional
        Called as ``callback(t, theta, info)`` after every outer iteration.

    Returns
    -------
    (PreconditionerSchedule, TrainingTrace)
    """
    config = TrainerConfig() if config is None else config
    dataset = list(dataset)
    if not dataset:
        raise InvalidInputError("empty training set")
    objs = [f for f, _ in dataset]
    fstack = stack_objectives(objs)
    X = np.stack([np.asarray(x0, dtype=np.float64) for _, x0 in dataset])
    if X.shape[1:] != fstack.shape:
        raise InvalidInputError(f"initial points have shape {X.shape[1:]}, expected {fstack.shape}")
    tau = safeguard_step(fstack.L, fstack.mu if fstack.mu is not None else None, config.tau_policy)

    trace = TrainingTrace()
    thetas = []
    prev = None
    f_vals = fstack.value(X)
    for t in range(config.T):
        tic = time.perf_counter()
        trace.F.append(float(np.mean(f_vals)))
        trace.f.append(f_vals.copy())
        sub = GreedySubproblem(fstack, X, param, tau)
        try:
            theta, info = inner_solve(sub, config, theta0=prev)
        except NumericalFailure as exc:
            exc.outer = t
            raise
        X = sub.step(theta)
        f_vals = fstack.value(X)
        thetas.append(theta)
        prev = theta
        trace.F_safeguard.append(info.g_tilde)
        trace.grad_ratio.append(info.grad_ratio)
        trace.inner_iters.append(info.iterations)
        trace.fallback.append(info.fallback)
        trace.stationary.append(info.stationary)
        trace.seconds.append(time.perf_counter() - tic)
        logger.info("t=%d F=%.6e inner=%d ratio=%.2e fallback=%s",
                    t, trace.F[-1], info.iterations, info.grad_ratio, info.fallback)
        if callback is not None:
            callback(t, theta, info)
    trace.F.append(float(np.mean(f_vals)))
    trace.f.append(f_vals.copy())

    meta = {"config": asdict(config), "config_hash": config.digest(), "N": len(dataset)}
    meta.update(provenance or {})
    schedule = PreconditionerSchedule(param, thetas, tau, meta)
    return schedule, trace


@dataclass
class RateReport:
    """Training-set rate checks.

    ``bound[t]`` is ``max(L) / (2 t N) * ||x0 - x*||^2`` (``inf`` at ``t = 0``);
    ``violations`` lists the ``t`` with ``F(x_t) - F* > bound[t]``.
    ``M[i]`` is the per-function constant (``None`` when ``f_i`` starts at its
    optimum). ``linear_factor`` is ``1 - mu_min / L_max`` when every ``mu`` is
    known; ``stated_factor`` is ``1 - L_max / mu_min`` as it appears in the
    source analysis, kept for reference and flagged when non-contractive.
    """

    bound: np.ndarray
    violations: list
    M: list
    linear_factor: float = None
    stated_factor: float = None
    stated_factor_contractive: bool = None
    linear_bound: np.ndarray = None
    linear_violations: list = None


def rate_bounds(trace, L_list, dist_sq, F_star, f_star=None, mu_list=None, slack=1e-12):
    """Evaluate the training-set convergence guarantees along ``trace``.

    Parameters
    ----------
    trace : TrainingTrace
    L_list : sequence of float
    dist_sq : float
        ``||x0 - x*||^2`` for the stacked trajectories.
    F_star : float
        Optimal mean training loss.
    f_star : sequence of float, optional
        Per-objective optima; needed for the constants ``M_i``.
    mu_list : sequence of float, optional
    """
    L_list = np.asarray(L_list, dtype=np.float64)
    N = L_list.size
    F = np.asarray(trace.F, dtype=np.float64)
    t = np.arange(F.size, dtype=np.float64)
    with np.errstate(divide="ignore"):
        bound = np.where(t > 0, L_list.max() / (2.0 * np.maximum(t, 1) * N) * dist_sq, np.inf)
    gap = F - F_star
    violations = [int(i) for i in range(1, F.size) if gap[i] > bound[i] + slack]

    M = None
    if f_star is not None:
        f0 = np.asarray(trace.f[0], dtype=np.float64)
        gaps0 = f0 - np.asarray(f_star, dtype=np.float64)
        total = gaps0.sum()
        M = [None if g <= 0 else float(1.0 + (total - g) / g) for g in gaps0]

    report = RateReport(bound, violations, M)
    if mu_list is not None and all(m is not None for m in mu_list):
        mu_min = float(np.min(mu_list))
        L_max = float(L_list.max())
        report.linear_factor = 1.0 - mu_min / L_max
        report.stated_factor = 1.0 - L_max / mu_min
        report.stated_factor_contractive = abs(report.stated_factor) < 1.0
        report.linear_bound = report.linear_factor ** t * gap[0]
        report.linear_violations = [
            int(i) for i in range(1, F.size) if gap[i] > report.linear_bound[i] + slack
        ]
    return report
