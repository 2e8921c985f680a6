"""Vector-valued root finding with adaptive IS, Jacobian estimates and the delta method."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import engines
from .core import (
    Box,
    ISFamily,
    NoTruncation,
    RootProblem,
    RunTrace,
    StepsizeSchedule,
    TruncationSchedule,
    as_box,
    make_rng,
    project_box,
)
from .engines import SAA, SolverKind
from .errors import ConfigurationError, DomainError, SolverError, UsageError

COND_LIMIT = 1e12


@dataclass(frozen=True)
class JacobianEstimate:
    """``D/Dtheta`` of the weighted empirical mean of ``F`` at ``at_theta``."""

    matrix: np.ndarray
    at_theta: np.ndarray
    n_samples: int
    well_conditioned: bool = True

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        if not np.all(np.isfinite(m)):
            raise DomainError("Jacobian estimate has non-finite entries")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "at_theta", np.atleast_1d(np.asarray(self.at_theta, dtype=np.float64)))


@dataclass(frozen=True)
class PerformanceFunction:
    """Scalar summary ``g(theta)`` reported through the delta method."""

    g: Callable[[np.ndarray], float]
    grad_g: Callable[[np.ndarray], np.ndarray]

    def __call__(self, theta) -> float:
        return float(self.g(np.asarray(theta, dtype=np.float64)))

    def gradient(self, theta) -> np.ndarray:
        return np.asarray(self.grad_g(np.asarray(theta, dtype=np.float64)), dtype=np.float64)

    def gradient_error(self, theta, step: float = 1e-6) -> float:
        """Max relative gap between ``grad_g`` and central differences of ``g``."""
        th = np.asarray(theta, dtype=np.float64)
        fd = np.empty_like(th)
        for j in range(th.size):
            e = np.zeros_like(th)
            e[j] = step * max(1.0, abs(th[j]))
            fd[j] = (self(th + e) - self(th - e)) / (2 * e[j])
        an = self.gradient(th)
        return float(np.max(np.abs(an - fd) / np.maximum(1.0, np.abs(fd))))


def kernel_bandwidth(h_values, n: Optional[int] = None, c: Optional[float] = None) -> float:
    """Finite-difference step ``c * n**(-1/5)`` for indicator-type outputs.

    ``c`` defaults to the sample standard deviation of ``h_values``.
    """
    h = np.asarray(h_values, dtype=np.float64)
    n = h.shape[0] if n is None else n
    if n < 2:
        raise UsageError("need at least two values")
    scale = float(np.std(h, ddof=1)) if c is None else float(c)
    return scale * n ** (-0.2)


def _weighted_mean_outputs(problem: RootProblem, x, w, theta) -> np.ndarray:
    out = problem.outputs(x, theta)
    return (out * w[:, None]).mean(axis=0)


def estimate_jacobian(
    x: np.ndarray,
    log_lr: np.ndarray,
    problem: RootProblem,
    theta,
    fd_step: Optional[float] = None,
) -> JacobianEstimate:
    """Jacobian of ``theta -> (1/n) sum F(x_i, theta) l_i``.

    Uses ``problem.jacobian`` when available, otherwise central differences
    with step ``fd_step`` (default ``1e-6 * max(1, |theta_j|)``). The estimate
    is flagged when its condition number exceeds ``1e12``.
    """
    th = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    w = np.exp(np.asarray(log_lr, dtype=np.float64))
    if len(w) == 0:
        raise UsageError("need at least one sample")
    d = problem.dim
    if problem.jacobian is not None:
        jac = np.asarray(problem.jacobian(x, th), dtype=np.float64).reshape(len(w), d, d)
        m = (jac * w[:, None, None]).mean(axis=0)
    else:
        m = np.empty((d, d))
        for j in range(d):
            hstep = fd_step if fd_step is not None else 1e-6 * max(1.0, abs(th[j]))
            e = np.zeros(d)
            e[j] = hstep
            m[:, j] = (_weighted_mean_outputs(problem, x, w, th + e) - _weighted_mean_outputs(problem, x, w, th - e)) / (
                2.0 * hstep
            )
    cond = np.linalg.cond(m) if np.all(np.isfinite(m)) else np.inf
    return JacobianEstimate(m, th, len(w), bool(cond <= COND_LIMIT))


def delta_method_variance(J, sigma, grad_g) -> float:
    """``grad_g^T J^{-T} Sigma J^{-1} grad_g``.

    Raises:
        DomainError: if ``J`` is singular.
    """
    J = np.atleast_2d(np.asarray(J, dtype=np.float64))
    S = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    gvec = np.atleast_1d(np.asarray(grad_g, dtype=np.float64))
    if np.linalg.cond(J) > COND_LIMIT:
        raise DomainError("Jacobian is singular")
    v = np.linalg.solve(J.T, gvec)  # J^{-T} grad_g
    return max(0.0, float(v @ S @ v))


def trailing_covariance(trace: RunTrace, problem: RootProblem, theta=None) -> np.ndarray:
    """Empirical covariance of ``F(X_i, theta) l_i`` over the second half of a run.

    ``theta`` defaults to the run's final estimate. Needs retained samples.
    """
    if trace.samples is None:
        raise UsageError("trace has no retained samples")
    x, lw = trace.samples
    k = trace.n // 2
    th = trace.final_estimate if theta is None else theta
    y = problem.outputs(x[k:], np.atleast_1d(th)) * np.exp(lw[k:])[:, None]
    return np.atleast_2d(np.cov(y, rowvar=False, ddof=1))


# --------------------------------------------------------------------------
# multivariate SAA


def _damped_newton(G, jac, theta0, tol, max_iter=50):
    """Damped Newton on ``G(theta) = 0``; returns ``(theta, J, fell_back)``.

    On a failed line search the solve switches to a fixed-point iteration
    ``theta <- theta - G(theta) / (k + 1)`` with diminishing relaxation.
    """
    theta = np.array(theta0, dtype=np.float64)
    r = G(theta)
    J = None
    for _ in range(max_iter):
        nr = float(np.linalg.norm(r))
        if nr <= tol:
            return theta, J, False
        J = jac(theta)
        try:
            step = np.linalg.solve(J.matrix, r)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t >= 1e-4:
            cand = theta - t * step
            rc = G(cand)
            if np.linalg.norm(rc) <= (1.0 - 1e-4 * t) * nr:
                theta, r = cand, rc
                break
            t *= 0.5
        else:
            break
    else:
        return theta, J, float(np.linalg.norm(r)) > tol
    for k in range(1, 500):
        theta = theta - r / (k + 1)
        r = G(theta)
        if np.linalg.norm(r) <= tol:
            break
    return theta, J, True


def _md_select(family: ISFamily, theta, J):
    sel = getattr(family, "select_md", None)
    if sel is not None and J is not None:
        return sel(theta, J)
    return family.select(theta)


def run_saa_adaptive_md(
    problem: RootProblem,
    family: ISFamily,
    trunc: Optional[TruncationSchedule],
    n: int,
    seed: int,
    *,
    is_mode: str = "adaptive",
    fixed_alpha=None,
    refit_every: int = 1,
    fd_step: Optional[float] = None,
    retain_samples: bool = True,
    stream: int = 0,
) -> RunTrace:
    """SAA for ``d``-dimensional problems: damped Newton on the weighted empirical system.

    ``alpha_{k+1} = proj_{A_{k+1}}(I(theta_k, J_k))``, where ``I`` is
    ``family.select_md`` when the family provides it and ``family.select``
    otherwise. ``d == 1`` runs the scalar engine.
    Iterations where the Newton solve fell back are flagged in the trace.
    """
    if problem.dim == 1:
        return engines.run_saa_adaptive(
            problem, family, trunc, n, seed, is_mode=is_mode, fixed_alpha=fixed_alpha,
            retain_samples=retain_samples, refit_every=refit_every, stream=stream,
        )
    if n < 1:
        raise UsageError(f"budget must be >= 1, got {n}")
    if refit_every < 1:
        raise ConfigurationError("refit_every must be >= 1")
    engines._mode_code(is_mode)
    const = engines._resolve_const(family, is_mode, fixed_alpha)
    if trunc is None:
        trunc = NoTruncation(family.param_dim)
    rng = make_rng(seed, stream)
    base = family.draw_base(rng, n)
    d = problem.dim
    c = problem.target
    tol = 1e-10 * max(1.0, float(np.max(np.abs(c))))

    xs = []
    lws = np.empty(n)
    it = np.empty((n, d))
    alphas = []
    flags = np.zeros(n, np.uint8)
    under = 0
    alpha = engines._initial_alpha(family, trunc, is_mode, const)
    theta = np.zeros(d)
    J_last = None
    i = 0
    while i < n:
        j = min(n, i + refit_every)
        x = family.transform(base[i:j], alpha)
        lw = np.broadcast_to(np.asarray(family.log_likelihood_ratio(x, alpha), dtype=np.float64), (j - i,))
        if not np.all(np.isfinite(lw)):
            bad = i + int(np.argmin(np.isfinite(lw))) + 1
            raise SolverError(f"non-finite weight at iteration {bad}", iteration=bad)
        xs.append(x)
        lws[i:j] = lw
        alphas.extend([np.array(alpha, dtype=np.float64)] * (j - i))
        under += int(np.sum(np.exp(lw) == 0.0))
        xall = np.concatenate(xs, axis=0)
        wall = np.exp(lws[:j])

        def G(t, xall=xall, wall=wall):
            return _weighted_mean_outputs(problem, xall, wall, t) - c

        def jac(t, xall=xall, lw=lws[:j]):
            return estimate_jacobian(xall, lw, problem, t, fd_step)

        theta, J, fell_back = _damped_newton(G, jac, theta, tol)
        if not np.all(np.isfinite(theta)):
            raise SolverError(f"inner solve diverged at iteration {j}", iteration=j)
        if J is not None and J.well_conditioned:
            J_last = J
        it[i:j - 1] = it[i - 1] if i > 0 else theta
        it[j - 1] = theta
        flags[j - 1] = fell_back
        if j < n:
            if is_mode == "adaptive":
                alpha = project_box(_md_select(family, theta, J_last), trunc.set_at(j + 1))
            elif is_mode == "fixed":
                alpha = project_box(const, trunc.set_at(j + 1))
        i = j
    xall = np.concatenate(xs, axis=0)
    return engines._trace(
        SAA, it, np.asarray(alphas), xall, lws, flags, under, retain_samples,
        {"solver": "SAA", "refit_every": refit_every, "jacobian": None if J_last is None else J_last.matrix},
    )


# --------------------------------------------------------------------------
# multivariate SA


@dataclass
class _RunningJacobian:
    problem: RootProblem
    fd_step: Optional[float]
    total: Optional[np.ndarray] = None
    count: int = 0
    last_good: Optional[JacobianEstimate] = field(default=None)

    def observe(self, x, lw, theta):
        est = estimate_jacobian(x, np.array([lw]), self.problem, theta, self.fd_step)
        self.total = est.matrix if self.total is None else self.total + est.matrix
        self.count += 1
        m = self.total / self.count
        if np.linalg.cond(m) <= COND_LIMIT:
            self.last_good = JacobianEstimate(m, theta, self.count)


def run_sa_adaptive_md(
    problem: RootProblem,
    family: ISFamily,
    kind: SolverKind,
    box,
    sched: StepsizeSchedule,
    n: int,
    seed: int,
    *,
    theta0=None,
    is_mode: str = "adaptive",
    fixed_alpha=None,
    trunc: Optional[TruncationSchedule] = None,
    fd_step: Optional[float] = None,
    retain_samples: bool = False,
    stream: int = 0,
) -> RunTrace:
    """Componentwise-projected SA for ``d``-dimensional problems.

    When the family has ``select_md(theta, J)``, the Jacobian fed to it is the
    running mean of per-sample derivatives ``D_theta F(X_i, theta_{i-1}) l_i``.
    ``d == 1`` runs the scalar engine.
    """
    if problem.dim == 1:
        return engines.run_sa_adaptive(
            problem, family, kind, box, sched, n, seed, theta0=theta0, is_mode=is_mode,
            fixed_alpha=fixed_alpha, trunc=trunc, retain_samples=retain_samples, stream=stream,
        )
    if not kind.is_sa:
        raise ConfigurationError("run_sa_adaptive_md needs RM_SA or PR_SA")
    if n < 1:
        raise UsageError(f"budget must be >= 1, got {n}")
    engines._check_gamma(kind, sched, None)
    engines._mode_code(is_mode)
    const = engines._resolve_const(family, is_mode, fixed_alpha)
    box = as_box(box)
    if box.dim == 1:
        box = Box(np.full(problem.dim, box.lo[0]), np.full(problem.dim, box.hi[0]))
    if box.dim != problem.dim:
        raise ConfigurationError("projection box dimension differs from the problem")
    t0 = box.midpoint if theta0 is None else np.asarray(theta0, dtype=np.float64)
    if not box.contains(t0):
        raise ConfigurationError("theta0 lies outside the projection box")
    rng = make_rng(seed, stream)
    base = family.draw_base(rng, n)
    gammas = sched.steps(n)
    tracker = _RunningJacobian(problem, fd_step) if getattr(family, "select_md", None) is not None else None
    select = None if tracker is None else (lambda th: _md_select(family, th, tracker.last_good))
    observe = None if tracker is None else tracker.observe
    return engines._sa_loop(
        lambda x, t: problem.outputs(x, t)[0], problem.target, family, kind, box, gammas, n, base, t0,
        is_mode, const, trunc, retain_samples, select=select, observe=observe,
    )
