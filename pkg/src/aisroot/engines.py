"""Adaptive-IS stochastic root finding: SAA, Robbins-Monro SA and Polyak-Ruppert SA.

Quantile problems on the built-in families run through compiled loops;
everything else (custom performance functions, generic root problems,
user-defined families) goes through a plain Python path with the same
random-number consumption, so the two agree draw for draw.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import optimize

from . import _kernels as K
from .core import (
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
from .errors import BracketError, ConfigurationError, LevelUnreachableError, SolverError, UsageError
from .samplers import ExponentialTiltFamily, NormalShiftFamily, ParetoTiltFamily

IS_MODES = ("adaptive", "fixed", "none")
_MODE_CODES = {"adaptive": K.MODE_ADAPTIVE, "fixed": K.MODE_FIXED, "none": K.MODE_NONE}


class GammaConditionWarning(UserWarning):
    """The stepsize constant is too small for a sqrt(n) central limit theorem."""


@dataclass(frozen=True)
class SolverKind:
    """Which solver to run. ``burn_in`` is the Polyak-Ruppert averaging offset ``N0``."""

    name: str
    burn_in: int = 0

    def __post_init__(self):
        if self.name not in ("SAA", "RM_SA", "PR_SA"):
            raise ConfigurationError(f"unknown solver {self.name!r}")
        if self.burn_in < 0:
            raise ConfigurationError("burn_in must be nonnegative")

    @classmethod
    def parse(cls, text: str, burn_in: int = 100) -> "SolverKind":
        key = text.strip().upper().replace("-", "_")
        if key == "PR_SA":
            return cls(key, burn_in)
        return cls(key)

    @property
    def is_sa(self) -> bool:
        return self.name != "SAA"


SAA = SolverKind("SAA")
RM_SA = SolverKind("RM_SA")
PR_SA = SolverKind("PR_SA", burn_in=100)


@dataclass(frozen=True)
class QuantileProblem:
    """Find ``q`` with ``P(h(X) <= q) = p`` (lower) or ``P(h(X) >= q) = 1 - p`` (upper).

    ``h`` maps a batch of samples to reals; ``None`` means the family's
    natural output (the sample itself for the toys, the loss for portfolios).
    """

    p: float
    tail: str = "upper"
    h: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if not (0.0 < self.p < 1.0):
            raise ConfigurationError(f"p must lie in (0, 1), got {self.p}")
        if self.tail not in ("lower", "upper"):
            raise ConfigurationError(f"tail must be 'lower' or 'upper', got {self.tail!r}")

    @property
    def sign(self) -> float:
        """Multiplier mapping ``h`` to the internal lower-tail frame."""
        return 1.0 if self.tail == "lower" else -1.0

    @property
    def level(self) -> float:
        """Target mass of ``{sign * h <= sign * q}``."""
        return self.p if self.tail == "lower" else 1.0 - self.p


Problem = Union[RootProblem, QuantileProblem]


# --------------------------------------------------------------------------
# deterministic inner solves


def weighted_empirical_quantile(values, weights, p: float) -> float:
    """``inf{q : (1/n) sum 1{h_i <= q} w_i >= p}``.

    Raises:
        LevelUnreachableError: if ``(1/n) sum w_i < p``.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    w = np.asarray(weights, dtype=np.float64).ravel()
    if v.size == 0:
        raise UsageError("values must be nonempty")
    if w.shape != v.shape:
        raise UsageError("values and weights differ in length")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise UsageError("weights must be finite and nonnegative")
    order = np.argsort(v, kind="stable")
    cum = np.cumsum(w[order])
    target = p * v.size
    k = int(np.searchsorted(cum, target, side="left"))
    if k >= v.size:
        raise LevelUnreachableError(f"total weight {cum[-1] / v.size:.6g} below level {p}")
    return float(v[order[k]])


def solve_weighted_scalar_root(
    g: Callable[[float], float],
    x0: float = 0.0,
    bracket: Optional[tuple[float, float]] = None,
    candidates: Optional[np.ndarray] = None,
    tol_f: float = 1e-10,
    tol_x: float = 1e-12,
    max_doublings: int = 60,
) -> float:
    """Root of a monotone scalar function, e.g. ``theta -> mean(F(x_i, theta) l_i) - c``.

    Without a bracket, one is grown geometrically around ``x0``. The solve is
    Brent's method (bisection safeguarded secant/inverse quadratic). For step
    functions the located jump is snapped to the smallest entry of
    ``candidates`` on the far side of the sign change, giving the infimum
    definition of the root exactly.

    Raises:
        BracketError: no sign change within ``max_doublings`` expansions.
    """
    if bracket is None:
        lo, hi, glo, ghi = _grow_bracket(g, float(x0), max_doublings)
    else:
        lo, hi = float(bracket[0]), float(bracket[1])
        glo, ghi = g(lo), g(hi)
    if glo == 0.0:
        return lo
    if ghi == 0.0:
        return hi
    if np.sign(glo) == np.sign(ghi):
        raise BracketError(f"no sign change on [{lo}, {hi}]")
    increasing = ghi > 0
    r = optimize.brentq(g, lo, hi, xtol=tol_x, rtol=4 * np.finfo(float).eps, maxiter=500)
    gr = g(r)
    if abs(gr) <= tol_f:
        return float(r)
    # discontinuous root: settle on the infimum of {g reached}
    if candidates is not None and len(candidates):
        c = np.unique(np.asarray(candidates, dtype=np.float64))
        scale = max(1.0, abs(r))
        near = c[np.abs(c - r) <= 1e-6 * scale]
        for v in near:
            gv = g(v)
            if (gv >= 0) if increasing else (gv <= 0):
                return float(v)
    # nudge to the reached side of the jump
    if (gr > 0) != increasing:
        r = np.nextafter(r, np.inf if increasing else -np.inf)
    return float(r)


def _grow_bracket(g, x0, max_doublings):
    step = max(1.0, abs(x0)) * 1e-3
    lo, hi = x0 - step, x0 + step
    glo, ghi = g(lo), g(hi)
    for _ in range(max_doublings):
        if np.sign(glo) != np.sign(ghi) or glo == 0.0 or ghi == 0.0:
            return lo, hi, glo, ghi
        step *= 2.0
        lo, hi = x0 - step, x0 + step
        glo, ghi = g(lo), g(hi)
    if np.sign(glo) != np.sign(ghi):
        return lo, hi, glo, ghi
    raise BracketError(f"no sign change after {max_doublings} doublings around {x0}")


# --------------------------------------------------------------------------
# helpers


def _kernel_family(family: ISFamily) -> bool:
    return type(family) in (NormalShiftFamily, ExponentialTiltFamily, ParetoTiltFamily) and (
        getattr(family, "dim", 1) == 1
    ) or getattr(family, "kernel_pf", None) is not None


def _pf_of(family):
    pf = getattr(family, "kernel_pf", None)
    return K.empty_pf() if pf is None else pf


def _natural_output(family: ISFamily, x: np.ndarray) -> np.ndarray:
    out = getattr(family, "output", None)
    return x if out is None else out(x)


def _base_2d(base: np.ndarray) -> np.ndarray:
    base = np.ascontiguousarray(base, dtype=np.float64)
    return base[:, None] if base.ndim == 1 else base


def _mode_code(is_mode: str) -> int:
    if is_mode not in _MODE_CODES:
        raise ConfigurationError(f"is_mode must be one of {IS_MODES}, got {is_mode!r}")
    return _MODE_CODES[is_mode]


def _resolve_const(family: ISFamily, is_mode: str, fixed_alpha):
    if is_mode == "fixed":
        if fixed_alpha is None:
            raise ConfigurationError("is_mode='fixed' needs fixed_alpha")
        family.check_param(fixed_alpha)
        return fixed_alpha
    return family.base_param


def _check_gamma(kind: SolverKind, sched: StepsizeSchedule, slope: Optional[float]):
    if kind.name == "RM_SA" and sched.exponent != 1.0:
        raise ConfigurationError("RM_SA uses stepsize exponent 1")
    if kind.name == "PR_SA" and not (0.5 < sched.exponent < 1.0):
        raise ConfigurationError("PR_SA needs stepsize exponent in (1/2, 1)")
    if kind.name == "RM_SA" and slope is not None and 2.0 * sched.gamma * slope <= 1.0:
        warnings.warn(
            f"2*gamma*f' = {2 * sched.gamma * slope:.3g} <= 1: consistency holds but the sqrt(n) CLT does not",
            GammaConditionWarning,
            stacklevel=3,
        )


def _trunc_columns(trunc: TruncationSchedule, n: int):
    lo, hi = trunc.table(n)
    return np.ascontiguousarray(lo[:, 0]), np.ascontiguousarray(hi[:, 0])


def averaged_iterates(iterates: np.ndarray, burn_in: int) -> np.ndarray:
    """Running Polyak-Ruppert averages ``theta_bar_n`` for every ``n``.

    ``theta_bar_n = theta_hat_n`` for ``n <= burn_in`` and the mean of
    ``theta_hat_{burn_in+1..n}`` afterwards. Works row-wise for vector iterates.
    """
    it = np.asarray(iterates, dtype=np.float64)
    out = it.copy()
    if it.shape[0] > burn_in:
        tail = it[burn_in:]
        counts = np.arange(1, tail.shape[0] + 1, dtype=np.float64)
        if tail.ndim > 1:
            counts = counts[:, None]
        out[burn_in:] = np.cumsum(tail, axis=0) / counts
    return out


def estimates_at(trace: RunTrace, kind: SolverKind, ns) -> np.ndarray:
    """Final estimates the run would have reported with budgets ``ns`` (prefixes of the trace)."""
    ns = np.asarray(ns, dtype=np.int64)
    if np.any(ns < 1) or np.any(ns > trace.n):
        raise UsageError(f"budgets must lie in [1, {trace.n}]")
    it = averaged_iterates(trace.iterates, kind.burn_in) if kind.name == "PR_SA" else np.asarray(trace.iterates)
    return it[ns - 1]


def _final(kind: SolverKind, iterates: np.ndarray):
    if kind.name == "PR_SA" and iterates.shape[0] > kind.burn_in:
        v = iterates[kind.burn_in:].mean(axis=0)
    else:
        v = iterates[-1]
    return float(v) if np.ndim(v) == 0 else np.asarray(v)


def _trace(kind, iterates, alphas, hvals, logws, flags, underflow, retain, info):
    samples = (hvals, logws) if retain else None
    for a in (hvals, logws):
        a.setflags(write=False)
    return RunTrace(
        iterates=iterates,
        is_params=alphas,
        final_estimate=_final(kind, iterates),
        samples=samples,
        flags=flags,
        underflow_count=int(underflow),
        info=info,
    )


# --------------------------------------------------------------------------
# SAA


def run_saa_adaptive(
    problem: Problem,
    family: ISFamily,
    trunc: Optional[TruncationSchedule],
    n: int,
    seed: int,
    *,
    is_mode: str = "adaptive",
    fixed_alpha=None,
    retain_samples: bool = True,
    refit_every: int = 1,
    stream: int = 0,
) -> RunTrace:
    """Sample average approximation with adaptive IS.

    Iteration ``k`` draws ``X_k ~ P_{alpha_k}``, re-solves the weighted
    empirical equation over all retained samples, then sets
    ``alpha_{k+1} = proj_{A_{k+1}}(I(theta_k))``. The first parameter is the
    base parameter projected onto ``A_1``.

    ``is_mode='none'`` keeps ``alpha`` at the base parameter (no projection,
    unit weights); ``'fixed'`` freezes ``alpha`` at ``fixed_alpha``
    (projected onto ``A_k``).
    """
    if n < 1:
        raise UsageError(f"budget must be >= 1, got {n}")
    if refit_every < 1:
        raise ConfigurationError("refit_every must be >= 1")
    mode = _mode_code(is_mode)
    const = _resolve_const(family, is_mode, fixed_alpha)
    if trunc is None:
        trunc = NoTruncation(family.param_dim)
    rng = make_rng(seed, stream)
    base = family.draw_base(rng, n)

    if isinstance(problem, QuantileProblem):
        if refit_every != 1:
            raise ConfigurationError("quantile SAA always re-solves every iteration")
        if problem.h is None and _kernel_family(family):
            return _saa_quantile_kernel(problem, family, trunc, n, base, mode, const, retain_samples)
        return _saa_quantile_python(problem, family, trunc, n, base, is_mode, const, retain_samples)
    if problem.dim != 1:
        raise ConfigurationError("scalar SAA needs dim == 1; use multidim for vector problems")
    return _saa_root_python(problem, family, trunc, n, base, is_mode, const, retain_samples, refit_every)


def _saa_quantile_kernel(problem, family, trunc, n, base, mode, const, retain):
    lo, hi = _trunc_columns(trunc, n)
    a1 = float(_initial_alpha(family, trunc, IS_MODES[mode], const))
    it, al, hv, lw, flags, status, under = K.saa_quantile(
        family.kernel_code, float(getattr(family, "rate", 0.0)), _pf_of(family), _base_2d(base),
        problem.sign, problem.level, lo, hi, mode, float(const), a1,
    )
    if status >= 0:
        raise SolverError(f"non-finite sample or weight at iteration {status + 1}", iteration=status + 1)
    return _trace(SAA, it, al, hv, lw, flags, under, retain, {"solver": "SAA"})


def _initial_alpha(family, trunc, is_mode, const):
    if is_mode == "none":
        return const
    start = family.base_param if is_mode == "adaptive" else const
    return project_box(start, trunc.set_at(1))


def _next_alpha(family, trunc, is_mode, const, theta, k):
    """Parameter for iteration ``k`` (1-based) after estimate ``theta``."""
    if is_mode == "none":
        return const
    a = family.select(theta) if is_mode == "adaptive" else const
    return project_box(a, trunc.set_at(k))


def _draw_one(family, base_i, alpha):
    x = family.transform(base_i, alpha)
    lw = float(np.asarray(family.log_likelihood_ratio(x, alpha)).reshape(-1)[0])
    return x, lw


def _saa_quantile_python(problem, family, trunc, n, base, is_mode, const, retain):
    h = problem.h if problem.h is not None else (lambda x: _natural_output(family, x))
    sign, level = problem.sign, problem.level
    it = np.empty(n)
    alphas = np.empty(n)
    hv = np.empty(n)
    lws = np.empty(n)
    flags = np.zeros(n, np.uint8)
    under = 0
    sb = K.sb_new(n)
    alpha = _initial_alpha(family, trunc, is_mode, const)
    for i in range(n):
        x, lw = _draw_one(family, base[i : i + 1], alpha)
        hx = float(np.asarray(h(x)).reshape(-1)[0])
        if not (math.isfinite(hx) and math.isfinite(lw)):
            raise SolverError(f"non-finite sample or weight at iteration {i + 1}", iteration=i + 1)
        w = math.exp(lw)
        under += w == 0.0
        hv[i], lws[i], alphas[i] = hx, lw, alpha
        K.sb_insert(*sb, sign * hx, w)
        v, ok = K.sb_query(*sb, (i + 1) * level)
        flags[i] = not ok
        it[i] = sign * v
        if i + 1 < n:
            alpha = _next_alpha(family, trunc, is_mode, const, it[i], i + 2)
    return _trace(SAA, it, alphas, hv, lws, flags, under, retain, {"solver": "SAA"})


def _saa_root_python(problem, family, trunc, n, base, is_mode, const, retain, refit_every):
    c = float(problem.target[0])
    xs = []
    lws = np.empty(n)
    it = np.empty(n)
    alphas = np.empty(n)
    under = 0
    alpha = _initial_alpha(family, trunc, is_mode, const)
    theta = 0.0
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
        alphas[i:j] = alpha
        under += int(np.sum(np.exp(lw) == 0.0))
        xall = np.concatenate(xs, axis=0)
        wall = np.exp(lws[:j])

        def g(t, xall=xall, wall=wall):
            return float(np.mean(problem.outputs(xall, np.array([t]))[:, 0] * wall)) - c

        cand = xall if xall.ndim == 1 else None
        try:
            theta = solve_weighted_scalar_root(g, x0=theta, candidates=cand)
        except BracketError as exc:
            raise SolverError(f"inner solve failed at iteration {j}: {exc}", iteration=j) from exc
        it[i:j - 1] = it[i - 1] if i > 0 else theta
        it[j - 1] = theta
        if j < n:
            alpha = _next_alpha(family, trunc, is_mode, const, theta, j + 1)
        i = j
    xall = np.concatenate(xs, axis=0)
    return _trace(SAA, it, alphas, xall, lws, None, under, retain, {"solver": "SAA", "refit_every": refit_every})


# --------------------------------------------------------------------------
# SA


def run_sa_adaptive(
    problem: Problem,
    family: ISFamily,
    kind: SolverKind,
    box,
    sched: StepsizeSchedule,
    n: int,
    seed: int,
    *,
    theta0: Optional[float] = None,
    is_mode: str = "adaptive",
    fixed_alpha=None,
    trunc: Optional[TruncationSchedule] = None,
    retain_samples: bool = False,
    slope: Optional[float] = None,
    stream: int = 0,
) -> RunTrace:
    """Projected stochastic approximation with adaptive IS.

    ``theta_k = proj_A(theta_{k-1} - gamma_k (F(X_k, theta_{k-1}) l_k - c))``
    and ``alpha_{k+1} = I(theta_k)``, optionally projected onto ``trunc``.
    ``theta0`` defaults to the midpoint of ``box``. ``slope`` (``f'`` at the
    root, if known) enables the warning for stepsizes too small for a CLT.
    """
    if not kind.is_sa:
        raise ConfigurationError("run_sa_adaptive needs RM_SA or PR_SA")
    if n < 1:
        raise UsageError(f"budget must be >= 1, got {n}")
    _check_gamma(kind, sched, slope)
    mode = _mode_code(is_mode)
    const = _resolve_const(family, is_mode, fixed_alpha)
    box = as_box(box)
    if not (np.all(np.isfinite(box.lo)) and np.all(np.isfinite(box.hi))):
        raise ConfigurationError("projection box must be bounded")
    t0 = box.midpoint if theta0 is None else np.atleast_1d(np.asarray(theta0, dtype=np.float64))
    if not box.contains(t0):
        raise ConfigurationError(f"theta0 {t0} lies outside the projection box")
    rng = make_rng(seed, stream)
    base = family.draw_base(rng, n)
    gammas = sched.steps(n)

    if isinstance(problem, QuantileProblem) and problem.h is None and _kernel_family(family):
        use_trunc = trunc is not None
        lo, hi = _trunc_columns(trunc, n) if use_trunc else (np.zeros(n), np.zeros(n))
        th0 = float(t0[0])
        if mode == K.MODE_ADAPTIVE:
            a1 = K.family_select(family.kernel_code, float(getattr(family, "rate", 0.0)), _pf_of(family), th0)
        else:
            a1 = float(const)
        if use_trunc and mode != K.MODE_NONE:
            a1 = min(max(a1, lo[0]), hi[0])
        it, al, hv, lw, flags, status, under = K.sa_quantile(
            family.kernel_code, float(getattr(family, "rate", 0.0)), _pf_of(family), _base_2d(base),
            problem.sign, problem.level, th0, float(box.lo[0]), float(box.hi[0]), gammas,
            mode, float(const), float(a1), use_trunc, lo, hi,
        )
        if status >= 0:
            raise SolverError(f"non-finite update at iteration {status + 1}", iteration=status + 1)
        return _trace(kind, it, al, hv, lw, flags, under, retain_samples, {"solver": kind.name})

    if isinstance(problem, QuantileProblem):
        h = problem.h if problem.h is not None else (lambda x: _natural_output(family, x))
        sign, level = problem.sign, problem.level

        def F(x, t):
            return np.asarray([1.0 if sign * float(np.asarray(h(x)).reshape(-1)[0]) <= sign * t[0] else 0.0])

        target = np.array([level])
        return _sa_loop(F, target, family, kind, box, gammas, n, base, t0, is_mode, const, trunc,
                        retain_samples, frame=sign, output=h)
    return _sa_loop(lambda x, t: problem.outputs(x, t)[0], problem.target, family, kind, box, gammas, n, base, t0,
                    is_mode, const, trunc, retain_samples)


def _sa_loop(F, target, family, kind, box, gammas, n, base, t0, is_mode, const, trunc, retain, frame=1.0, output=None,
             select=None, observe=None):
    """Shared (vector) SA recursion used by scalar and multivariate engines.

    ``frame = -1`` runs the recursion on ``-theta`` so that upper-tail
    quantiles use the same lower-tail indicator update as the kernels.
    ``select(theta)`` overrides the family selector; ``observe(x, lw, theta)``
    is called with each sample and the iterate it was evaluated at.
    """
    if select is None:
        def select(th):
            return family.select(th if d > 1 else float(th[0]))

    d = box.dim
    ilo = box.lo if frame > 0 else -box.hi
    ihi = box.hi if frame > 0 else -box.lo
    t = frame * np.array(t0, dtype=np.float64)
    it = np.empty((n, d))
    hv = []
    lws = np.empty(n)
    under = 0
    theta = frame * t
    if is_mode == "none":
        alpha = const
    else:
        alpha = select(theta) if is_mode == "adaptive" else const
        if trunc is not None:
            alpha = project_box(alpha, trunc.set_at(1))
    alphas = []
    for i in range(n):
        x, lw = _draw_one(family, base[i : i + 1], alpha)
        if not math.isfinite(lw):
            raise SolverError(f"non-finite weight at iteration {i + 1}", iteration=i + 1)
        w = math.exp(lw)
        under += w == 0.0
        y = np.asarray(F(x, theta), dtype=np.float64).reshape(-1)
        if observe is not None:
            observe(x, lw, theta)
        t = t - gammas[i] * (y * w - target)
        if not np.all(np.isfinite(t)):
            raise SolverError(f"non-finite update at iteration {i + 1}", iteration=i + 1)
        t = np.minimum(np.maximum(t, ilo), ihi)
        theta = frame * t
        it[i] = theta
        alphas.append(alpha)
        hv.append(x if output is None else float(np.asarray(output(x)).reshape(-1)[0]))
        lws[i] = lw
        if i + 1 < n:
            if is_mode == "adaptive":
                alpha = select(theta)
            if trunc is not None and is_mode != "none":
                alpha = project_box(alpha, trunc.set_at(i + 2))
    iterates = it[:, 0].copy() if d == 1 else it
    alphas = np.asarray(alphas, dtype=np.float64)
    samples = np.concatenate(hv, axis=0) if output is None else np.asarray(hv)
    return _trace(kind, iterates, alphas, samples, lws, None, under, retain, {"solver": kind.name})
