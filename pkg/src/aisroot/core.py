"""Problem, sampler and schedule abstractions shared by every solver."""

from __future__ import annotations

import hashlib
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, DomainError, NumericalOverflowError, UsageError

MAX_DIM = 64

ArrayLike = Union[float, Sequence[float], np.ndarray]


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based Philox generator for replication ``stream`` of ``seed``.

    Distinct ``stream`` values give statistically independent generators, so
    replications can run in any order (or in parallel) with identical output.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# boxes and projection


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo_1, hi_1] x ... x [lo_d, hi_d]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=np.float64))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigurationError(f"box bounds must be 1-d of equal length, got {lo.shape} and {hi.shape}")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ConfigurationError("box bounds must not be NaN")
        if np.any(lo > hi):
            raise ConfigurationError(f"malformed box: lo={lo.tolist()} exceeds hi={hi.tolist()}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def interval(cls, lo: float, hi: float) -> "Box":
        return cls(np.array([lo], dtype=np.float64), np.array([hi], dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, v: ArrayLike) -> bool:
        v = np.atleast_1d(np.asarray(v, dtype=np.float64))
        return bool(np.all(v >= self.lo) and np.all(v <= self.hi))

    def subset_of(self, other: "Box") -> bool:
        return bool(np.all(other.lo <= self.lo) and np.all(self.hi <= other.hi))


def as_box(box: Any) -> Box:
    """Coerce ``Box``, ``(lo, hi)`` pairs or ``[(lo, hi), ...]`` into a :class:`Box`."""
    if isinstance(box, Box):
        return box
    arr = np.asarray(box, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 2:
        return Box.interval(arr[0], arr[1])
    if arr.ndim == 2 and arr.shape[1] == 2:
        return Box(arr[:, 0], arr[:, 1])
    raise ConfigurationError(f"cannot interpret {box!r} as a box")


def project_box(v: ArrayLike, box: Any):
    """Clamp ``v`` componentwise into ``box``.

    Scalars come back as ``float``; vectors as ``np.ndarray``. A point already
    inside the box is returned unchanged.
    """
    b = as_box(box)
    scalar = np.ndim(v) == 0
    arr = np.atleast_1d(np.asarray(v, dtype=np.float64))
    # a 1-d box clamps any vector elementwise
    if b.dim != 1 and arr.shape != b.lo.shape:
        raise ConfigurationError(f"vector of shape {arr.shape} does not match box of dim {b.dim}")
    out = np.minimum(np.maximum(arr, b.lo), b.hi)
    return float(out[0]) if scalar else out


# --------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class StepsizeSchedule:
    """Deterministic stepsizes ``gamma / n**exponent``."""

    gamma: float
    exponent: float = 1.0

    def __post_init__(self):
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ConfigurationError(f"gamma must be positive and finite, got {self.gamma}")
        if not (0.5 < self.exponent <= 1.0):
            raise ConfigurationError(f"stepsize exponent must lie in (1/2, 1], got {self.exponent}")

    def step(self, n: int) -> float:
        if n < 1:
            raise UsageError(f"stepsize index must be >= 1, got {n}")
        return self.gamma / float(n) ** self.exponent

    def steps(self, n_total: int) -> np.ndarray:
        """Vector of ``step(1), ..., step(n_total)``."""
        idx = np.arange(1, n_total + 1, dtype=np.float64)
        return self.gamma / idx**self.exponent


def step_size(schedule: StepsizeSchedule, n: int) -> float:
    return schedule.step(n)


class TruncationSchedule(ABC):
    """Nested boxes ``A_1 ⊆ A_2 ⊆ ...`` capping the IS parameter."""

    @abstractmethod
    def bounds(self, n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Lower/upper bounds for each iteration index in ``n`` (shape ``(len(n), dim)``)."""

    @property
    def dim(self) -> int:
        return 1

    def set_at(self, n: int) -> Box:
        if n < 1:
            raise UsageError(f"iteration index must be >= 1, got {n}")
        lo, hi = self.bounds(np.array([n]))
        return Box(lo[0], hi[0])

    def table(self, n_total: int) -> tuple[np.ndarray, np.ndarray]:
        """Bounds for ``n = 1..n_total`` as two ``(n_total, dim)`` arrays."""
        return self.bounds(np.arange(1, n_total + 1))


@dataclass(frozen=True)
class FixedTruncation(TruncationSchedule):
    """``A_n = A`` for every ``n`` (prior knowledge of a compact set)."""

    box: Box

    def __post_init__(self):
        object.__setattr__(self, "box", as_box(self.box))

    @property
    def dim(self) -> int:
        return self.box.dim

    def bounds(self, n):
        n = np.asarray(n)
        lo = np.broadcast_to(self.box.lo, (n.shape[0], self.box.dim)).copy()
        hi = np.broadcast_to(self.box.hi, (n.shape[0], self.box.dim)).copy()
        return lo, hi


@dataclass(frozen=True)
class NoTruncation(TruncationSchedule):
    """``A_n = R^dim``."""

    ndim: int = 1

    @property
    def dim(self) -> int:
        return self.ndim

    def bounds(self, n):
        k = np.asarray(n).shape[0]
        return np.full((k, self.ndim), -np.inf), np.full((k, self.ndim), np.inf)


@dataclass(frozen=True)
class SymmetricLogGrowth(TruncationSchedule):
    """``A_n = [-r_n, r_n]`` with ``r_n = sqrt(log(scale * n**(1 - eps)))``.

    This is the growth used for mean-shift tilting of a Gaussian: the second
    moment of the weighted indicator grows like ``exp(r_n**2)``, i.e. like
    ``n**(1 - eps)``.
    """

    scale: float = 5.0
    eps: float = 0.1

    def __post_init__(self):
        if self.scale <= 0 or not (0 < self.eps < 1):
            raise ConfigurationError("need scale > 0 and eps in (0, 1)")

    def bounds(self, n):
        n = np.asarray(n, dtype=np.float64)
        r = np.sqrt(np.maximum(np.log(self.scale) + (1.0 - self.eps) * np.log(n), 0.0))
        return -r[:, None], r[:, None]


@dataclass(frozen=True)
class PowerFloorTruncation(TruncationSchedule):
    """``A_n = [max(floor, c * n**-(1 - eps)), upper]``.

    Keeps ``1/alpha = O(n**(1 - eps))`` on ``A_n`` for rate-type tilting
    families whose likelihood ratio blows up as ``alpha -> 0``.
    """

    upper: float
    c: float = 1.0
    eps: float = 0.1
    floor: float = 0.0

    def __post_init__(self):
        if not (self.upper > 0 and self.c > 0 and 0 < self.eps < 1 and self.floor >= 0):
            raise ConfigurationError("need upper > 0, c > 0, eps in (0, 1), floor >= 0")

    def bounds(self, n):
        n = np.asarray(n, dtype=np.float64)
        lo = np.maximum(self.floor, self.c * n ** (-(1.0 - self.eps)))
        lo = np.minimum(lo, self.upper)
        hi = np.full_like(lo, self.upper)
        return lo[:, None], hi[:, None]


# --------------------------------------------------------------------------
# problems and IS families


@dataclass(frozen=True)
class RootProblem:
    """Find ``theta`` with ``E_P[F(X, theta)] = target``.

    ``evaluate(x, theta)`` receives a batch of sample points (first axis
    indexes samples) and a length-``dim`` parameter vector and returns an
    array of shape ``(m, dim)``. It must be deterministic.
    ``jacobian(x, theta)``, if given, returns ``(m, dim, dim)`` derivatives.
    """

    dim: int
    evaluate: Callable[[np.ndarray, np.ndarray], np.ndarray]
    target: np.ndarray
    jacobian: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if not (1 <= self.dim <= MAX_DIM):
            raise ConfigurationError(f"dim must be in [1, {MAX_DIM}], got {self.dim}")
        c = np.atleast_1d(np.asarray(self.target, dtype=np.float64))
        if c.shape != (self.dim,):
            raise ConfigurationError(f"target has shape {c.shape}, expected ({self.dim},)")
        object.__setattr__(self, "target", c)

    def outputs(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        out = np.asarray(self.evaluate(x, np.atleast_1d(np.asarray(theta, dtype=np.float64))), dtype=np.float64)
        if out.ndim == 1 and self.dim == 1:
            out = out[:, None]
        if out.ndim != 2 or out.shape[1] != self.dim:
            raise ConfigurationError(f"evaluate returned shape {out.shape}, expected (m, {self.dim})")
        return out


class ISFamily(ABC):
    """Parametric importance sampler ``P_alpha`` with log likelihood ratio against ``P``.

    Sampling is split into drawing base randomness (independent of ``alpha``)
    and a deterministic transform, so a run's randomness is fixed by its
    seed regardless of how the parameters evolve.
    """

    #: parameter of ``P`` inside the family
    base_param: Any = 0.0
    param_dim: int = 1

    @abstractmethod
    def draw_base(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Base randomness for ``size`` samples (first axis indexes samples)."""

    @abstractmethod
    def transform(self, base: np.ndarray, alpha) -> np.ndarray:
        """Map base randomness to draws from ``P_alpha``."""

    @abstractmethod
    def log_likelihood_ratio(self, x: np.ndarray, alpha) -> np.ndarray:
        """``log(dP/dP_alpha)(x)``."""

    @abstractmethod
    def select(self, theta):
        """Black-box tilt selector: a good ``alpha`` for estimating at ``theta``."""

    def check_param(self, alpha) -> None:
        """Raise :class:`DomainError` when ``alpha`` is not admissible."""

    def sample(self, alpha, rng: np.random.Generator, size: Optional[int] = None):
        self.check_param(alpha)
        k = 1 if size is None else size
        x = self.transform(self.draw_base(rng, k), alpha)
        return x[0] if size is None else x


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n: int

    def within(self, value: float, sigmas: float = 4.0) -> bool:
        if self.stderr == 0.0:
            return self.mean == value
        return abs(self.mean - value) <= sigmas * self.stderr


def check_unit_mean_lr(family: ISFamily, alpha, n_mc: int = 100_000, seed: int = 0) -> MCEstimate:
    """Monte Carlo mean (and standard error) of ``l(X, alpha)`` with ``X ~ P_alpha``.

    The caller decides the tolerance; the usual check is ``|mean - 1| <= 4 stderr``.
    """
    if n_mc < 100:
        raise UsageError(f"n_mc must be >= 100, got {n_mc}")
    family.check_param(alpha)
    rng = make_rng(seed)
    x = family.transform(family.draw_base(rng, n_mc), alpha)
    with np.errstate(over="ignore"):
        w = np.exp(family.log_likelihood_ratio(x, alpha))
    if not np.all(np.isfinite(w)):
        raise NumericalOverflowError(f"non-finite likelihood ratio at alpha={alpha!r}", alpha=alpha)
    return MCEstimate(float(w.mean()), float(w.std(ddof=1) / math.sqrt(n_mc)), n_mc)


# --------------------------------------------------------------------------
# traces


@dataclass(frozen=True)
class RunTrace:
    """Per-iteration record of an adaptive run.

    ``samples`` is ``None`` when sample retention was switched off; otherwise a
    pair ``(x, log_lr)`` aligned with ``iterates``. ``flags`` marks iterations
    where the estimator had to fall back (e.g. an unreachable weighted level).
    """

    iterates: np.ndarray
    is_params: np.ndarray
    final_estimate: Any
    samples: Optional[tuple[np.ndarray, np.ndarray]] = None
    flags: Optional[np.ndarray] = None
    underflow_count: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.iterates)
        if len(self.is_params) != n:
            raise ConfigurationError("iterates and is_params lengths differ")
        if self.samples is not None:
            x, lw = self.samples
            if len(x) != n or len(lw) != n:
                raise ConfigurationError("samples length differs from iterates")
            if not np.all(np.isfinite(lw)):
                raise NumericalOverflowError("recorded log likelihood ratio is not finite")
        for arr in (self.iterates, self.is_params):
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.iterates)

    @property
    def likelihood_ratios(self) -> Optional[np.ndarray]:
        if self.samples is None:
            return None
        return np.exp(self.samples[1])

    def digest(self) -> str:
        """SHA-256 over the trace arrays; equal digests mean byte-identical traces."""
        h = hashlib.sha256()
        parts = [self.iterates, self.is_params, np.atleast_1d(np.asarray(self.final_estimate, dtype=np.float64))]
        if self.samples is not None:
            parts.extend(self.samples)
        if self.flags is not None:
            parts.append(self.flags)
        for a in parts:
            a = np.ascontiguousarray(a)
            h.update(str(a.dtype).encode())
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        return h.hexdigest()


def check_admissible(alpha: float, lo: float, hi: float, name: str) -> None:
    if not (lo < alpha < hi):
        raise DomainError(f"{name} parameter {alpha!r} outside admissible range ({lo}, {hi})")
