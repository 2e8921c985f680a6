"""Tilting families and tilt selectors for the normal, exponential and Pareto toys."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import _kernels as K
from .core import ISFamily, check_admissible
from .errors import DomainError

# --------------------------------------------------------------------------
# selectors


def normal_selector(q: float) -> float:
    """Mean shift for estimating ``P(Z >= q)``: centre the sampler at ``q``."""
    return float(q)


def exponential_selector(lam: float, q: float) -> float:
    """Rate minimizing the second moment of ``1{Z >= q} l(Z, alpha)`` for ``Exp(lam)``.

    Closed form ``(lam*q + 1 - sqrt(1 + lam**2 q**2)) / q``, evaluated in a
    cancellation-free arrangement. The value lies in ``(0, lam)`` and
    decreases from ``lam`` (as ``q -> 0+``) to ``0`` (as ``q -> inf``).
    """
    if lam <= 0:
        raise DomainError(f"rate must be positive, got {lam}")
    if not q > 0:
        raise DomainError(f"exponential selector needs q > 0, got {q}")
    return float(K.exponential_select(float(lam), float(q)))


def pareto_selector(lam: float, q: float) -> float:
    """Tail index minimizing ``q**alpha / (alpha (2 lam - alpha))`` for ``P(Z > x) = x**-lam``.

    Same functional form as the exponential case with ``q`` replaced by
    ``log q``.
    """
    if lam <= 0:
        raise DomainError(f"tail index must be positive, got {lam}")
    if not q > 1:
        raise DomainError(f"Pareto selector needs q > 1, got {q}")
    return float(K.pareto_select(float(lam), float(q)))


# --------------------------------------------------------------------------
# families


@dataclass(frozen=True)
class NormalShiftFamily(ISFamily):
    """``N(alpha, I_dim)`` against the standard normal base.

    ``log l(z, alpha) = -alpha.z + |alpha|^2 / 2``. With ``dim == 1`` parameters
    and samples are plain floats / 1-d arrays.
    """

    dim: int = 1

    kernel_code = K.NORMAL

    @property
    def base_param(self):
        return 0.0 if self.dim == 1 else np.zeros(self.dim)

    @property
    def param_dim(self) -> int:
        return self.dim

    @property
    def rate(self) -> float:
        return 0.0

    def draw_base(self, rng, size):
        if self.dim == 1:
            return rng.standard_normal(size)
        return rng.standard_normal((size, self.dim))

    def transform(self, base, alpha):
        return base + alpha

    def log_likelihood_ratio(self, x, alpha):
        if self.dim == 1:
            a = float(alpha)
            return -a * np.asarray(x) + 0.5 * a * a
        a = np.asarray(alpha, dtype=np.float64)
        return -(np.asarray(x) @ a) + 0.5 * float(a @ a)

    def select(self, theta):
        if self.dim == 1:
            return normal_selector(float(np.asarray(theta).reshape(-1)[0]))
        return np.asarray(theta, dtype=np.float64).copy()

    def check_param(self, alpha) -> None:
        if not np.all(np.isfinite(alpha)):
            raise DomainError(f"mean shift must be finite, got {alpha!r}")

    def second_moment(self, q: float, alpha: float) -> float:
        """``E_alpha[(1{Z >= q} l)^2] = exp(alpha^2) * P(Z >= q + alpha)``."""
        return math.exp(alpha * alpha + special.log_ndtr(-(q + alpha)))

    def tail(self, q: float) -> float:
        return float(special.ndtr(-q))

    def density(self, q: float) -> float:
        return math.exp(-0.5 * q * q) / math.sqrt(2.0 * math.pi)

    def quantile(self, p: float) -> float:
        return float(special.ndtri(p))


@dataclass(frozen=True)
class ExponentialTiltFamily(ISFamily):
    """``Exp(alpha)`` against ``Exp(rate)``; admissible ``alpha`` in ``(0, 2 rate)``."""

    rate: float = 1.0

    kernel_code = K.EXPONENTIAL
    param_dim = 1

    def __post_init__(self):
        if not self.rate > 0:
            raise DomainError(f"rate must be positive, got {self.rate}")

    @property
    def base_param(self):
        return float(self.rate)

    def draw_base(self, rng, size):
        return rng.standard_exponential(size)

    def transform(self, base, alpha):
        return np.asarray(base) / alpha

    def log_likelihood_ratio(self, x, alpha):
        return math.log(self.rate / alpha) + (alpha - self.rate) * np.asarray(x)

    def select(self, theta):
        # saturates at the q -> 0+ limit for non-positive estimates
        return float(K.exponential_select(self.rate, float(theta)))

    def check_param(self, alpha) -> None:
        check_admissible(float(alpha), 0.0, 2.0 * self.rate, "exponential tilt")

    def second_moment(self, q: float, alpha: float) -> float:
        lam = self.rate
        return lam * lam * math.exp(-2.0 * lam * q + alpha * q) / (alpha * (2.0 * lam - alpha))

    def tail(self, q: float) -> float:
        return math.exp(-self.rate * q)

    def density(self, q: float) -> float:
        return self.rate * math.exp(-self.rate * q)

    def quantile(self, p: float) -> float:
        return -math.log1p(-p) / self.rate


@dataclass(frozen=True)
class ParetoTiltFamily(ISFamily):
    """Tail ``P(Z > x) = x**-alpha`` on ``[1, inf)`` against tail index ``rate``.

    Sampling is by inversion, ``X = U**(-1/alpha)`` with ``U`` uniform on ``(0, 1]``.
    """

    rate: float = 1.0

    kernel_code = K.PARETO
    param_dim = 1

    def __post_init__(self):
        if not self.rate > 0:
            raise DomainError(f"tail index must be positive, got {self.rate}")

    @property
    def base_param(self):
        return float(self.rate)

    def draw_base(self, rng, size):
        return 1.0 - rng.random(size)

    def transform(self, base, alpha):
        return np.asarray(base) ** (-1.0 / alpha)

    def log_likelihood_ratio(self, x, alpha):
        return math.log(self.rate / alpha) + (alpha - self.rate) * np.log(np.asarray(x))

    def select(self, theta):
        return float(K.pareto_select(self.rate, float(theta)))

    def check_param(self, alpha) -> None:
        check_admissible(float(alpha), 0.0, 2.0 * self.rate, "Pareto tilt")

    def second_moment(self, q: float, alpha: float) -> float:
        lam = self.rate
        return (lam * lam / alpha) * q ** (-2.0 * lam + alpha) / (2.0 * lam - alpha)

    def tail(self, q: float) -> float:
        return q ** (-self.rate)

    def density(self, q: float) -> float:
        return self.rate * q ** (-self.rate - 1.0)

    def quantile(self, p: float) -> float:
        return (1.0 - p) ** (-1.0 / self.rate)


def sample_family(family: ISFamily, alpha, rng: np.random.Generator, size: int | None = None):
    """Draw from ``P_alpha``; raises :class:`DomainError` for inadmissible ``alpha``."""
    return family.sample(alpha, rng, size)


# --------------------------------------------------------------------------
# asymptotic variances of sqrt(n)(q_n - q*) for the upper-tail estimators


def normal_second_moment(q: float, alpha: float) -> float:
    return NormalShiftFamily().second_moment(q, alpha)


def normal_asymptotic_variance(q_star: float, p: float, alpha: float | None = None) -> float:
    """SAA / averaged-SA asymptotic variance for the normal quantile.

    ``(E_alpha[(1{Z >= q*} l)^2] - (1 - p)^2) / phi(q*)^2`` with the optimal
    shift ``alpha = q*`` unless given.
    """
    a = q_star if alpha is None else alpha
    m2 = normal_second_moment(q_star, a)
    dens = math.exp(-0.5 * q_star * q_star) / math.sqrt(2.0 * math.pi)
    return (m2 - (1.0 - p) ** 2) / dens**2


def exponential_asymptotic_variance(lam: float, q_star: float, alpha: float | None = None) -> float:
    fam = ExponentialTiltFamily(lam)
    a = exponential_selector(lam, q_star) if alpha is None else alpha
    return (fam.second_moment(q_star, a) - fam.tail(q_star) ** 2) / fam.density(q_star) ** 2


def pareto_asymptotic_variance(lam: float, q_star: float, alpha: float | None = None) -> float:
    fam = ParetoTiltFamily(lam)
    a = pareto_selector(lam, q_star) if alpha is None else alpha
    return (fam.second_moment(q_star, a) - fam.tail(q_star) ** 2) / fam.density(q_star) ** 2


def rm_asymptotic_variance(saa_variance: float, density: float, gamma: float) -> float:
    """Robbins-Monro variant ``gamma^2 Var / (2 gamma f - 1)`` from the SAA variance ``Var / f^2``.

    Returns ``inf`` when ``2 gamma f <= 1`` (no CLT at rate ``sqrt(n)``).
    """
    k = 2.0 * gamma * density - 1.0
    if k <= 0:
        return math.inf
    return gamma * gamma * saa_variance * density * density / k
