"""Delta-gamma exponential twisting for portfolio VaR and CVaR.

Losses are ``L = V(S0, 0) - V(S0 + dS, t)`` for a book of European options
priced by Black-Scholes. The delta-gamma model
``L ~ a0 + a.dS + dS' A dS`` is diagonalized as ``a0 + Q`` with
``Q = b.Z + Z' diag(lam) Z`` and ``Z ~ N(0, I)``; twisting ``Q`` by ``alpha``
drives the importance sampler, while the quantile itself is taken of the
exactly repriced loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Optional, Union

import numpy as np
from scipy import optimize, special

from . import _kernels as K
from .core import FixedTruncation, ISFamily, RunTrace, StepsizeSchedule, make_rng
from .engines import QuantileProblem, SolverKind, run_sa_adaptive, run_saa_adaptive
from .errors import ConfigurationError, DomainError

DOMAIN_INSET = 1e-6
SELECT_RTOL = 1e-10

SPEC_SCHEMA = """\
{
  "rate": float,                 risk-free rate r
  "horizon": float,              loss horizon t in years
  "assets": [{"S0": float, "vol": float}, ...],
  "correlation": null | m x m,   correlation of the asset returns (identity if null)
  "positions": [
    {"asset": int | "all", "kind": "call" | "put",
     "strike": float, "maturity": float, "quantity": float}, ...
  ]
}
Quantities are signed (negative = short). Maturities must exceed the horizon."""


# --------------------------------------------------------------------------
# Black-Scholes


class Greeks(NamedTuple):
    price: float
    delta: float
    gamma: float
    theta: float


def black_scholes(S: float, K_: float, r: float, sigma: float, T: float, kind: str = "call") -> Greeks:
    """Price, delta, gamma and theta (per year of calendar time) of a European option.

    Theta is ``dV/dt`` including the discounting term; puts follow from parity.
    """
    if not (S > 0 and K_ > 0 and sigma > 0 and T > 0):
        raise DomainError(f"Black-Scholes needs S, K, sigma, T > 0; got S={S}, K={K_}, sigma={sigma}, T={T}")
    if kind not in ("call", "put"):
        raise DomainError(f"kind must be 'call' or 'put', got {kind!r}")
    return Greeks(*K.bs_greeks(float(S), float(K_), float(r), float(sigma), float(T), kind == "call"))


# --------------------------------------------------------------------------
# portfolio specification


@dataclass(frozen=True)
class OptionPosition:
    asset: int
    kind: str
    strike: float
    maturity: float
    quantity: float


@dataclass(frozen=True)
class PortfolioSpec:
    """Option book on ``m`` lognormal assets over a horizon ``t``."""

    S0: np.ndarray
    vols: np.ndarray
    rate: float
    horizon: float
    positions: tuple[OptionPosition, ...]
    correlation: Optional[np.ndarray] = None

    def __post_init__(self):
        S0 = np.atleast_1d(np.asarray(self.S0, dtype=np.float64))
        vols = np.atleast_1d(np.asarray(self.vols, dtype=np.float64))
        if S0.shape != vols.shape or S0.ndim != 1:
            raise ConfigurationError("S0 and vols must be 1-d of equal length")
        if np.any(S0 <= 0) or np.any(vols <= 0):
            raise ConfigurationError("S0 and vols must be positive")
        if not self.horizon > 0:
            raise ConfigurationError("horizon must be positive")
        m = S0.shape[0]
        R = np.eye(m) if self.correlation is None else np.asarray(self.correlation, dtype=np.float64)
        if R.shape != (m, m) or not np.allclose(R, R.T, atol=1e-12):
            raise ConfigurationError("correlation must be a symmetric m x m matrix")
        for pos in self.positions:
            if not (0 <= pos.asset < m):
                raise ConfigurationError(f"position refers to asset {pos.asset} of {m}")
            if pos.kind not in ("call", "put"):
                raise ConfigurationError(f"unknown option kind {pos.kind!r}")
            if not pos.strike > 0:
                raise ConfigurationError("strikes must be positive")
            if not pos.maturity > self.horizon:
                raise ConfigurationError("option maturities must exceed the horizon")
        object.__setattr__(self, "S0", S0)
        object.__setattr__(self, "vols", vols)
        object.__setattr__(self, "correlation", R)
        object.__setattr__(self, "positions", tuple(self.positions))

    @property
    def m(self) -> int:
        return self.S0.shape[0]

    @property
    def cov_dS(self) -> np.ndarray:
        """Covariance of ``dS`` over the horizon: ``D R D`` with ``D = diag(S0 vol sqrt(t))``."""
        d = self.S0 * self.vols * math.sqrt(self.horizon)
        return d[:, None] * self.correlation * d[None, :]

    def arrays(self):
        """Positions as parallel arrays ``(asset, kind (0 call / 1 put), strike, maturity, quantity)``."""
        p = self.positions
        return (
            np.array([x.asset for x in p], dtype=np.int64),
            np.array([0 if x.kind == "call" else 1 for x in p], dtype=np.int64),
            np.array([x.strike for x in p], dtype=np.float64),
            np.array([x.maturity for x in p], dtype=np.float64),
            np.array([x.quantity for x in p], dtype=np.float64),
        )

    def value(self, S, elapsed: float = 0.0) -> float:
        aidx, kind, Ks, Ts, qty = self.arrays()
        return float(K.portfolio_value(np.asarray(S, dtype=np.float64), self.vols, self.rate, elapsed, aidx, kind, Ks, Ts, qty))

    def losses(self, dS: np.ndarray) -> np.ndarray:
        """Exact repriced losses ``V(S0, 0) - V(S0 + dS, t)`` per row of ``dS``.

        Asset values are floored at ``1e-12 * S0`` before repricing.
        """
        aidx, kind, Ks, Ts, qty = self.arrays()
        V0 = self.value(self.S0)
        dS = np.ascontiguousarray(np.atleast_2d(dS), dtype=np.float64)
        return K.portfolio_losses(dS, self.S0, self.vols, self.rate, self.horizon, V0, aidx, kind, Ks, Ts, qty)

    @classmethod
    def from_dict(cls, d: dict) -> "PortfolioSpec":
        try:
            assets = d["assets"]
            m = len(assets)
            positions = []
            for pos in d["positions"]:
                targets = range(m) if pos.get("asset", "all") == "all" else [int(pos["asset"])]
                for a in targets:
                    positions.append(
                        OptionPosition(a, pos["kind"], float(pos["strike"]), float(pos["maturity"]), float(pos["quantity"]))
                    )
            return cls(
                S0=[float(a["S0"]) for a in assets],
                vols=[float(a["vol"]) for a in assets],
                rate=float(d["rate"]),
                horizon=float(d["horizon"]),
                positions=tuple(positions),
                correlation=None if d.get("correlation") is None else np.asarray(d["correlation"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"malformed portfolio spec: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "rate": self.rate,
            "horizon": self.horizon,
            "assets": [{"S0": float(s), "vol": float(v)} for s, v in zip(self.S0, self.vols)],
            "correlation": self.correlation.tolist(),
            "positions": [
                {"asset": p.asset, "kind": p.kind, "strike": p.strike, "maturity": p.maturity, "quantity": p.quantity}
                for p in self.positions
            ],
        }


def load_portfolio_spec(path: Union[str, Path]) -> PortfolioSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read portfolio spec {path}: {exc}") from exc
    try:
        return PortfolioSpec.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc


def reference_portfolio() -> PortfolioSpec:
    """The shipped ten-asset short-option book (see ``data/reference_portfolio.json``)."""
    text = resources.files("aisroot").joinpath("data/reference_portfolio.json").read_text(encoding="utf-8")
    return PortfolioSpec.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# delta-gamma quadratic form


@dataclass(frozen=True)
class QuadraticFormModel:
    """``L ~ a0 + a.dS + dS' A dS = a0 + b.Z + Z' diag(lam) Z`` with ``dS = C Z``."""

    a0: float
    a: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lam: np.ndarray
    C: np.ndarray
    V0: float = 0.0

    @property
    def m(self) -> int:
        return self.b.shape[0]

    def domain(self, inset: float = 0.0) -> tuple[float, float]:
        """Open interval of ``alpha`` with ``1 - 2 alpha lam_i > 0`` for all ``i``, optionally inset."""
        return K.twist_domain(self.lam, inset)

    def admissible(self, alpha: float) -> bool:
        return bool(np.all(1.0 - 2.0 * alpha * self.lam > 0.0))

    def quadratic(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        return z @ self.b + np.einsum("ij,j,ij->i", z, self.lam, z)

    def delta_gamma(self, dS: np.ndarray) -> np.ndarray:
        dS = np.atleast_2d(dS)
        return self.a0 + dS @ self.a + np.einsum("ij,jk,ik->i", dS, self.A, dS)

    @property
    def mean_q(self) -> float:
        return float(self.lam.sum())


def build_quadratic_form(spec: PortfolioSpec) -> QuadraticFormModel:
    """Greeks, Cholesky factor of the ``dS`` covariance and the diagonalizing rotation.

    Signs follow ``L = V(S0, 0) - V(S0 + dS, t)``: ``a0 = -Theta t``,
    ``a = -delta``, ``A = -Gamma / 2``. Eigenvalues are sorted descending.

    Raises:
        DomainError: if the covariance is not positive semidefinite.
    """
    m = spec.m
    delta = np.zeros(m)
    gamma = np.zeros(m)
    theta = 0.0
    V0 = 0.0
    for p in spec.positions:
        g = black_scholes(spec.S0[p.asset], p.strike, spec.rate, spec.vols[p.asset], p.maturity, p.kind)
        V0 += p.quantity * g.price
        delta[p.asset] += p.quantity * g.delta
        gamma[p.asset] += p.quantity * g.gamma
        theta += p.quantity * g.theta
    a0 = -theta * spec.horizon
    a = -delta
    A = -0.5 * np.diag(gamma)
    C0 = _psd_factor(spec.cov_dS)
    w, U = np.linalg.eigh(C0.T @ A @ C0)
    order = np.argsort(-w, kind="stable")
    w, U = w[order], U[:, order]
    C = C0 @ U
    b = C.T @ a
    return QuadraticFormModel(float(a0), a, A, b, w, C, float(V0))


def _psd_factor(S: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(S)
        if np.min(w) < -1e-10 * max(1.0, np.max(np.abs(w))):
            raise DomainError("covariance of dS is not positive semidefinite") from None
        return V * np.sqrt(np.clip(w, 0.0, None))


# --------------------------------------------------------------------------
# twisting


def _check_alpha(model: QuadraticFormModel, alpha: float):
    if not model.admissible(alpha):
        lo, hi = model.domain()
        raise DomainError(f"twist {alpha} outside the admissible interval ({lo}, {hi})")


def psi(model: QuadraticFormModel, alpha: float) -> float:
    """Log moment generating function of ``Q``:
    ``sum alpha^2 b_i^2 / (2(1 - 2 alpha lam_i)) - log(1 - 2 alpha lam_i) / 2``."""
    _check_alpha(model, alpha)
    return float(K.psi(model.b, model.lam, float(alpha)))


def psi_prime(model: QuadraticFormModel, alpha: float) -> float:
    _check_alpha(model, alpha)
    return float(K.psi_prime(model.b, model.lam, float(alpha)))


def psi_second(model: QuadraticFormModel, alpha: float) -> float:
    _check_alpha(model, alpha)
    return float(K.psi_second(model.b, model.lam, float(alpha)))


def twist_selector(model: QuadraticFormModel, x: float, with_flag: bool = False):
    """Twist minimizing ``exp(2 psi(alpha) - 2 alpha (x - a0))``, i.e. ``psi'(alpha) = x - a0``.

    Levels outside the range of ``psi'`` saturate at the domain boundary
    inset by ``1e-6`` (relative); ``with_flag=True`` also returns whether
    that happened.
    """
    lo, hi = model.domain(DOMAIN_INSET)
    alpha, saturated = K.twist_root(model.b, model.lam, float(x) - model.a0, lo, hi, SELECT_RTOL)
    return (float(alpha), bool(saturated)) if with_flag else float(alpha)


def m2_upper_bound(model: QuadraticFormModel, x: float, alpha: float) -> float:
    """``exp(2 psi(alpha) - 2 alpha (x - a0))``, a bound on ``E_alpha[1{L > x} l^2]`` for the quadratic loss."""
    return math.exp(2.0 * psi(model, alpha) - 2.0 * alpha * (x - model.a0))


class TwistedSample(NamedTuple):
    z: np.ndarray
    dS: np.ndarray
    Q: np.ndarray
    log_lr: np.ndarray


def sample_twisted(model: QuadraticFormModel, alpha: float, rng: np.random.Generator, size: int = 1) -> TwistedSample:
    """Draw ``Z ~ N(alpha B b, B)`` with ``B = (I - 2 alpha diag(lam))^{-1}``.

    Returns ``Z``, ``dS = C Z``, ``Q`` and ``log l = -alpha Q + psi(alpha)``.
    """
    _check_alpha(model, alpha)
    return _twist_transform(model, rng.standard_normal((size, model.m)), float(alpha))


def _twist_transform(model, xi, alpha):
    B = 1.0 / (1.0 - 2.0 * alpha * model.lam)
    z = alpha * B * model.b + np.sqrt(B) * xi
    Q = z @ model.b + (z * z) @ model.lam
    dS = z @ model.C.T
    return TwistedSample(z, dS, Q, -alpha * Q + K.psi(model.b, model.lam, alpha))


# --------------------------------------------------------------------------
# bounds and saddlepoint approximations


def _chernoff_log_bound(model, y):
    a = twist_selector(model, y + model.a0)
    return K.psi(model.b, model.lam, a) - a * y


def _solve_level(fun, start, direction, target):
    """Find ``y`` beyond ``start`` (along ``direction``) with ``fun(y) = target``; ``fun(start) > target``."""
    scale = max(1.0, abs(start), float(direction[1]))
    step = scale
    y = start + direction[0] * step
    for _ in range(200):
        if fun(y) <= target:
            break
        step *= 2.0
        y = start + direction[0] * step
    else:
        raise DomainError("Chernoff bound never reaches the requested level")
    lo, hi = sorted((start, y))
    return optimize.brentq(lambda u: fun(u) - target, lo, hi, xtol=1e-10 * scale, rtol=1e-14)


def var_truncation_bounds(model: QuadraticFormModel, p: float) -> tuple[float, float]:
    """Chernoff-bound interval ``[q_min, q_max]`` containing the delta-gamma ``p``-quantile.

    ``q_max`` is the smallest ``x`` with ``min_alpha exp(psi(alpha) - alpha (x - a0)) <= 1 - p``;
    ``q_min`` is the largest ``x`` whose lower-tail bound (twisting with
    ``alpha < 0``) is at most ``p``.
    """
    if not (0.0 < p < 1.0):
        raise DomainError(f"p must lie in (0, 1), got {p}")
    mu = model.mean_q
    sd = math.sqrt(max(float(np.sum(model.b**2) + 2.0 * np.sum(model.lam**2)), 1e-300))
    up = _solve_level(lambda y: _chernoff_log_bound(model, y), mu, (1.0, sd), math.log1p(-p))
    down = _solve_level(lambda y: _chernoff_log_bound(model, y), mu, (-1.0, sd), math.log(p))
    return float(model.a0 + down), float(model.a0 + up)


def saddlepoint_tail(model: QuadraticFormModel, x: float) -> float:
    """Lugannani-Rice approximation of ``P(a0 + Q > x)``."""
    y = x - model.a0
    a = twist_selector(model, x)
    k = K.psi(model.b, model.lam, a)
    w = math.copysign(math.sqrt(max(2.0 * (a * y - k), 0.0)), a)
    u = a * math.sqrt(K.psi_second(model.b, model.lam, a))
    if abs(w) < 1e-8 or abs(u) < 1e-8:
        return 0.5
    return float(special.ndtr(-w) + math.exp(-0.5 * w * w) / math.sqrt(2 * math.pi) * (1.0 / u - 1.0 / w))


def saddlepoint_density(model: QuadraticFormModel, x: float) -> float:
    """Saddlepoint approximation of the density of ``a0 + Q`` at ``x``."""
    a = twist_selector(model, x)
    k = K.psi(model.b, model.lam, a)
    return math.exp(k - a * (x - model.a0)) / math.sqrt(2.0 * math.pi * K.psi_second(model.b, model.lam, a))


def saddlepoint_var(model: QuadraticFormModel, p: float) -> float:
    """Delta-gamma ``p``-quantile from the Lugannani-Rice tail, searched inside the Chernoff bounds."""
    lo, hi = var_truncation_bounds(model, p)
    return float(optimize.brentq(lambda x: saddlepoint_tail(model, x) - (1.0 - p), lo, hi, xtol=1e-10, rtol=1e-14))


# --------------------------------------------------------------------------
# IS family and VaR/CVaR driver


class TwistedQuadraticFamily(ISFamily):
    """Exponential twisting of the delta-gamma ``Q`` with exact loss repricing.

    A sample is the row ``(L, Q)``; ``output`` extracts the loss.
    """

    kernel_code = K.TWISTED_QUADRATIC
    param_dim = 1
    base_param = 0.0

    def __init__(self, spec: PortfolioSpec, model: Optional[QuadraticFormModel] = None):
        self.spec = spec
        self.model = build_quadratic_form(spec) if model is None else model
        lo, hi = self.model.domain(DOMAIN_INSET)
        aidx, kind, Ks, Ts, qty = spec.arrays()
        V0 = spec.value(spec.S0)
        scal = np.array([spec.rate, spec.horizon, V0, self.model.a0, lo, hi])
        md = self.model
        self.kernel_pf = (
            np.ascontiguousarray(md.b), np.ascontiguousarray(md.lam), np.ascontiguousarray(md.C),
            spec.S0, spec.vols, aidx, kind, Ks, Ts, qty, scal,
        )

    def draw_base(self, rng, size):
        return rng.standard_normal((size, self.model.m))

    def transform(self, base, alpha):
        ts = _twist_transform(self.model, np.atleast_2d(base), float(alpha))
        return np.column_stack([self.spec.losses(ts.dS), ts.Q])

    def output(self, x):
        return np.atleast_2d(x)[:, 0]

    def log_likelihood_ratio(self, x, alpha):
        return -alpha * np.atleast_2d(x)[:, 1] + K.psi(self.model.b, self.model.lam, float(alpha))

    def select(self, theta):
        return twist_selector(self.model, float(np.asarray(theta).reshape(-1)[0]))

    def check_param(self, alpha) -> None:
        _check_alpha(self.model, float(alpha))


@dataclass(frozen=True)
class PortfolioRunConfig:
    """Settings for :func:`estimate_var_cvar`.

    ``None`` fields take defaults derived from the model: SA box from
    :func:`var_truncation_bounds`, SAA twist box ``[I(q_min), I(q_max)]``,
    stepsize constant ``1 / f`` from the saddlepoint density at the
    saddlepoint VaR, exponent 1 (RM-SA) or 0.9 (PR-SA).
    """

    p: float = 0.999
    is_mode: str = "adaptive"
    gamma: Optional[float] = None
    exponent: Optional[float] = None
    box: Optional[tuple[float, float]] = None
    alpha_box: Optional[tuple[float, float]] = None
    fixed_alpha: Optional[float] = None
    theta0: Optional[float] = None
    cvar_batch: Optional[int] = None


class VarCvarResult(NamedTuple):
    var: float
    cvar: float
    trace: RunTrace


@dataclass
class PortfolioSetup:
    """Per-(spec, p) quantities shared across replications."""

    spec: PortfolioSpec
    p: float
    family: TwistedQuadraticFamily = field(init=False)
    bounds: tuple[float, float] = field(init=False)
    dg_var: float = field(init=False)
    density: float = field(init=False)

    def __post_init__(self):
        self.family = TwistedQuadraticFamily(self.spec)
        model = self.family.model
        self.bounds = var_truncation_bounds(model, self.p)
        self.dg_var = saddlepoint_var(model, self.p)
        self.density = saddlepoint_density(model, self.dg_var)


def estimate_var_cvar(
    spec: Union[PortfolioSpec, PortfolioSetup],
    solver: SolverKind,
    config: PortfolioRunConfig,
    n: int,
    seed: int,
) -> VarCvarResult:
    """VaR of the repriced loss by an adaptive-IS solver, then CVaR from a fresh batch.

    ``c_p = v_p + mean((L - v_p)^+ l) / (1 - p)`` over ``cvar_batch`` (default
    ``n``) draws at the twist selected for ``v_p`` (no twist without IS).
    """
    setup = spec if isinstance(spec, PortfolioSetup) else PortfolioSetup(spec, config.p)
    if setup.p != config.p:
        raise ConfigurationError("setup and config disagree on p")
    fam = setup.family
    model = fam.model
    problem = QuantileProblem(config.p, "upper")
    q_lo, q_hi = setup.bounds
    if solver.name == "SAA":
        abox = config.alpha_box or (twist_selector(model, q_lo), twist_selector(model, q_hi))
        trace = run_saa_adaptive(
            problem, fam, FixedTruncation(abox), n, seed, is_mode=config.is_mode,
            fixed_alpha=config.fixed_alpha, retain_samples=False,
        )
    else:
        box = config.box or (q_lo, q_hi)
        gamma = config.gamma if config.gamma is not None else 1.0 / setup.density
        exponent = config.exponent if config.exponent is not None else (1.0 if solver.name == "RM_SA" else 0.9)
        trace = run_sa_adaptive(
            problem, fam, solver, box, StepsizeSchedule(gamma, exponent), n, seed,
            theta0=config.theta0, is_mode=config.is_mode, fixed_alpha=config.fixed_alpha,
            slope=setup.density,
        )
    v = float(trace.final_estimate)
    cvar = cvar_from_var(setup, v, config, config.cvar_batch or n, seed)
    return VarCvarResult(v, cvar, trace)


def cvar_from_var(setup: PortfolioSetup, v: float, config: PortfolioRunConfig, n: int, seed: int) -> float:
    fam = setup.family
    if config.is_mode == "adaptive":
        alpha = fam.select(v)
    elif config.is_mode == "fixed":
        alpha = float(config.fixed_alpha)
    else:
        alpha = 0.0
    rng = make_rng(seed, stream=1)
    x = fam.transform(fam.draw_base(rng, n), alpha)
    w = np.exp(fam.log_likelihood_ratio(x, alpha))
    excess = np.maximum(x[:, 0] - v, 0.0)
    return v + float(np.mean(excess * w)) / (1.0 - config.p)


def delta_gamma_error(spec: PortfolioSpec, n: int = 20000, seed: int = 0) -> tuple[float, float]:
    """Mean absolute gap between the delta-gamma and repriced losses, and the loss standard deviation."""
    model = build_quadratic_form(spec)
    rng = make_rng(seed)
    dS = rng.standard_normal((n, spec.m)) @ _psd_factor(spec.cov_dS).T
    exact = spec.losses(dS)
    approx = model.delta_gamma(dS)
    return float(np.mean(np.abs(exact - approx))), float(np.std(exact, ddof=1))
