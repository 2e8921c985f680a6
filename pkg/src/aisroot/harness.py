"""Replication experiments, result tables, CSV output and the minimax duality check."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .core import FixedTruncation, ISFamily, StepsizeSchedule, SymmetricLogGrowth, PowerFloorTruncation, TruncationSchedule, make_rng
from .engines import (
    IS_MODES,
    QuantileProblem,
    SolverKind,
    estimates_at,
    run_sa_adaptive,
    run_saa_adaptive,
)
from .errors import AISError, ConfigurationError
from .portfolio import PortfolioSetup, PortfolioSpec, reference_portfolio, twist_selector
from .samplers import ExponentialTiltFamily, NormalShiftFamily, ParetoTiltFamily

SCENARIOS = ("normal", "exponential", "pareto", "portfolio", "custom")
SOLVERS = ("SAA", "RM_SA", "PR_SA")
DEFAULT_SIZES = tuple(500 * 2**k for k in range(9))
CSV_HEADER = ("scenario", "p", "n", "solver", "is_mode", "mean", "variance", "mse", "ratio")
MAX_FAILURE_FRACTION = 0.01

# SA projection boxes for the toys (quantile values, not tilts)
TOY_SA_BOX = {"normal": (0.0, 5.0), "exponential": (0.0, 10.0), "pareto": (1.0, 150.0)}


# --------------------------------------------------------------------------
# scenario setup


@dataclass(frozen=True)
class ScenarioSetup:
    """Everything a single replication needs: family, true root and solver settings."""

    name: str
    p: float
    family: ISFamily
    q_star: float
    density: float
    trunc: TruncationSchedule
    box: tuple[float, float]
    gamma: float
    fixed_alpha: float
    burn_in: int = 100
    portfolio: Optional[PortfolioSetup] = None
    theta0: Optional[float] = None

    def solver(self, name: str) -> SolverKind:
        return SolverKind.parse(name, self.burn_in)

    def run(self, solver: str, is_mode: str, n: int, seed: int):
        """One replication at budget ``n``; returns the :class:`RunTrace`."""
        kind = self.solver(solver)
        problem = QuantileProblem(self.p, "upper")
        fixed = self.fixed_alpha if is_mode == "fixed" else None
        if kind.name == "SAA":
            return run_saa_adaptive(
                problem, self.family, self.trunc, n, seed, is_mode=is_mode, fixed_alpha=fixed, retain_samples=False
            )
        sched = StepsizeSchedule(self.gamma, 1.0 if kind.name == "RM_SA" else 0.9)
        return run_sa_adaptive(
            problem, self.family, kind, self.box, sched, n, seed, theta0=self.theta0, is_mode=is_mode,
            fixed_alpha=fixed, slope=self.density,
        )


def toy_setup(
    name: str,
    p: float,
    rate: float = 2.0,
    box: Optional[tuple[float, float]] = None,
    gamma: Optional[float] = None,
    burn_in: int = 100,
    theta0: Optional[float] = None,
) -> ScenarioSetup:
    """Default settings for the normal, exponential and Pareto quantile scenarios.

    SAA truncation is ``[-sqrt(log(5 n^0.9)), +...]`` for the normal shift and
    ``[max(0, n^-0.9), rate]`` for the rate families; SA uses ``gamma = 1/f(q*)``
    and a fixed box containing ``q*``. SA starts at the lower end of the box
    unless ``theta0`` is given.
    """
    if name == "normal":
        fam: ISFamily = NormalShiftFamily()
        trunc: TruncationSchedule = SymmetricLogGrowth(5.0, 0.1)
    elif name == "exponential":
        fam = ExponentialTiltFamily(rate)
        trunc = PowerFloorTruncation(upper=rate, c=1.0, eps=0.1)
    elif name == "pareto":
        fam = ParetoTiltFamily(rate)
        trunc = PowerFloorTruncation(upper=rate, c=1.0, eps=0.1)
    else:
        raise ConfigurationError(f"no toy scenario named {name!r}")
    q = fam.quantile(p)
    f = fam.density(q)
    b = box or TOY_SA_BOX[name]
    if not (b[0] < q < b[1]):
        raise ConfigurationError(f"SA box {b} does not contain the true quantile {q}")
    t0 = b[0] if theta0 is None else float(theta0)
    if not (b[0] <= t0 <= b[1]):
        raise ConfigurationError(f"theta0 {t0} lies outside the SA box {b}")
    return ScenarioSetup(name, p, fam, q, f, trunc, tuple(b), gamma or 1.0 / f, fam.select(q), burn_in, None, t0)


def portfolio_setup(
    p: float,
    spec: Optional[PortfolioSpec] = None,
    reference_var: Optional[float] = None,
    box: Optional[tuple[float, float]] = None,
    gamma: Optional[float] = None,
    burn_in: int = 100,
    reference_n: int = 1_000_000,
) -> ScenarioSetup:
    """Settings for the option-book VaR scenario.

    The reference VaR (for MSE and the fixed-twist run) defaults to a single
    large adaptive-IS SAA run with budget ``reference_n``.
    """
    ps = PortfolioSetup(spec or reference_portfolio(), p)
    model = ps.family.model
    q_lo, q_hi = ps.bounds
    trunc = FixedTruncation((twist_selector(model, q_lo), twist_selector(model, q_hi)))
    if reference_var is None:
        tr = run_saa_adaptive(QuantileProblem(p), ps.family, trunc, reference_n, seed=2**31 - 1, retain_samples=False)
        reference_var = float(tr.final_estimate)
    return ScenarioSetup(
        "portfolio", p, ps.family, reference_var, ps.density, trunc, tuple(box or (q_lo, q_hi)),
        gamma or 1.0 / ps.density, ps.family.select(reference_var), burn_in, ps,
    )


# --------------------------------------------------------------------------
# plans and tables


@dataclass(frozen=True)
class ExperimentPlan:
    """A grid of (p, solver, IS mode) cells, each replicated ``replications`` times.

    Every replication is a single run at the largest budget; smaller budgets
    read the same run's prefix.
    """

    scenario: str
    p_levels: tuple[float, ...] = (0.99, 0.999, 0.9999)
    sizes: tuple[int, ...] = DEFAULT_SIZES
    replications: int = 200
    solvers: tuple[str, ...] = SOLVERS
    is_modes: tuple[str, ...] = ("adaptive", "none")
    seed: int = 0
    rate: float = 2.0
    box: Optional[tuple[float, float]] = None
    gamma: Optional[float] = None
    burn_in: int = 100
    portfolio: Optional[PortfolioSpec] = None
    reference_var: Optional[float] = None
    theta0: Optional[float] = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"scenario must be one of {SCENARIOS}")
        if self.replications < 2:
            raise ConfigurationError("replications must be >= 2")
        if not self.sizes or any(int(n) < 1 for n in self.sizes):
            raise ConfigurationError("sizes must be positive")
        if not self.p_levels or any(not (0 < p < 1) for p in self.p_levels):
            raise ConfigurationError("p levels must lie in (0, 1)")
        for s in self.solvers:
            SolverKind.parse(s)
        for m in self.is_modes:
            if m not in IS_MODES:
                raise ConfigurationError(f"IS mode {m!r} not in {IS_MODES}")
        object.__setattr__(self, "sizes", tuple(sorted(int(n) for n in self.sizes)))
        object.__setattr__(self, "p_levels", tuple(float(p) for p in self.p_levels))
        object.__setattr__(self, "solvers", tuple(SolverKind.parse(s).name for s in self.solvers))

    def setup(self, p: float) -> ScenarioSetup:
        if self.scenario == "portfolio":
            return portfolio_setup(p, self.portfolio, self.reference_var, self.box, self.gamma, self.burn_in)
        name = "normal" if self.scenario == "custom" else self.scenario
        return toy_setup(name, p, self.rate, self.box, self.gamma, self.burn_in, self.theta0)

    def replication_seed(self, r: int) -> int:
        return self.seed * 1_000_003 + r

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        spec = d.pop("portfolio", None)
        if isinstance(spec, dict):
            d["portfolio"] = PortfolioSpec.from_dict(spec)
        for key in ("p_levels", "sizes", "solvers", "is_modes", "box"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(f"bad experiment config: {exc}") from exc


@dataclass(frozen=True)
class ResultRow:
    scenario: str
    p: float
    n: int
    solver: str
    is_mode: str
    mean: float
    variance: float
    mse: float
    ratio: float

    @property
    def key(self):
        return (self.scenario, self.p, self.n, self.solver, self.is_mode)


@dataclass
class ResultTable:
    rows: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    estimates: dict = field(default_factory=dict)

    def sorted_rows(self) -> list[ResultRow]:
        return [self.rows[k] for k in sorted(self.rows)]

    def get(self, scenario, p, n, solver, is_mode) -> ResultRow:
        return self.rows[(scenario, float(p), int(n), solver, is_mode)]

    @property
    def invalid_cells(self) -> list:
        return sorted(k for k, v in self.failures.items() if v[0] > MAX_FAILURE_FRACTION * v[1])


def summarize(estimates: np.ndarray, truth: float) -> tuple[float, float, float]:
    """Mean, sample variance (ddof 1) and MSE against ``truth`` of finite estimates."""
    e = np.asarray(estimates, dtype=np.float64)
    e = e[np.isfinite(e)]
    if e.size < 2:
        return math.nan, math.nan, math.nan
    return float(e.mean()), float(e.var(ddof=1)), float(np.mean((e - truth) ** 2))


# --------------------------------------------------------------------------
# running


def replicate(setup: ScenarioSetup, solver: str, is_mode: str, sizes: Sequence[int], seeds: Iterable[int]):
    """Final estimates for each seed and budget; failed runs give NaN rows.

    Returns ``(estimates (len(seeds), len(sizes)), n_failed)``.
    """
    sizes = np.asarray(sorted(sizes), dtype=np.int64)
    kind = setup.solver(solver)
    out = []
    failed = 0
    for s in seeds:
        try:
            tr = setup.run(solver, is_mode, int(sizes[-1]), int(s))
            out.append(estimates_at(tr, kind, sizes))
        except AISError:
            failed += 1
            out.append(np.full(len(sizes), np.nan))
    return np.asarray(out), failed


def _cell_task(args):
    setup, sizes, solver, mode, seeds = args
    est, failed = replicate(setup, solver, mode, sizes, seeds)
    return (setup.p, solver, mode, seeds[0]), est, failed


def run_experiment(plan: ExperimentPlan, jobs: int = 1, chunk: int = 25) -> ResultTable:
    """Run every cell of ``plan``; results are merged by key, independent of scheduling."""
    seeds = [plan.replication_seed(r) for r in range(plan.replications)]
    setups = {p: plan.setup(p) for p in plan.p_levels}
    tasks = []
    for p in plan.p_levels:
        for solver in plan.solvers:
            for mode in plan.is_modes:
                for i in range(0, len(seeds), chunk):
                    tasks.append((setups[p], plan.sizes, solver, mode, seeds[i : i + chunk]))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_cell_task, tasks))
    else:
        results = [_cell_task(t) for t in tasks]

    merged: dict = {}
    fails: dict = {}
    for (p, solver, mode, first), est, failed in results:
        merged.setdefault((p, solver, mode), []).append((first, est))
        fails[(p, solver, mode)] = fails.get((p, solver, mode), 0) + failed
    table = ResultTable()
    for (p, solver, mode), parts in merged.items():
        est = np.concatenate([e for _, e in sorted(parts, key=lambda t: t[0])], axis=0)
        table.estimates[(p, solver, mode)] = est
        truth = setups[p].q_star
        invalid = fails[(p, solver, mode)] > MAX_FAILURE_FRACTION * plan.replications
        for j, n in enumerate(plan.sizes):
            mean, var, mse = summarize(est[:, j], truth)
            key = (plan.scenario, p, n, solver, mode)
            table.failures[key] = (fails[(p, solver, mode)], plan.replications)
            if invalid:
                mean = var = mse = math.nan
            table.rows[key] = ResultRow(plan.scenario, p, n, solver, mode, mean, var, mse, math.nan)
    _fill_ratios(table)
    return table


def _fill_ratios(table: ResultTable) -> None:
    for key, row in list(table.rows.items()):
        ref = table.rows.get(key[:4] + ("none",))
        ratio = math.nan
        if ref is not None and row.variance > 0:
            ratio = ref.variance / row.variance
        table.rows[key] = replace(row, ratio=ratio)


def fixed_optimal_is_run(scenario: str, p: float, n: int, seed: int, solver: str = "SAA", **kw) -> float:
    """Estimate with the IS parameter frozen at ``I(q*)`` (known true quantile).

    Uses the scenario's usual truncation sets and stepsizes.
    """
    setup = toy_setup(scenario, p, **kw) if scenario != "portfolio" else portfolio_setup(p, **kw)
    return float(setup.run(solver, "fixed", n, seed).final_estimate)


# --------------------------------------------------------------------------
# CSV


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_csv(table: ResultTable, path) -> None:
    """Write ``table`` with header ``scenario,p,n,solver,is_mode,mean,variance,mse,ratio``.

    Rows are ordered by key; floats use Python's shortest round-trip repr.
    ``path='-'`` writes to standard output.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in table.sorted_rows():
        w.writerow([_fmt(getattr(r, k)) for k in CSV_HEADER])
    text = buf.getvalue()
    if str(path) == "-":
        import sys

        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text, encoding="utf-8", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_csv(path) -> list[ResultRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        rd = csv.DictReader(fh)
        return [
            ResultRow(r["scenario"], float(r["p"]), int(r["n"]), r["solver"], r["is_mode"], float(r["mean"]),
                      float(r["variance"]), float(r["mse"]), float(r["ratio"]))
            for r in rd
        ]


# --------------------------------------------------------------------------
# minimax duality on a grid


@dataclass(frozen=True)
class DualityResult:
    maxmin: float
    minmax: float
    mc_error: float
    surface: np.ndarray

    @property
    def holds(self) -> bool:
        return self.maxmin <= self.minmax + 3.0 * self.mc_error


def normal_variance_surface(theta: float, alpha: float) -> float:
    """Asymptotic variance of the upper-tail indicator estimator at level ``theta`` under shift ``alpha``."""
    fam = NormalShiftFamily()
    return (fam.second_moment(theta, alpha) - fam.tail(theta) ** 2) / fam.density(theta) ** 2


def duality_demo(
    grid_theta: Sequence[float],
    grid_alpha: Sequence[float],
    family: Optional[ISFamily] = None,
    F: Optional[Callable[[np.ndarray, float], np.ndarray]] = None,
    n_mc: Optional[int] = None,
    seed: int = 0,
    surface: Optional[Callable[[float, float], float]] = None,
) -> DualityResult:
    """Compare ``max_theta min_alpha V`` with ``min_alpha max_theta V`` on a grid.

    ``V(theta, alpha) = Var_alpha(F(X, theta) l) / f'(theta)^2``. With
    ``surface`` given it is evaluated directly; with a family exposing closed
    forms (``second_moment``, ``tail``, ``density``) and no ``n_mc`` the
    tail-indicator surface is exact; otherwise each ``alpha`` column is a
    Monte Carlo estimate from ``n_mc`` draws (``F`` defaults to the upper-tail
    indicator, ``f'`` to the family density).
    """
    th = [float(t) for t in grid_theta]
    al = [float(a) for a in grid_alpha]
    if not th or not al:
        raise ConfigurationError("grids must be nonempty")
    V = np.empty((len(th), len(al)))
    err = 0.0
    if surface is None and family is None:
        surface = normal_variance_surface
    if surface is not None:
        for i, t in enumerate(th):
            for j, a in enumerate(al):
                V[i, j] = surface(t, a)
    elif n_mc is None and F is None and hasattr(family, "second_moment"):
        for i, t in enumerate(th):
            for j, a in enumerate(al):
                V[i, j] = (family.second_moment(t, a) - family.tail(t) ** 2) / family.density(t) ** 2
    else:
        if n_mc is None or n_mc < 2:
            raise ConfigurationError("Monte Carlo surface needs n_mc >= 2")
        F = F or (lambda x, t: (np.asarray(x) >= t).astype(np.float64))
        se = np.empty_like(V)
        rng = make_rng(seed)
        base = family.draw_base(rng, n_mc)
        for j, a in enumerate(al):
            x = family.transform(base, a)
            w = np.exp(family.log_likelihood_ratio(x, a))
            for i, t in enumerate(th):
                y = F(x, t) * w
                d2 = family.density(t) ** 2
                v = y.var(ddof=1)
                V[i, j] = v / d2
                # standard error of a sample variance
                se[i, j] = math.sqrt(max(np.mean((y - y.mean()) ** 4) - v * v, 0.0) / n_mc) / d2
        err = float(se.max())
    maxmin = float(np.max(np.min(V, axis=1)))
    minmax = float(np.min(np.max(V, axis=0)))
    return DualityResult(maxmin, minmax, err, V)


SHIPPED_DUALITY = {
    "grid_theta": [1.5, 2.5, 3.5],
    "grid_alpha": [round(0.05 * k, 10) for k in range(101)],
}


def bootstrap_variance_se(x: np.ndarray, n_boot: int = 2000, seed: int = 0) -> float:
    """Bootstrap standard error of the sample variance of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    rng = make_rng(seed)
    idx = rng.integers(0, x.size, size=(n_boot, x.size))
    return float(np.std(x[idx].var(axis=1, ddof=1), ddof=1))


def load_plan(path) -> ExperimentPlan:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc
    return ExperimentPlan.from_dict(d)
