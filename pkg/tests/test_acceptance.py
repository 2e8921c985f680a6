"""End-to-end acceptance checks at full replication scale.

Each check prints one ``PASS``/``FAIL`` line. The whole module takes roughly a
quarter of an hour on one core.
"""

import math
import subprocess
import sys
import time
from functools import lru_cache

import numpy as np

from aisroot.core import NoTruncation, RootProblem, StepsizeSchedule, SymmetricLogGrowth, make_rng
from aisroot.engines import PR_SA, run_sa_adaptive, run_saa_adaptive
from aisroot.harness import SHIPPED_DUALITY, bootstrap_variance_se, duality_demo, portfolio_setup, replicate, toy_setup
from aisroot.multidim import delta_method_variance, run_sa_adaptive_md, run_saa_adaptive_md, trailing_covariance
from aisroot.portfolio import PortfolioRunConfig, cvar_from_var
from aisroot.samplers import (
    ExponentialTiltFamily,
    NormalShiftFamily,
    ParetoTiltFamily,
    exponential_asymptotic_variance,
    pareto_asymptotic_variance,
)

N = 128_000
REPS = 200
SEEDS = range(REPS)
N_PORTFOLIO = 32_000


@lru_cache(maxsize=None)
def _setup(scenario, p):
    return portfolio_setup(p) if scenario == "portfolio" else toy_setup(scenario, p)


@lru_cache(maxsize=None)
def cell(scenario, p, solver, mode, n=N):
    """Final estimates of ``REPS`` seeded replications."""
    est, failed = replicate(_setup(scenario, p), solver, mode, [n], SEEDS)
    assert failed == 0, f"{failed} failed runs in {scenario} {p} {solver} {mode}"
    return est[:, 0]


def variance(scenario, p, solver, mode, n=N):
    return float(np.var(cell(scenario, p, solver, mode, n), ddof=1))


def report(capsys, label, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {label}: {detail}")


def paired_gap_z(a, b, n_boot=4000, seed=0):
    """``(Var(b) - Var(a)) / bootstrap sd`` with replication indices resampled jointly."""
    rng = make_rng(seed)
    idx = rng.integers(0, a.size, size=(n_boot, a.size))
    gaps = b[idx].var(axis=1, ddof=1) - a[idx].var(axis=1, ddof=1)
    return (b.var(ddof=1) - a.var(ddof=1)) / gaps.std(ddof=1)


def test_1_normal_variance_and_ratio(capsys):
    v_is = variance("normal", 0.999, "SAA", "adaptive")
    ratio = variance("normal", 0.999, "SAA", "none") / v_is
    ok = 0.5 * 2.47e-6 <= v_is <= 2 * 2.47e-6 and ratio >= 100
    report(capsys, 1, ok, f"SAA-IS variance {v_is:.3e} (window [1.235e-06, 4.94e-06]), ratio {ratio:.0f} (>= 100)")
    assert ok


def test_2_scaled_variance_bounded_by_pi(capsys):
    parts, ok = [], True
    for p in (0.99, 0.999, 0.9999):
        e = cell("normal", p, "SAA", "adaptive")
        nv = N * e.var(ddof=1)
        bound = math.pi + 3 * N * bootstrap_variance_se(e, seed=1)
        ok &= nv <= bound
        parts.append(f"p={p}: n*Var {nv:.3f} <= {bound:.3f}")
    report(capsys, 2, ok, "; ".join(parts))
    assert ok


def test_3_heavy_tails_match_formula(capsys):
    parts, ok = [], True
    for name, fam, formula in (("exponential", ExponentialTiltFamily(2.0), exponential_asymptotic_variance),
                               ("pareto", ParetoTiltFamily(2.0), pareto_asymptotic_variance)):
        target = formula(2.0, fam.quantile(0.999))
        r = N * variance(name, 0.999, "SAA", "adaptive") / target
        ok &= 0.5 <= r <= 2
        parts.append(f"{name}: n*Var / formula {r:.3f} (formula {target:.4g})")
    report(capsys, 3, ok, "; ".join(parts))
    assert ok


def test_4_solver_ordering(capsys):
    saa, pr, rm = (cell("normal", 0.99, s, "adaptive") for s in ("SAA", "PR_SA", "RM_SA"))
    z1, z2 = paired_gap_z(saa, pr, seed=2), paired_gap_z(pr, rm, seed=3)
    ok = z1 >= 2 and z2 >= 2
    report(capsys, 4, ok, f"Var SAA {saa.var(ddof=1):.3e} < PR {pr.var(ddof=1):.3e} (z={z1:.2f}) "
                          f"< RM {rm.var(ddof=1):.3e} (z={z2:.2f}); need z >= 2")
    assert ok


def test_5_adaptive_matches_fixed_optimal(capsys):
    parts, ok = [], True
    for s in ("SAA", "PR_SA", "RM_SA"):
        r = variance("normal", 0.999, s, "adaptive") / variance("normal", 0.999, s, "fixed")
        ok &= 0.5 <= r <= 2
        parts.append(f"{s} {r:.3f}")
    report(capsys, 5, ok, "adaptive/fixed variance " + ", ".join(parts) + " (window [0.5, 2])")
    assert ok


def test_6_portfolio(capsys):
    t0 = time.perf_counter()
    setup = _setup("portfolio", 0.999)
    parts, ok = [], True
    for s in ("SAA", "PR_SA"):
        var = {m: cell("portfolio", 0.999, s, m, N_PORTFOLIO) for m in ("adaptive", "none")}
        ratio = var["none"].var(ddof=1) / var["adaptive"].var(ddof=1)
        cv = {}
        for m, est in var.items():
            cfg = PortfolioRunConfig(p=0.999, is_mode=m)
            cv[m] = np.array([cvar_from_var(setup.portfolio, v, cfg, N_PORTFOLIO, seed) for v, seed in zip(est, SEEDS)])
        cv_is, cv_no = cv["adaptive"].var(ddof=1), cv["none"].var(ddof=1)
        ok &= ratio > 100 and cv_is < cv_no
        parts.append(f"{s}: VaR IS var {var['adaptive'].var(ddof=1):.3e}, ratio {ratio:.0f}; "
                     f"CVaR var IS {cv_is:.3e} vs none {cv_no:.3e}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed <= 15 * 60
    report(capsys, 6, ok, "; ".join(parts) + f" ({elapsed:.0f} s)")
    assert ok


PROPERTY_SUITES = [
    "tests/test_properties.py",
    "tests/test_core.py::TestUnitMeanLR",
    "tests/test_core.py::TestProjectBox",
    "tests/test_samplers.py::TestSelectors",
    "tests/test_samplers.py::TestSecondMoments",
    "tests/test_portfolio.py::TestPsi",
    "tests/test_portfolio.py::TestTwistSelector",
    "tests/test_portfolio.py::TestTwistedSampling",
    "tests/test_engines.py::TestSAA::test_no_is_matches_crude_reference",
    "tests/test_engines.py::TestSAA::test_never_tilting_family_matches_no_is",
    "tests/test_engines.py::TestSAA::test_seed_determinism",
]


def test_7_property_suites(capsys, pytestconfig):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_SUITES],
                          cwd=pytestconfig.rootpath, capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    ok = proc.returncode == 0 and elapsed < 60
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    report(capsys, 7, ok, f"{summary} ({elapsed:.1f} s, limit 60 s)")
    assert ok, proc.stdout[-3000:]


def test_8_duality(capsys):
    t0 = time.perf_counter()
    r = duality_demo(SHIPPED_DUALITY["grid_theta"], SHIPPED_DUALITY["grid_alpha"])
    elapsed = time.perf_counter() - t0
    ok = r.maxmin <= r.minmax and elapsed < 10
    report(capsys, 8, ok, f"maxmin {r.maxmin:.4f} <= minmax {r.minmax:.4f} ({elapsed:.2f} s)")
    assert ok


def _delta_oracle_run(seed, A, grad):
    prob = RootProblem(2, lambda x, t: np.asarray(t)[None, :] - np.asarray(x) @ A.T, np.zeros(2))
    tr = run_saa_adaptive_md(prob, NormalShiftFamily(dim=2), NoTruncation(2), N, seed, refit_every=2000)
    J = tr.info["jacobian"]
    return tr.final_estimate @ grad, delta_method_variance(J, trailing_covariance(tr, prob), grad)


def test_9_multidim(capsys):
    fam = NormalShiftFamily()
    smooth = RootProblem(1, lambda x, t: t[None, :] - np.asarray(x).reshape(-1, 1), np.array([0.0]))
    same = all(run_saa_adaptive_md(smooth, fam, SymmetricLogGrowth(), 5000, s, is_mode=m).digest()
               == run_saa_adaptive(smooth, fam, SymmetricLogGrowth(), 5000, s, is_mode=m).digest()
               for s in range(3) for m in ("adaptive", "none"))
    q = fam.quantile(0.99)
    ind = RootProblem(1, lambda x, t: (np.asarray(x).reshape(-1, 1) <= t[0]).astype(float), np.array([0.99]))
    sched = StepsizeSchedule(1 / fam.density(q), 0.9)
    same &= all(run_sa_adaptive_md(ind, fam, PR_SA, (0.0, 5.0), sched, 5000, s).digest()
                == run_sa_adaptive(ind, fam, PR_SA, (0.0, 5.0), sched, 5000, s).digest() for s in range(3))

    A = np.array([[1.0, 0.5], [0.0, 0.8]])
    grad = np.array([1.0, 1.0])
    oracle = float(grad @ A @ A.T @ grad)
    runs = np.array([_delta_oracle_run(s, A, grad) for s in SEEDS])
    plug_in = float(runs[:, 1].mean())
    empirical = N * float(runs[:, 0].var(ddof=1))
    ok = same and abs(plug_in / oracle - 1) <= 0.10
    report(capsys, 9, ok, f"d=1 bit-identical {same}; delta-method variance {plug_in:.4f} vs oracle {oracle:.4f} "
                          f"(rel {plug_in / oracle - 1:+.4f}, limit 0.10); replication n*Var {empirical:.3f}")
    assert ok


def test_ratio_grows_with_rarity(capsys):
    ratios = [variance("normal", p, "SAA", "none") / variance("normal", p, "SAA", "adaptive")
              for p in (0.99, 0.999, 0.9999)]
    ok = ratios[0] < ratios[1] < ratios[2]
    report(capsys, "rarity", ok, "SAA ratio at p=0.99/0.999/0.9999: " + " < ".join(f"{r:.0f}" for r in ratios))
    assert ok
