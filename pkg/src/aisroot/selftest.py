"""Quick end-to-end consistency checks behind ``aisroot selftest`` (well under a minute)."""

from __future__ import annotations

import numpy as np

from .core import SymmetricLogGrowth, check_unit_mean_lr, make_rng, project_box
from .engines import QuantileProblem, run_saa_adaptive, weighted_empirical_quantile
from .harness import SHIPPED_DUALITY, duality_demo, replicate, toy_setup
from .portfolio import build_quadratic_form, reference_portfolio, twist_selector, psi_prime
from .samplers import ExponentialTiltFamily, NormalShiftFamily, ParetoTiltFamily


def _unit_mean():
    cases = [(NormalShiftFamily(), 3.0), (ExponentialTiltFamily(2.0), 0.75), (ParetoTiltFamily(2.0), 1.5)]
    worst = 0.0
    ok = True
    for fam, a in cases:
        est = check_unit_mean_lr(fam, a, 100_000, seed=1)
        ok &= est.within(1.0, 4.0)
        worst = max(worst, abs(est.mean - 1.0) / est.stderr)
    return ok, f"max |mean-1|/stderr = {worst:.2f}"


def _weighted_quantile(seed):
    rng = make_rng(seed)
    for _ in range(200):
        k = int(rng.integers(1, 8))
        v = rng.integers(0, 5, k).astype(float)
        p = float(rng.uniform(0.01, 0.99))
        brute = min(q for q in v if np.mean(v <= q) >= p)
        if weighted_empirical_quantile(v, np.ones(k), p) != brute:
            return False, f"mismatch on {v.tolist()} at p={p}"
    return True, "200 random instances agree with brute force"


def _determinism(seed):
    fam = NormalShiftFamily()
    a = run_saa_adaptive(QuantileProblem(0.99), fam, SymmetricLogGrowth(), 5000, seed)
    b = run_saa_adaptive(QuantileProblem(0.99), fam, SymmetricLogGrowth(), 5000, seed)
    return a.digest() == b.digest(), a.digest()[:16]


def _kernel_matches_python(seed):
    fam = NormalShiftFamily()
    a = run_saa_adaptive(QuantileProblem(0.999), fam, SymmetricLogGrowth(), 3000, seed)
    b = run_saa_adaptive(QuantileProblem(0.999, h=lambda x: x), fam, SymmetricLogGrowth(), 3000, seed)
    return bool(np.array_equal(a.iterates, b.iterates)), "compiled and Python SAA paths"


def _variance_reduction(seed):
    s = toy_setup("normal", 0.999)
    seeds = range(seed, seed + 40)
    e_is, _ = replicate(s, "SAA", "adaptive", [8000], seeds)
    e_no, _ = replicate(s, "SAA", "none", [8000], seeds)
    ratio = e_no.var(ddof=1) / e_is.var(ddof=1)
    return ratio > 20, f"normal p=0.999 n=8000 SAA variance ratio {ratio:.1f}"


def _duality():
    r = duality_demo(**SHIPPED_DUALITY)
    return r.holds, f"maxmin {r.maxmin:.4f} <= minmax {r.minmax:.4f}"


def _twist_residual():
    m = build_quadratic_form(reference_portfolio())
    worst = 0.0
    for x in np.linspace(0.0, 400.0, 9):
        a, sat = twist_selector(m, x, with_flag=True)
        if not sat:
            y = x - m.a0
            worst = max(worst, abs(psi_prime(m, a) - y) / max(1.0, abs(y)))
    return worst <= 1e-10, f"max relative residual {worst:.2e}"


def _projection():
    v = np.array([-1.0, 3.0, 0.5])
    box = [(0.0, 2.0)] * 3
    once = project_box(v, box)
    return bool(np.array_equal(once, project_box(once, box))), f"{once.tolist()}"


def run_selftest(seed: int = 0) -> list[tuple[str, bool, str]]:
    checks = [
        ("unit-mean likelihood ratios", _unit_mean),
        ("weighted quantile", lambda: _weighted_quantile(seed)),
        ("seed determinism", lambda: _determinism(seed)),
        ("compiled path equivalence", lambda: _kernel_matches_python(seed)),
        ("projection idempotence", _projection),
        ("twist first-order residual", _twist_residual),
        ("duality on shipped grid", _duality),
        ("variance reduction", lambda: _variance_reduction(seed)),
    ]
    out = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
