"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 run failure,
3 failed self-test.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .errors import AISError, ConfigurationError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_RUN, EXIT_SELFTEST = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t)


def _names(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _add_run_flags(sp, scenarios):
    sp.add_argument("--scenario", choices=scenarios, help="problem family")
    sp.add_argument("--p", type=_floats, help="probability level(s), comma separated")
    sp.add_argument("--n", type=_ints, help="sample size(s), comma separated; one run at the largest")
    sp.add_argument("--reps", type=int, help="replications per cell (>= 2)")
    sp.add_argument("--solver", type=_names, help="SAA, RM_SA, PR_SA or 'all' (comma separated)")
    sp.add_argument("--is-mode", type=_names, help="adaptive, none, fixed (comma separated)")
    sp.add_argument("--seed", type=int, help="base seed")
    sp.add_argument("--out", default="-", help="CSV path ('-' for stdout)")
    sp.add_argument("--config", help="JSON experiment config (flags override it)")
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="aisroot", description="Adaptive importance sampling for quantile root finding.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    toy = sub.add_parser("toy", help="normal / exponential / Pareto quantile experiments")
    _add_run_flags(toy, ("normal", "exponential", "pareto", "custom"))

    pf = sub.add_parser("portfolio", help="option-book VaR experiments")
    _add_run_flags(pf, ("portfolio",))
    pf.add_argument("--cvar", action="store_true", help="also report CVaR statistics at the largest n (stderr)")

    du = sub.add_parser("duality", help="grid check of max-min <= min-max asymptotic variance")
    du.add_argument("--config", help="JSON with grid_theta and grid_alpha")
    du.add_argument("--out", default="-", help="where to write the JSON result")

    st = sub.add_parser("selftest", help="fast consistency checks")
    st.add_argument("--seed", type=int, default=0)
    return ap


def _plan_from_args(args, scenario_default: str):
    from .harness import ExperimentPlan, SOLVERS

    base: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{args.config} is not valid JSON: {exc}") from exc
        if "assets" in raw:
            base["portfolio"] = raw
        else:
            base.update(raw)
    base.setdefault("scenario", scenario_default)
    if args.scenario:
        base["scenario"] = args.scenario
    if args.p:
        base["p_levels"] = args.p
    if args.n:
        base["sizes"] = args.n
    if args.reps is not None:
        base["replications"] = args.reps
    if args.solver:
        base["solvers"] = SOLVERS if "all" in [s.lower() for s in args.solver] else args.solver
    if args.is_mode:
        base["is_modes"] = args.is_mode
    if args.seed is not None:
        base["seed"] = args.seed
    if base["scenario"] == "portfolio" and "p_levels" not in base:
        base["p_levels"] = (0.999,)
    return ExperimentPlan.from_dict(base)


def _cmd_run(args, scenario_default: str) -> int:
    from .harness import emit_csv, run_experiment

    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    plan = _plan_from_args(args, scenario_default)
    t0 = time.time()
    table = run_experiment(plan, jobs=args.jobs)
    emit_csv(table, args.out)
    print(f"{len(table.rows)} rows in {time.time() - t0:.1f}s", file=sys.stderr)
    if getattr(args, "cvar", False):
        _report_cvar(plan)
    bad = table.invalid_cells
    if bad:
        for k in bad:
            f, r = table.failures[k]
            print(f"invalid cell {k}: {f}/{r} runs failed", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def _report_cvar(plan) -> None:
    from .engines import SolverKind
    from .portfolio import PortfolioRunConfig, PortfolioSetup, estimate_var_cvar, reference_portfolio

    n = max(plan.sizes)
    for p in plan.p_levels:
        setup = PortfolioSetup(plan.portfolio or reference_portfolio(), p)
        for solver in plan.solvers:
            for mode in plan.is_modes:
                if mode == "fixed":
                    continue
                cfg = PortfolioRunConfig(p=p, is_mode=mode, gamma=plan.gamma, box=plan.box)
                kind = SolverKind.parse(solver, plan.burn_in)
                c = [estimate_var_cvar(setup, kind, cfg, n, plan.replication_seed(r)).cvar for r in range(plan.replications)]
                print(f"cvar p={p} n={n} {solver} {mode}: mean={np.mean(c)!r} variance={np.var(c, ddof=1)!r}",
                      file=sys.stderr)


def _cmd_duality(args) -> int:
    from .harness import SHIPPED_DUALITY, duality_demo

    cfg = dict(SHIPPED_DUALITY)
    if args.config:
        try:
            cfg.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read duality config {args.config}: {exc}") from exc
    res = duality_demo(cfg["grid_theta"], cfg["grid_alpha"])
    text = json.dumps({"maxmin": res.maxmin, "minmax": res.minmax, "holds": res.holds}) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK if res.holds else EXIT_RUN


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(seed=args.seed)
    ok = True
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok &= passed
    return EXIT_OK if ok else EXIT_SELFTEST


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "toy":
            return _cmd_run(args, "normal")
        if args.command == "portfolio":
            return _cmd_run(args, "portfolio")
        if args.command == "duality":
            return _cmd_duality(args)
        return _cmd_selftest(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"aisroot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AISError, OSError) as exc:
        print(f"aisroot: run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
