"""Command-line front end: analyze a CSV experiment, simulate, verify.

Exit codes: 0 success, 1 verification failure, 2 invalid input.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

from .core import validate_dataset
from .errors import InputError, MethodInapplicable, StratAdjError
from .estimators import METHODS, estimate
from .oracle import builtin_fixtures, run_identity_suite
from .simulation import (
    ScenarioConfig,
    inapplicable_table,
    resolve_config,
    run_monte_carlo,
)

SEED_ENV_VAR = "STRATADJ_SEED"


def _sig6(x):
    return None if x is None else float(f"{x:.6g}")


def _parse_methods(spec: str) -> tuple[str, ...]:
    methods = tuple(m.strip() for m in spec.split(",") if m.strip())
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise InputError(f"unknown methods {bad}; choose from {list(METHODS)}")
    if not methods:
        raise InputError("at least one method is required")
    return methods


def read_csv_rows(path: str) -> list[tuple]:
    """Parse the analyze input schema: header stratum,z,y,x1,...,xK."""
    rows = []
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if header[:3] != ["stratum", "z", "y"]:
            raise InputError(f"{path} line 1: header must start with stratum,z,y")
        k = len(header) - 3
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 3 + k:
                raise InputError(
                    f"{path} line {lineno}: expected {3 + k} fields, got {len(rec)}"
                )
            label = rec[0].strip()
            try:
                z = int(rec[1])
                if z not in (0, 1):
                    raise ValueError
            except ValueError:
                raise InputError(f"{path} line {lineno}: z must be 0 or 1, got {rec[1]!r}") from None
            try:
                y = float(rec[2])
                xs = tuple(float(v) for v in rec[3:])
            except ValueError as exc:
                raise InputError(f"{path} line {lineno}: {exc}") from None
            rows.append((label, z, y, xs))
    if not rows:
        raise InputError(f"{path}: no data rows")
    return rows


def _fmt(value, width=10, digits=3):
    if value is None:
        return "n/a".rjust(width)
    return f"{value:.{digits}f}".rjust(width)


def cmd_analyze(args) -> int:
    try:
        rows = read_csv_rows(args.input)
        dataset = validate_dataset(rows)
    except (InputError, StratAdjError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    methods = _parse_methods(args.methods)
    reports = {}
    reasons = {}
    for m in methods:
        try:
            reports[m] = estimate(dataset, m, alpha=args.alpha, df_divisor=args.df_divisor)
        except StratAdjError as exc:
            reasons[m] = str(exc)

    payload = {
        "input": args.input,
        "alpha": args.alpha,
        "n": dataset.design.N,
        "n_strata": dataset.design.B,
        "methods": [],
    }
    for m in methods:
        if m in reasons:
            payload["methods"].append(
                {"method": m, "applicable": False, "reason": reasons[m],
                 "tau_hat": None, "se": None, "ci": None, "strata": []}
            )
            continue
        r = reports[m]
        strata = [
            {
                "stratum": dataset.labels[i],
                "n": st.n,
                "n1": st.n1,
                "tau_hat": _sig6(r.per_stratum[i]),
            }
            for i, st in enumerate(dataset.design.strata)
        ]
        payload["methods"].append(
            {
                "method": m,
                "applicable": True,
                "reason": None,
                "tau_hat": _sig6(r.tau_hat),
                "se": _sig6(r.se),
                "ci": None if r.ci is None else [_sig6(r.ci[0]), _sig6(r.ci[1])],
                "strata": strata,
            }
        )

    text = json.dumps(payload, indent=2)
    if args.format == "json":
        print(text)
    else:
        print(f"n={dataset.design.N} strata={dataset.design.B} alpha={args.alpha}")
        print(f"{'method':<10}{'tau_hat':>10}{'se':>10}{'ci_low':>10}{'ci_high':>10}")
        for m in methods:
            if m in reasons:
                print(f"{m:<10}{'n/a (' + reasons[m] + ')':>10}")
                continue
            r = reports[m]
            lo, hi = r.ci if r.ci is not None else (None, None)
            print(f"{m:<10}{_fmt(r.tau_hat)}{_fmt(r.se)}{_fmt(lo)}{_fmt(hi)}")
        print()
        print("per-stratum effects:")
        ok = [m for m in methods if m not in reasons]
        print(f"{'stratum':<10}{'n':>6}{'n1':>6}" + "".join(f"{m:>12}" for m in ok))
        for i, st in enumerate(dataset.design.strata):
            cells = "".join(_fmt(reports[m].per_stratum[i], width=12) for m in ok)
            print(f"{dataset.labels[i]:<10}{st.n:>6}{st.n1:>6}{cells}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return 0


def _config_from_args(args) -> ScenarioConfig:
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = ScenarioConfig.from_dict(json.load(fh))
        except OSError as exc:
            raise InputError(f"cannot read {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.config}: invalid JSON ({exc})") from exc
    else:
        cfg = ScenarioConfig()
    overrides = {}
    if args.scenario is not None:
        overrides["scenario"] = args.scenario
    for name in ("rho", "B", "size", "K", "reps", "alpha", "boot_reps"):
        v = getattr(args, name)
        if v is not None:
            overrides[name] = v
    if args.methods is not None:
        overrides["methods"] = _parse_methods(args.methods)
    if args.df_divisor is not None:
        overrides["df_divisor"] = args.df_divisor
    seed = args.seed
    if seed is None and os.environ.get(SEED_ENV_VAR):
        try:
            seed = int(os.environ[SEED_ENV_VAR])
        except ValueError:
            raise InputError(f"{SEED_ENV_VAR} must be an integer") from None
    if seed is not None:
        overrides["master_seed"] = seed
    return replace(cfg, **overrides) if overrides else cfg


def cmd_simulate(args) -> int:
    try:
        cfg = resolve_config(_config_from_args(args))
        try:
            table = run_monte_carlo(cfg, workers=args.workers)
        except MethodInapplicable:
            table = inapplicable_table(cfg)
    except (InputError, StratAdjError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    artifact = json.dumps(table.to_dict(), indent=2)
    print("config: " + json.dumps(cfg.to_dict()))
    if args.format == "json":
        print(artifact)
    else:
        print(table.to_text())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(artifact + "\n")
    return 0


def cmd_oracle_check(args) -> int:
    try:
        fixtures = builtin_fixtures(scale=args.scale)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    results = run_identity_suite(fixtures)
    passed = 0
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        passed += r.passed
        print(f"{status}  {r.identity:<24}{r.fixture:<14}err={r.error:.3e}  tol={r.tolerance:.0e}")
    print(f"oracle-check: {passed}/{len(results)} identities passed")
    return 0 if passed == len(results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stratadj",
        description="Estimation and inference for stratified randomized experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="estimate treatment effects from a CSV experiment")
    pa.add_argument("input", help="CSV with header stratum,z,y,x1,...,xK")
    pa.add_argument("--methods", default="unadj,ols,ols_int",
                    help="comma-separated subset of unadj,ols,ols_int")
    pa.add_argument("--alpha", type=float, default=0.05)
    pa.add_argument("--df-divisor", choices=("arm", "stratum"), default="arm", dest="df_divisor")
    pa.add_argument("--format", choices=("table", "json"), default="table")
    pa.add_argument("--out", help="also write the JSON report to this path")
    pa.set_defaults(func=cmd_analyze)

    ps = sub.add_parser("simulate", help="run the Monte Carlo study")
    ps.add_argument("--config", help="JSON config file; flags override its fields")
    ps.add_argument("--scenario", choices=("1", "2", "3", "4", "custom"))
    ps.add_argument("--rho", type=float)
    ps.add_argument("--B", type=int, help="stratum count (scenario 1) / small-stratum count (4)")
    ps.add_argument("--size", type=int, help="stratum size for scenarios 2-3")
    ps.add_argument("--K", type=int)
    ps.add_argument("--reps", type=int)
    ps.add_argument("--boot-reps", type=int, dest="boot_reps")
    ps.add_argument("--alpha", type=float)
    ps.add_argument("--seed", type=int, help=f"master seed (falls back to ${SEED_ENV_VAR})")
    ps.add_argument("--methods")
    ps.add_argument("--df-divisor", choices=("arm", "stratum"), dest="df_divisor")
    ps.add_argument("--workers", type=int, default=1)
    ps.add_argument("--format", choices=("table", "json"), default="table")
    ps.add_argument("--out", help="write the JSON metrics artifact to this path")
    ps.set_defaults(func=cmd_simulate)

    po = sub.add_parser("oracle-check", help="verify the exact finite-sample identities")
    po.add_argument("--scale", choices=("default", "large"), default="default")
    po.add_argument("--workers", type=int, default=1,
                    help="accepted for interface compatibility; results never depend on it")
    po.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
