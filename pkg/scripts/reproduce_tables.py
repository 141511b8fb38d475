#!/usr/bin/env python3
"""Run the four simulation scenarios at desk scale and print the summary tables.

Full-scale settings (10000 replications) are a --reps flag away; expect the
qualitative picture to be stable while exact numbers move with the population
draw.
"""
import argparse
import time

from stratadj.simulation import ScenarioConfig, run_monte_carlo

GRID = [
    ("1", {"B": 25}), ("1", {"B": 50}), ("1", {"B": 100}),
    ("2", {"size": 100}), ("2", {"size": 200}), ("2", {"size": 500}),
    ("3", {"size": 100}), ("3", {"size": 200}), ("3", {"size": 500}),
    ("4", {"B": 25}), ("4", {"B": 50}), ("4", {"B": 100}),
]


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=20240)
    parser.add_argument("--rho", type=float, nargs="*", default=[0.0, 0.5])
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--scenarios", nargs="*", default=None,
                        help="subset of scenario ids, e.g. --scenarios 1 3")
    args = parser.parse_args()

    for scenario, params in GRID:
        if args.scenarios and scenario not in args.scenarios:
            continue
        for rho in args.rho:
            cfg = ScenarioConfig(scenario=scenario, rho=rho, reps=args.reps,
                                 master_seed=args.seed, **params)
            t0 = time.time()
            table = run_monte_carlo(cfg, workers=args.workers)
            dt = time.time() - t0
            knob = ", ".join(f"{k}={v}" for k, v in params.items())
            print(f"== scenario {scenario} ({knob}, rho={rho}) "
                  f"[reps={args.reps}, {dt:.1f}s, tau={table.tau:.3f}]")
            print(table.to_text())
            print()


if __name__ == "__main__":
    main()
