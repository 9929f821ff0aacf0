"""TPE vs uniform random search on the synthetic benchmarks with known optima.

    python scripts/tpe_benchmark.py [--seeds 20] [--trials 50] [--out runs/tpe_benchmark.json]
"""
import argparse
import json
from pathlib import Path

import numpy as np

from eedet.tpe import (GRID_OPTIMUM, grid_benchmark, grid_benchmark_space, mixed_benchmark, mixed_benchmark_space,
                       random_suggest, run_study, sharp_benchmark, tpe_suggest)

BENCHMARKS = {"mixed": mixed_benchmark, "sharp": sharp_benchmark}


def best_values(fn, sampler, seeds, trials):
    return [run_study(mixed_benchmark_space(), trials, fn, seed=s, sampler=sampler)[0].J for s in range(seeds)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--trials", type=int, default=50)
    ap.add_argument("--grid-trials", type=int, default=60)
    ap.add_argument("--out", default="runs/tpe_benchmark.json")
    args = ap.parse_args()
    out = {}
    for name, fn in BENCHMARKS.items():
        tpe = best_values(fn, tpe_suggest, args.seeds, args.trials)
        rnd = best_values(fn, random_suggest, args.seeds, args.trials)
        out[name] = {"tpe_median": float(np.median(tpe)), "random_median": float(np.median(rnd)),
                     "tpe": tpe, "random": rnd}
        print(f"{name:6s} median best J  tpe {np.median(tpe):.4f}  random {np.median(rnd):.4f}")
    hits = sum(run_study(grid_benchmark_space(), args.grid_trials, grid_benchmark, seed=s)[0].assignment
               == GRID_OPTIMUM for s in range(args.seeds))
    out["grid"] = {"hits": hits, "seeds": args.seeds, "trials": args.grid_trials}
    print(f"grid   optimum found in {hits}/{args.seeds} seeds at {args.grid_trials} trials")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
