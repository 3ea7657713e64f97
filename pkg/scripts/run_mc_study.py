"""Full design + paired-evaluation study for one benchmark scenario.

Equivalent to `oedesign reproduce` but callable with custom run counts;
prints per-method medians and writes the error CSV.

Usage: python scripts/run_mc_study.py [problem] [runs] [seed] [outdir]
"""

import sys
from pathlib import Path

from oedesign import validate as val


def main():
    problem = sys.argv[1] if len(sys.argv) > 1 else "lotka_volterra_lognormal_mixture"
    runs = int(sys.argv[2]) if len(sys.argv) > 2 else 200
    seed = int(sys.argv[3]) if len(sys.argv) > 3 else 0
    outdir = Path(sys.argv[4]) if len(sys.argv) > 4 else Path("out")
    result = val.run_benchmark_pipeline(
        problem, ["a_opt", "d_opt", "inst", "tilt", "multi_tilt"], runs, seed)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / f"{problem}_errors.csv"
    csv_path.write_text(result["csv"], encoding="utf-8")
    print(f"wrote {csv_path}")
    for method, median in result["report"].median_errors().items():
        mean = result["report"].mean_errors()[method]
        print(f"{method:>10}: median {median:.4f}  mean {mean:.4f}")


if __name__ == "__main__":
    main()
