"""Design one benchmark scenario under every criterion and print the
resulting schedules side by side.

Usage: python scripts/run_design_study.py [problem] [seed]
with problem one of the bundled scenario names (default harmonic_uneven).
"""

import sys
import time

from oedesign import criteria as cr
from oedesign import measure as ms
from oedesign import solve
from oedesign.cli import load_problem
from oedesign.solve import OptimizerOptions


def main():
    problem = sys.argv[1] if len(sys.argv) > 1 else "harmonic_uneven"
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
    spec, pcfg = load_problem(problem)
    prior = ms.build_prior(pcfg.dist, pcfg.orders)
    center_cloud = ms.build_prior(pcfg.dist, pcfg.center_orders)
    opts = OptimizerOptions(max_iters=150, restarts=2, seed=seed)
    print(f"{problem}: budget {spec.budget}, separation {spec.min_separation}, "
          f"{prior.size} prior atoms, {center_cloud.size} tilt centers")
    for criterion in solve.CRITERIA:
        if criterion == "multi_tilt":
            centers = cr.centers_from_cloud(center_cloud)
        elif criterion == "tilt":
            centers = cr.single_center(prior)
        else:
            centers = None
        t0 = time.time()
        res = solve.optimize_with_info(spec, prior, criterion, opts, centers)
        _, schedule = solve.finalize_design(spec, prior, criterion, res.design,
                                            centers)
        per_sensor = [sum(1 for _, d in schedule.activations if d == s)
                      for s in range(spec.n_exp)]
        times = " ".join(f"{t:.2f}" for t, _ in sorted(schedule.activations))
        print(f"{criterion:>10}: value {res.value:+.5f}  sensors {per_sensor}  "
              f"times [{times}]  ({time.time() - t0:.0f}s)")


if __name__ == "__main__":
    main()
