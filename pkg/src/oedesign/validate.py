"""Acceptance check suites behind the CLI `validate` command.

Each check returns (name, passed, detail). The oracle suite tests exact
theory identities, the gradient suite tests derivative exactness and the
tilt-path invariants, and the benchmark suite reruns the reduced-scale
benchmark studies end to end.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from . import criteria as cr
from . import dynamics as dyn
from . import evaluate as ev
from . import measure as ms
from . import oracle as orc
from . import solve
from .criteria import RelaxedDesign
from .solve import OptimizerOptions


def _random_lg_model(rng: np.random.Generator) -> orc.LinearGaussianModel:
    n_th = int(rng.integers(1, 4))
    M = int(rng.integers(1, 6))
    nd = int(rng.integers(1, 3))
    A = rng.standard_normal((n_th, n_th))
    return orc.LinearGaussianModel(
        H=rng.standard_normal((M, nd, n_th)),
        b=rng.standard_normal((M, nd)),
        R=rng.uniform(0.2, 2.0, (M, nd)),
        w=(rng.random((M, nd)) < 0.7).astype(float),
        m0=rng.standard_normal(n_th),
        Sigma0=A @ A.T + n_th * np.eye(n_th))


def check_lg_tilt_exactness(n_models: int = 20, seed: int = 3):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_models):
        model = _random_lg_model(rng)
        total, _ = orc.lg_eig_closed_form(model)
        worst = max(worst, abs(total - orc.lg_tilt_exact(model)))
    return worst <= 1e-10, f"max |tilt - closed form| = {worst:.3e} (tol 1e-10)"


def _random_discrete_models(n_models: int, seed: int):
    rng = np.random.default_rng(seed)
    for _ in range(n_models):
        yield orc.random_discrete_model(
            rng, n_theta=int(rng.integers(2, 6)), n_stages=int(rng.integers(2, 4)),
            alphabet=int(rng.integers(2, 4)), inactive=int(rng.integers(0, 2)))


def check_redundancy_identity(n_models: int = 100, seed: int = 11):
    worst = 0.0
    for model in _random_discrete_models(n_models, seed):
        rep = orc.enumerate_mi(model)
        worst = max(worst, float(np.max(np.abs(
            (rep.inst_terms - rep.increments) - rep.gaps))))
    return worst <= 1e-12, f"max identity residual = {worst:.3e} (tol 1e-12)"


def check_surrogate_bounds(n_models: int = 100, seed: int = 11):
    worst = -np.inf
    for model in _random_discrete_models(n_models, seed):
        rep = orc.enumerate_mi(model)
        k = max(rep.k_time, 1)
        slack_hi = rep.j_eig - rep.j_inst               # must be <= 0
        slack_lo = rep.j_inst / k - rep.j_eig           # must be <= 0
        slack_k = rep.j_inst / (k + 2) - rep.j_eig      # any K >= K_time
        worst = max(worst, slack_hi, slack_lo, slack_k)
    return worst <= 1e-12, f"max bound violation = {worst:.3e} (tol 1e-12)"


TILT_BENCH = dict(n_stages=4, sigma=1.5, m0=0.0, s0=0.6)


def check_tilt_convergence(orders=(2, 5, 10, 20)):
    spec, builder = orc.linear_benchmark(TILT_BENCH["n_stages"], TILT_BENCH["sigma"])
    model = builder(np.array([TILT_BENCH["m0"]]),
                    np.array([[TILT_BENCH["s0"] ** 2]]))
    closed, _ = orc.lg_eig_closed_form(model)
    design = RelaxedDesign(np.zeros((1, 1)), np.ones((spec.n_cells, 1)))
    errs = []
    for order in orders:
        cloud = orc.gaussian_cloud([TILT_BENCH["m0"]], [[TILT_BENCH["s0"] ** 2]],
                                   [order])
        val = cr.tilt_objective(design, cloud, spec, cr.single_center(cloud),
                                need_grad=False).value
        errs.append(abs(-val - closed) / abs(closed))
    mono = all(errs[i + 1] <= errs[i] + 1e-14 for i in range(len(errs) - 1))
    ok = mono and errs[-1] <= 1e-3
    return ok, (f"rel errors over orders {orders}: "
                + ", ".join(f"{e:.2e}" for e in errs)
                + f"; monotone={mono}")


def check_entropy_decomposition(n_samples: int = 10**6, seed: int = 21):
    w = np.array([0.3, 0.8])
    sigma = np.array([0.3, 0.7])
    noise = ms.NoiseSpec(sigma, [5, 5])
    rng = np.random.default_rng(seed)
    act = rng.random((n_samples, 2)) < w
    eps = rng.standard_normal((n_samples, 2)) * sigma
    pi_act = np.where(act, w, 1.0 - w)
    neg_log = -np.log(pi_act).sum(axis=1)
    neg_log += np.where(
        act, 0.5 * np.log(2 * math.pi * sigma**2) + eps**2 / (2 * sigma**2),
        0.0).sum(axis=1)
    mc = neg_log.mean()
    se = neg_log.std(ddof=1) / math.sqrt(n_samples)
    pi = cr.config_weights(w)
    closed = float(-(pi * np.log(pi)).sum()
                   + sum(w[d] * ms.noise_entropy(noise, d) for d in range(2)))
    ok = abs(mc - closed) <= 3 * se
    return ok, f"MC {mc:.6f} +- {se:.6f} vs closed form {closed:.6f}"


def oracle_suite():
    return [
        ("lg-tilt-exactness",) + check_lg_tilt_exactness(),
        ("redundancy-identity",) + check_redundancy_identity(),
        ("surrogate-bounds",) + check_surrogate_bounds(),
        ("tilt-quadrature-convergence",) + check_tilt_convergence(),
        ("entropy-decomposition",) + check_entropy_decomposition(),
    ]


# ---------------------------------------------------------------------------
# Gradient and invariant checks
# ---------------------------------------------------------------------------

def _benchmark_setup(name: str, scenario: str):
    spec = dyn.benchmark_model(name, scenario)
    pcfg = dyn.benchmark_prior(name, scenario)
    prior = ms.build_prior(pcfg.dist, pcfg.orders)
    centers = cr.centers_from_cloud(ms.build_prior(pcfg.dist, pcfg.center_orders))
    return spec, prior, centers


def random_feasible_design(spec, rng, slack: float = 0.9) -> RelaxedDesign:
    span = spec.u_hi - spec.u_lo
    u = rng.uniform(spec.u_lo + 0.05 * span, spec.u_hi - 0.05 * span,
                    (spec.n_controls, spec.n_u))
    w = rng.uniform(0.05, 0.95, (spec.n_cells, spec.n_exp))
    total = w.sum()
    if total > slack * spec.budget:
        w *= slack * spec.budget / total
    return RelaxedDesign(u, w)


def check_gradient_exactness(n_designs: int = 5, seed: int = 5, rtol: float = 1e-5,
                             benchmarks=(("harmonic", "similar"),
                                         ("lotka_volterra", "lognormal"))):
    rng = np.random.default_rng(seed)
    worst, where = 0.0, ""
    for name, scenario in benchmarks:
        spec, prior, centers = _benchmark_setup(name, scenario)
        for k in range(n_designs):
            z0 = solve.pack(random_feasible_design(spec, rng))
            for criterion in solve.CRITERIA:
                cs = centers if criterion in ("tilt", "multi_tilt") else None
                evg = solve.objective_and_gradient(spec, prior, criterion, z0, cs)
                g = evg.gradient
                dirs = [g / np.linalg.norm(g)]
                while len(dirs) < 3:
                    v = rng.standard_normal(z0.shape)
                    v /= np.linalg.norm(v)
                    if abs(g @ v) > 1e-6:
                        dirs.append(v)
                for v in dirs:
                    h = 1e-6
                    fp = solve.objective_and_gradient(spec, prior, criterion,
                                                      z0 + h * v, cs,
                                                      need_grad=False).value
                    fm = solve.objective_and_gradient(spec, prior, criterion,
                                                      z0 - h * v, cs,
                                                      need_grad=False).value
                    fd = (fp - fm) / (2 * h)
                    rel = abs(float(g @ v) - fd) / max(abs(fd), 1e-8)
                    if rel > worst:
                        worst, where = rel, f"{name}/{criterion}/design{k}"
    return worst <= rtol, f"max rel gradient error {worst:.2e} at {where} (tol {rtol})"


def check_tilt_path_invariants(seed: int = 9):
    rng = np.random.default_rng(seed)
    worst_sum, worst_neg, worst_ode = 0.0, 0.0, 0.0
    for name, scenario in (("harmonic", "uneven"), ("lotka_volterra", "lognormal")):
        spec, prior, centers = _benchmark_setup(name, scenario)
        uniform = RelaxedDesign(
            np.broadcast_to(0.5 * (spec.u_lo + spec.u_hi),
                            (spec.n_controls, spec.n_u)).copy(),
            np.full((spec.n_cells, spec.n_exp),
                    spec.budget / (spec.n_cells * spec.n_exp)))
        designs = [uniform, random_feasible_design(spec, rng)]
        for design in designs:
            for cs in ([cr.single_center(prior)], [centers]):
                path = cr.tilt_weight_path(design, prior, spec, cs[0])
                worst_sum = max(worst_sum, float(np.abs(path.mu.sum(axis=1) - 1).max()))
                worst_neg = max(worst_neg, float(-(path.mu.min())))
            single = cr.tilt_weight_path(design, prior, spec, cr.single_center(prior))
            mu_rk = cr.replicator_path(prior, prior.mean, single.accumulators[0],
                                       substeps=64)
            worst_ode = max(worst_ode, float(np.abs(mu_rk - single.mu).max()))
    ok = worst_sum <= 1e-9 and worst_neg <= 1e-12 and worst_ode <= 1e-6
    return ok, (f"max |sum mu - 1| = {worst_sum:.2e}, min mu >= {-worst_neg:.2e}, "
                f"max |closed form - replicator RK4| = {worst_ode:.2e}")


def toy_single_sensor_spec():
    """Six-cell, one-sensor oscillator with the control pinned; slack budget."""
    base = dyn.benchmark_model("harmonic", "similar")
    return replace(base, n_exp=1, obs=base.obs[:1],
                   noise=ms.NoiseSpec([0.05], [5]), horizon=6.0,
                   n_cells=6, steps_per_cell=8, n_controls=1,
                   u_lo=np.array([0.5]), u_hi=np.array([0.5]),
                   budget=6, min_separation=0.0)


def check_bang_bang_vertex(tol: float = 1e-3):
    spec = toy_single_sensor_spec()
    prior = ms.build_prior(dyn.benchmark_prior("harmonic", "similar").dist, (3, 3))
    best_val, best_w = np.inf, None
    for bits in range(2 ** spec.n_cells):
        w = np.array([[(bits >> c) & 1] for c in range(spec.n_cells)], dtype=float)
        val = cr.inst_objective(RelaxedDesign(np.array([[0.5]]), w), prior, spec,
                                need_grad=False).value
        if val < best_val:
            best_val, best_w = val, w
    res = solve.optimize_with_info(spec, prior, "inst",
                                   OptimizerOptions(max_iters=300, restarts=2, seed=0))
    gap = float(np.abs(res.design.w - best_w).max())
    ok = gap <= tol and res.proj_grad_norm <= 1e-4
    return ok, (f"vertex gap {gap:.2e} (tol {tol}), projected gradient norm "
                f"{res.proj_grad_norm:.2e}, exhaustive best {best_val:.6f}, "
                f"optimizer {res.value:.6f}")


def gradient_suite():
    return [
        ("gradient-exactness",) + check_gradient_exactness(),
        ("tilt-simplex-replicator",) + check_tilt_path_invariants(),
        ("bang-bang-vertex",) + check_bang_bang_vertex(),
    ]


# ---------------------------------------------------------------------------
# Benchmark reproductions
# ---------------------------------------------------------------------------

BENCH_OPTS = OptimizerOptions(max_iters=150, restarts=2, seed=0)


def run_benchmark_pipeline(problem: str, criteria, runs: int, seed: int,
                           opts: OptimizerOptions = BENCH_OPTS):
    """Design every criterion, evaluate paired, return designs and CSV."""
    from .cli import load_problem
    spec, pcfg = load_problem(problem)
    prior = ms.build_prior(pcfg.dist, pcfg.orders)
    center_cloud = ms.build_prior(pcfg.dist, pcfg.center_orders)
    designs, values = {}, {}
    for criterion in criteria:
        if criterion == "multi_tilt":
            centers = cr.centers_from_cloud(center_cloud)
        elif criterion == "tilt":
            centers = cr.single_center(prior)
        else:
            centers = None
        res = solve.optimize_with_info(spec, prior, criterion, opts, centers)
        _, rounded = solve.finalize_design(spec, prior, criterion, res.design,
                                           centers)
        designs[criterion] = rounded
        values[criterion] = res.value
    report = ev.mc_evaluate(spec, designs, pcfg.dist, prior, runs, seed)
    csv_text = ev.report_to_csv(report, f"problem: {problem}\nseed: {seed}")
    return {"designs": designs, "values": values, "report": report,
            "csv": csv_text}


def sign_test_p_value(wins: int, n: int) -> float:
    """One-sided exact binomial tail P(Bin(n, 1/2) >= wins)."""
    from scipy.stats import binom
    return float(binom.sf(wins - 1, n, 0.5))


def check_harmonic_uneven(result) -> tuple[bool, str]:
    designs = result["designs"]
    inst_sensors = [d for _, d in designs["inst"].activations]
    tilt_s2 = sum(d == 1 for _, d in designs["tilt"].activations)
    multi_s2 = sum(d == 1 for _, d in designs["multi_tilt"].activations)
    ok = (len(inst_sensors) == 8 and all(d == 0 for d in inst_sensors)
          and tilt_s2 >= 1 and multi_s2 >= 1)
    return ok, (f"inst sensors (first,second)=({inst_sensors.count(0)},"
                f"{inst_sensors.count(1)}); tilt second-sensor activations "
                f"{tilt_s2}; multi-center {multi_s2}")


def check_lv_mixture(result) -> tuple[bool, str]:
    med = result["report"].median_errors()
    eig = ("inst", "tilt", "multi_tilt")
    fisher = ("a_opt", "d_opt")
    ordering = all(med[e] < med[f] for e in eig for f in fisher)
    errs_m = result["report"].errors_of("multi_tilt")
    errs_d = result["report"].errors_of("d_opt")
    n = min(len(errs_m), len(errs_d))
    diff = errs_m[:n] - errs_d[:n]
    wins = int((diff < 0).sum())
    ties = int((diff == 0).sum())
    p = sign_test_p_value(wins, n - ties)
    ok = ordering and p < 0.05
    meds = ", ".join(f"{k}={v:.3f}" for k, v in med.items())
    return ok, f"medians: {meds}; sign test multi_tilt<d_opt p={p:.2e}"


def check_harmonic_similar(result) -> tuple[bool, str]:
    med = result["report"].median_errors()
    best = min(med.values())
    eig_ok = all(med[e] <= 1.1 * best for e in ("inst", "tilt", "multi_tilt"))
    multi_best = med["multi_tilt"] == best
    meds = ", ".join(f"{k}={v:.3f}" for k, v in med.items())
    return eig_ok and multi_best, f"medians: {meds}; best={best:.3f}"


def benchmark_suite(runs: int = 200, seed: int = 0):
    """Criteria 9-12: scenario reproductions plus byte-level determinism."""
    all_criteria = list(solve.CRITERIA)
    surrogates = ["inst", "tilt", "multi_tilt"]
    results = []
    uneven = run_benchmark_pipeline("harmonic_uneven", surrogates, 50, seed)
    results.append(("harmonic-uneven-structure",) + check_harmonic_uneven(uneven))
    mixture = run_benchmark_pipeline("lotka_volterra_lognormal_mixture",
                                     all_criteria, runs, seed)
    results.append(("lv-mixture-ordering",) + check_lv_mixture(mixture))
    similar = run_benchmark_pipeline("harmonic_similar", all_criteria, runs, seed)
    results.append(("harmonic-similar-ordering",) + check_harmonic_similar(similar))
    redo = [run_benchmark_pipeline("harmonic_uneven", surrogates, 50, seed),
            run_benchmark_pipeline("lotka_volterra_lognormal_mixture",
                                   all_criteria, runs, seed),
            run_benchmark_pipeline("harmonic_similar", all_criteria, runs, seed)]
    same = all(a["csv"] == b["csv"] for a, b in zip((uneven, mixture, similar), redo))
    results.append(("determinism", same,
                    "byte-identical CSVs on rerun" if same else "CSV mismatch"))
    return results
