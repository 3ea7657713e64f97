"""Command-line interface: design, evaluate, validate, reproduce.

All output files start with comment lines recording the exact argv and
seed, and all numbers are printed with 17 significant digits so reruns
with the same seed are byte-identical (timestamps appear only in .log
files, which are excluded from comparisons).
"""

from __future__ import annotations

import argparse
import datetime
import os
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import criteria as cr
from . import evaluate as ev
from . import solve
from .dynamics import PriorConfig, ProblemSpec, benchmark_model
from .measure import (
    LogNormalMixturePrior,
    LogNormalPrior,
    UniformBoxPrior,
    build_prior,
)
from .solve import DiscreteDesign, OptimizerOptions


class ParseError(ValueError):
    """Problem-file parse failure, carrying key and line number."""

    def __init__(self, message: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")


@dataclass(frozen=True)
class RunConfig:
    problem: str
    criteria: tuple[str, ...]
    seed: int
    out_dir: Path
    options: OptimizerOptions


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


# ---------------------------------------------------------------------------
# Problem files
# ---------------------------------------------------------------------------

_SECTIONS = ("model", "control", "sensors", "prior", "budget")

_MODEL_KEYS = {"name", "T", "x0", "steps_per_cell"}
_CONTROL_KEYS = {"intervals", "lower", "upper"}
_BUDGET_KEYS = {"K", "min_separation", "cells"}


def _parse_sections(text: str):
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in _SECTIONS:
                raise ParseError(f"unknown section '{name}'", lineno)
            if name in sections:
                raise ParseError(f"duplicate section '{name}'", lineno)
            sections[name] = {}
            current = name
            continue
        if current is None or "=" not in line:
            raise ParseError(f"expected 'key = value', got '{line}'", lineno)
        key, val = (part.strip() for part in line.split("=", 1))
        if key in sections[current]:
            raise ParseError(f"duplicate key '{key}'", lineno)
        sections[current][key] = (val, lineno)
    missing = [s for s in _SECTIONS if s not in sections]
    if missing:
        raise ParseError(f"missing section(s): {', '.join(missing)}")
    return sections


def _take(section: dict, key: str, lineno_hint: int | None = None) -> tuple[str, int]:
    if key not in section:
        raise ParseError(f"missing key '{key}'", lineno_hint)
    return section.pop(key)


def _floats(val: str, key: str, line: int) -> np.ndarray:
    try:
        return np.array([float(v) for v in val.split()])
    except ValueError:
        raise ParseError(f"key '{key}' must hold numbers", line)


def _reject_unknown(section: dict, name: str):
    if section:
        key, (_, line) = next(iter(section.items()))
        raise ParseError(f"unknown key '{key}' in [{name}]", line)


def parse_problem(path) -> tuple[ProblemSpec, PriorConfig]:
    """Parse a problem file into a spec and its prior configuration.

    The format is strict: exactly the sections [model] [control]
    [sensors] [prior] [budget] with known keys; unknown or missing keys
    are errors naming the key and line.
    """
    text = Path(path).read_text(encoding="utf-8")
    sec = _parse_sections(text)

    model = dict(sec["model"])
    name, nline = _take(model, "name")
    if name not in ("harmonic", "lotka_volterra"):
        raise ParseError(f"unknown model '{name}'", nline)
    t_val, t_line = _take(model, "T")
    x0_val, x0_line = _take(model, "x0")
    spc_val, spc_line = _take(model, "steps_per_cell")
    _reject_unknown(model, "model")

    control = dict(sec["control"])
    n_int, _ = _take(control, "intervals")
    u_lo, ul_line = _take(control, "lower")
    u_hi, uh_line = _take(control, "upper")
    _reject_unknown(control, "control")

    sensors = dict(sec["sensors"])
    cnt_val, cnt_line = _take(sensors, "count")
    try:
        n_exp = int(cnt_val)
    except ValueError:
        raise ParseError("key 'count' must be an integer", cnt_line)
    sig, orders = [], []
    for d in range(1, n_exp + 1):
        sv, sl = _take(sensors, f"sigma_{d}", cnt_line)
        if float(sv) <= 0:
            raise ParseError(f"sigma_{d} must be positive", sl)
        sig.append(float(sv))
        ov, _ = _take(sensors, f"noise_order_{d}", cnt_line)
        orders.append(int(ov))
    _reject_unknown(sensors, "sensors")

    prior_cfg = _parse_prior(dict(sec["prior"]))

    budget = dict(sec["budget"])
    k_val, _ = _take(budget, "K")
    ms_val, _ = _take(budget, "min_separation")
    cells_val, _ = _take(budget, "cells")
    _reject_unknown(budget, "budget")

    scenario = "similar" if name == "harmonic" else "lognormal"
    base = benchmark_model(name, scenario)
    from .measure import NoiseSpec
    spec = replace(
        base,
        horizon=float(t_val),
        x0=_floats(x0_val, "x0", x0_line),
        steps_per_cell=int(spc_val),
        n_controls=int(n_int),
        u_lo=_floats(u_lo, "lower", ul_line),
        u_hi=_floats(u_hi, "upper", uh_line),
        n_exp=n_exp,
        obs=base.obs[:n_exp],
        noise=NoiseSpec(np.array(sig), np.array(orders)),
        budget=int(k_val),
        min_separation=float(ms_val),
        n_cells=int(cells_val),
    )
    return spec, prior_cfg


def _parse_prior(section: dict) -> PriorConfig:
    kind, kline = _take(section, "kind")
    orders_val, ol = _take(section, "orders")
    centers_val, cl = _take(section, "center_orders")
    orders = tuple(int(v) for v in orders_val.split())
    center_orders = tuple(int(v) for v in centers_val.split())
    if kind == "uniform_box":
        lo, ll = _take(section, "lower")
        hi, hl = _take(section, "upper")
        dist = UniformBoxPrior(_floats(lo, "lower", ll), _floats(hi, "upper", hl))
    elif kind == "lognormal":
        m, ml = _take(section, "mean_log")
        v, vl = _take(section, "var_log")
        dist = LogNormalPrior(_floats(m, "mean_log", ml),
                              np.diag(_floats(v, "var_log", vl)))
    elif kind == "lognormal_mixture":
        wts, wl = _take(section, "weights")
        weights = _floats(wts, "weights", wl)
        comps = []
        for j in range(1, weights.shape[0] + 1):
            m, ml = _take(section, f"mean_log_{j}")
            v, vl = _take(section, f"var_log_{j}")
            comps.append(LogNormalPrior(_floats(m, f"mean_log_{j}", ml),
                                        np.diag(_floats(v, f"var_log_{j}", vl))))
        dist = LogNormalMixturePrior(weights, tuple(comps))
    else:
        raise ParseError(f"unknown prior kind '{kind}'", kline)
    _reject_unknown(section, "prior")
    return PriorConfig(dist, orders, center_orders)


_BUNDLED = {
    "harmonic_similar": ("harmonic", "similar"),
    "harmonic_uneven": ("harmonic", "uneven"),
    "lotka_volterra_lognormal": ("lotka_volterra", "lognormal"),
    "lotka_volterra_lognormal_mixture": ("lotka_volterra", "lognormal_mixture"),
}


def load_problem(problem: str) -> tuple[ProblemSpec, PriorConfig]:
    """Resolve a --problem argument: a file path or a bundled scenario name."""
    p = Path(problem)
    if p.exists():
        return parse_problem(p)
    if problem in _BUNDLED:
        ref = resources.files("oedesign").joinpath(f"problems/{problem}.spec")
        with resources.as_file(ref) as path:
            return parse_problem(path)
    raise ParseError(f"problem '{problem}' is neither a file nor a bundled scenario "
                     f"(bundled: {', '.join(sorted(_BUNDLED))})")


# ---------------------------------------------------------------------------
# Design and evaluation file formats
# ---------------------------------------------------------------------------

def _header(argv, seed) -> str:
    return f"# argv: {' '.join(argv)}\n# seed: {seed}\n"


def write_relaxed(path: Path, design: cr.RelaxedDesign, argv, seed, value):
    lines = [_header(argv, seed).rstrip("\n"), f"# value: {_fmt(value)}", "[control]"]
    for row in design.u:
        lines.append(" ".join(_fmt(v) for v in row))
    lines.append("[weights]")
    for row in design.w:
        lines.append(" ".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_design(path: Path, design: DiscreteDesign, argv, seed):
    lines = [_header(argv, seed).rstrip("\n"), "[control]"]
    for row in design.u:
        lines.append(" ".join(_fmt(v) for v in row))
    lines.append("[activations]")
    for t, d in design.activations:
        lines.append(f"{_fmt(t)} {d}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_design(path: Path) -> DiscreteDesign:
    u_rows, acts = [], []
    mode = None
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[control]":
            mode = "u"
        elif line == "[activations]":
            mode = "a"
        elif mode == "u":
            u_rows.append([float(v) for v in line.split()])
        elif mode == "a":
            t, d = line.split()
            acts.append((float(t), int(d)))
        else:
            raise ParseError(f"unexpected line '{line}' in design file")
    return DiscreteDesign(tuple(acts), np.array(u_rows))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _centers_for(criterion, prior_cloud, prior_cfg):
    if criterion == "multi_tilt":
        return cr.centers_from_cloud(build_prior(prior_cfg.dist,
                                                 prior_cfg.center_orders))
    if criterion == "tilt":
        return cr.single_center(prior_cloud)
    return None


def cmd_design(args, argv) -> int:
    spec, pcfg = load_problem(args.problem)
    prior = build_prior(pcfg.dist, pcfg.orders)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    opts = OptimizerOptions(max_iters=args.max_iters, restarts=args.restarts,
                            seed=args.seed)
    for criterion in args.criterion:
        centers = _centers_for(criterion, prior, pcfg)
        res = solve.optimize_with_info(spec, prior, criterion, opts, centers)
        _, rounded = solve.finalize_design(spec, prior, criterion, res.design,
                                           centers)
        write_relaxed(out / f"{criterion}.relaxed", res.design, argv, args.seed,
                      res.value)
        write_design(out / f"{criterion}.design", rounded, argv, args.seed)
        stamp = datetime.datetime.now().isoformat()
        log = [_header(argv, args.seed).rstrip("\n"),
               f"# timestamp: {stamp}",
               f"criterion {criterion}",
               f"value {_fmt(res.value)}",
               f"projected_gradient_norm {_fmt(res.proj_grad_norm)}",
               f"iterations {res.n_iters}",
               "restart_values " + " ".join(_fmt(v) for v in res.restart_values)]
        (out / f"{criterion}.log").write_text("\n".join(log) + "\n", encoding="utf-8")
        print(f"{criterion}: value {_fmt(res.value)} "
              f"activations {len(rounded.activations)}")
    return 0


def cmd_evaluate(args, argv) -> int:
    spec, pcfg = load_problem(args.problem)
    design_dir = Path(args.designs)
    files = sorted(design_dir.glob("*.design"))
    if not files:
        print(f"error: no *.design files in {design_dir} "
              f"(expected e.g. {', '.join(c + '.design' for c in solve.CRITERIA)})",
              file=sys.stderr)
        return 2
    designs = {f.stem: read_design(f) for f in files}
    prior = build_prior(pcfg.dist, pcfg.orders)
    report = ev.mc_evaluate(spec, designs, pcfg.dist, prior, args.runs, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_text = ev.report_to_csv(report, f"argv: {' '.join(argv)}\nseed: {args.seed}")
    (out / "errors.csv").write_text(csv_text, encoding="utf-8")
    for method, med in report.median_errors().items():
        print(f"{method}: median err_l2 {_fmt(med)}")
    return 0


def cmd_validate(args, argv) -> int:
    from . import validate as val
    suites = {"oracle": val.oracle_suite, "gradients": val.gradient_suite,
              "benchmarks": val.benchmark_suite}
    names = [args.suite] if args.suite else ["oracle", "gradients"]
    all_ok = True
    for name in names:
        results = suites[name]()
        for check, ok, detail in results:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}/{check}: {detail}")
            all_ok &= ok
    return 0 if all_ok else 1


_FIGURES = {1: "harmonic_similar", 2: "harmonic_uneven",
            3: "lotka_volterra_lognormal", 4: "lotka_volterra_lognormal_mixture"}


def cmd_reproduce(args, argv) -> int:
    problem = _FIGURES[args.figure]
    out = Path(args.out) / f"fig{args.figure}"
    d_args = argparse.Namespace(problem=problem, criterion=list(solve.CRITERIA),
                                seed=args.seed, out=str(out),
                                max_iters=args.max_iters, restarts=args.restarts)
    rc = cmd_design(d_args, argv)
    if rc != 0:
        return rc
    e_args = argparse.Namespace(problem=problem, designs=str(out), runs=args.runs,
                                seed=args.seed, out=str(out))
    return cmd_evaluate(e_args, argv)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="oedesign",
        description="Optimal experimental design for controlled ODE systems")
    ap.add_argument("--threads", type=int, default=None,
                    help="worker threads (default: env OED_THREADS or 1)")
    sub = ap.add_subparsers(dest="command", required=True)

    d = sub.add_parser("design", help="optimize and round designs")
    d.add_argument("--problem", required=True)
    d.add_argument("--criterion", required=True,
                   type=lambda s: [c.strip() for c in s.split(",")],
                   help=f"comma-separated from {','.join(solve.CRITERIA)}")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--max-iters", type=int, default=500, dest="max_iters")
    d.add_argument("--restarts", type=int, default=5)

    e = sub.add_parser("evaluate", help="Monte Carlo evaluation of designs")
    e.add_argument("--problem", required=True)
    e.add_argument("--designs", required=True)
    e.add_argument("--runs", type=int, default=200)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)

    v = sub.add_parser("validate", help="run acceptance check suites")
    v.add_argument("--suite", choices=["oracle", "gradients", "benchmarks"])

    r = sub.add_parser("reproduce", help="design + evaluate for one benchmark study")
    r.add_argument("--figure", type=int, choices=sorted(_FIGURES), required=True)
    r.add_argument("--runs", type=int, default=200)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="out")
    r.add_argument("--max-iters", type=int, default=500, dest="max_iters")
    r.add_argument("--restarts", type=int, default=5)
    return ap


def dispatch(argv) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if args.threads is not None:
        os.environ["OED_THREADS"] = str(args.threads)
    handlers = {"design": cmd_design, "evaluate": cmd_evaluate,
                "validate": cmd_validate, "reproduce": cmd_reproduce}
    try:
        return handlers[args.command](args, ["oedesign"] + list(argv))
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (solve.OptimizationFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
