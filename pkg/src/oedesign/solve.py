"""Transcription and optimization of the relaxed design problems.

The decision vector is the flat layout [u cells | w cells]; feasibility is
a box on u and a box-plus-budget set on w. Optimization is multi-start
projected gradient with Armijo backtracking; the feasible set has an
exact cheap Euclidean projection, so every iterate is feasible and the
objective sequence is non-increasing. Rounding converts the relaxed
weights to a discrete activation schedule under the separation rule.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import criteria as cr
from .criteria import ObjectiveEval, RelaxedDesign
from .dynamics import IntegrationBlowup, ProblemSpec
from .measure import ParticleCloud

CRITERIA = ("a_opt", "d_opt", "inst", "tilt", "multi_tilt")


class OptimizationFailure(RuntimeError):
    """Every restart diverged or failed to produce a finite objective."""


@dataclass(frozen=True)
class OptimizerOptions:
    max_iters: int = 500
    rel_tol: float = 1e-6
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    restarts: int = 5
    seed: int = 0
    max_backtracks: int = 40

    def __post_init__(self):
        if min(self.max_iters, self.restarts, self.max_backtracks) < 1:
            raise ValueError("optimizer options must be positive")
        if not (0 < self.backtrack < 1 and 0 < self.armijo_c < 1):
            raise ValueError("invalid line-search parameters")


@dataclass(frozen=True)
class DiscreteDesign:
    """Rounded design: (time, sensor) activations plus the control."""

    activations: tuple[tuple[float, int], ...]
    u: np.ndarray  # (N_u, n_u)

    def __post_init__(self):
        object.__setattr__(self, "u", np.atleast_2d(np.asarray(self.u, dtype=float)))
        object.__setattr__(self, "activations",
                           tuple((float(t), int(d)) for t, d in self.activations))


@dataclass
class OptimizeResult:
    design: RelaxedDesign
    value: float
    proj_grad_norm: float
    n_iters: int
    restart_values: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Decision-vector layout
# ---------------------------------------------------------------------------

def n_decisions(spec: ProblemSpec) -> int:
    return spec.n_controls * spec.n_u + spec.n_cells * spec.n_exp


def pack(design: RelaxedDesign) -> np.ndarray:
    return np.concatenate([design.u.ravel(), design.w.ravel()])


def unpack(z: np.ndarray, spec: ProblemSpec) -> RelaxedDesign:
    nu = spec.n_controls * spec.n_u
    return RelaxedDesign(z[:nu].reshape(spec.n_controls, spec.n_u),
                         z[nu:].reshape(spec.n_cells, spec.n_exp))


def objective_and_gradient(spec: ProblemSpec, prior: ParticleCloud, criterion: str,
                           z: np.ndarray, centers=None,
                           need_grad: bool = True) -> ObjectiveEval:
    """Dispatch a decision vector to the requested criterion."""
    design = unpack(np.asarray(z, dtype=float), spec)
    if criterion == "a_opt":
        return cr.fisher_objective(design, prior.mean, spec, "A", need_grad)
    if criterion == "d_opt":
        return cr.fisher_objective(design, prior.mean, spec, "D", need_grad)
    if criterion == "inst":
        return cr.inst_objective(design, prior, spec, need_grad)
    if criterion == "tilt":
        cs = centers if centers is not None else cr.single_center(prior)
        return cr.tilt_objective(design, prior, spec, cs, need_grad)
    if criterion == "multi_tilt":
        if centers is None:
            raise ValueError("multi_tilt requires tilting centers")
        return cr.tilt_objective(design, prior, spec, centers, need_grad)
    raise ValueError(f"unknown criterion '{criterion}' (choose from {CRITERIA})")


# ---------------------------------------------------------------------------
# Feasible-set projection
# ---------------------------------------------------------------------------

def project_capped_box(w: np.ndarray, cap: float, tol: float = 1e-12) -> np.ndarray:
    """Euclidean projection onto {0 <= w <= 1, sum(w) <= cap}.

    Box clipping with a scalar shift: the KKT solution is clip(w - tau, 0,
    1) where tau = 0 if the clipped point already meets the budget and
    otherwise solves sum clip(w - tau, 0, 1) = cap, found by bisection.
    """
    clipped = np.clip(w, 0.0, 1.0)
    if clipped.sum() <= cap + tol:
        return clipped
    lo_t, hi_t = 0.0, float(w.max())
    for _ in range(200):
        mid = 0.5 * (lo_t + hi_t)
        s = np.clip(w - mid, 0.0, 1.0).sum()
        if abs(s - cap) <= tol:
            break
        if s > cap:
            lo_t = mid
        else:
            hi_t = mid
    return np.clip(w - 0.5 * (lo_t + hi_t), 0.0, 1.0)


def project_feasible(z: np.ndarray, spec: ProblemSpec) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    nu = spec.n_controls * spec.n_u
    u = np.clip(z[:nu].reshape(spec.n_controls, spec.n_u), spec.u_lo, spec.u_hi)
    w = project_capped_box(z[nu:], float(spec.budget))
    return np.concatenate([u.ravel(), w])


# ---------------------------------------------------------------------------
# Multi-start projected gradient
# ---------------------------------------------------------------------------

def _initial_points(spec: ProblemSpec, opts: OptimizerOptions) -> list[np.ndarray]:
    rng = np.random.default_rng(opts.seed)
    u_mid = 0.5 * (spec.u_lo + spec.u_hi)
    w0 = np.full(spec.n_cells * spec.n_exp,
                 spec.budget / (spec.n_cells * spec.n_exp))
    starts = []
    for r in range(opts.restarts):
        u = np.broadcast_to(u_mid, (spec.n_controls, spec.n_u)).copy()
        if r > 0:
            u += rng.uniform(-0.5, 0.5, u.shape) * (spec.u_hi - spec.u_lo)
            u = np.clip(u, spec.u_lo, spec.u_hi)
        starts.append(np.concatenate([u.ravel(), w0]))
    return starts


def _pg_single(spec, prior, criterion, z0, opts, centers):
    evaluate = lambda z, g: objective_and_gradient(spec, prior, criterion, z,
                                                   centers, need_grad=g)
    z = project_feasible(z0, spec)
    ev = evaluate(z, True)
    f, g = ev.value, ev.gradient
    alpha = 1.0
    stall = 0
    it = 0
    for it in range(1, opts.max_iters + 1):
        accepted = False
        backtracks = 0
        for backtracks in range(opts.max_backtracks):
            z_try = project_feasible(z - alpha * g, spec)
            step = z_try - z
            if np.abs(step).max() == 0.0:
                break
            f_try = evaluate(z_try, False).value
            if f_try <= f + opts.armijo_c * float(g @ step):
                accepted = True
                break
            alpha *= opts.backtrack
        if not accepted:
            break
        drop = f - f_try
        z, f = z_try, f_try
        g = evaluate(z, True).gradient
        if backtracks == 0:
            alpha = min(alpha * 2.0, 1e3)
        if drop <= opts.rel_tol * (1.0 + abs(f)):
            stall += 1
            if stall >= 2:
                break
        else:
            stall = 0
    pg_norm = float(np.linalg.norm(project_feasible(z - g, spec) - z))
    return z, f, pg_norm, it


def _worker_count() -> int:
    env = os.environ.get("OED_THREADS", "1")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def optimize_with_info(spec: ProblemSpec, prior: ParticleCloud, criterion: str,
                       opts: OptimizerOptions | None = None,
                       centers=None) -> OptimizeResult:
    """Multi-start projected gradient; deterministic best-of selection."""
    opts = opts or OptimizerOptions()
    starts = _initial_points(spec, opts)

    def run(idx_start):
        idx, z0 = idx_start
        try:
            z, f, pg, it = _pg_single(spec, prior, criterion, z0, opts, centers)
            return idx, z, f, pg, it, None
        except (IntegrationBlowup, FloatingPointError) as exc:
            return idx, None, np.inf, np.inf, 0, exc

    workers = min(_worker_count(), len(starts))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, enumerate(starts)))
    else:
        results = [run(p) for p in enumerate(starts)]
    results.sort(key=lambda r: r[0])
    finite = [r for r in results if np.isfinite(r[2])]
    if not finite:
        msgs = "; ".join(f"restart {r[0]}: {r[5]}" for r in results)
        raise OptimizationFailure(f"all restarts failed ({msgs})")
    best = min(finite, key=lambda r: (r[2], r[0]))
    return OptimizeResult(design=unpack(best[1], spec), value=float(best[2]),
                          proj_grad_norm=float(best[3]), n_iters=int(best[4]),
                          restart_values=[float(r[2]) for r in results])


def optimize(spec: ProblemSpec, prior: ParticleCloud, criterion: str,
             opts: OptimizerOptions | None = None, centers=None) -> RelaxedDesign:
    return optimize_with_info(spec, prior, criterion, opts, centers).design


# ---------------------------------------------------------------------------
# Rounding to a discrete schedule
# ---------------------------------------------------------------------------

def _indicator_weights(spec: ProblemSpec, design: DiscreteDesign) -> np.ndarray:
    grid = spec.grid()
    mids = grid.cell_mid_times()
    w = np.zeros((grid.n_cells, spec.n_exp))
    for t, d in design.activations:
        w[int(np.argmin(np.abs(mids - t))), d] = 1.0
    return w


def spillover_round(relaxed: RelaxedDesign, spec: ProblemSpec) -> DiscreteDesign:
    """Weight-ranked rounding that relocates separation-blocked weight.

    Same ranking and admissibility as `round_design`, but a candidate
    whose midpoint conflicts with the chosen times is reassigned to the
    nearest unused same-sensor cell that satisfies the separation rule,
    instead of being dropped. Sensors with zero relaxed weight are never
    activated.
    """
    grid = spec.grid()
    mids = grid.cell_mid_times()
    C, n_exp = relaxed.w.shape
    t_arr = np.repeat(mids, n_exp)
    d_arr = np.tile(np.arange(n_exp), C)
    c_arr = np.repeat(np.arange(C), n_exp)
    w_arr = relaxed.w.ravel()
    order = np.lexsort((d_arr, t_arr, -w_arr))
    chosen: list[tuple[float, int]] = []
    times: list[float] = []
    used: set[tuple[int, int]] = set()

    def admissible(t: float) -> bool:
        return t in times or all(abs(t - s) >= spec.min_separation for s in times)

    def take(c: int, d: int):
        t = float(mids[c])
        chosen.append((t, d))
        used.add((c, d))
        if t not in times:
            times.append(t)

    for idx in order:
        if len(chosen) >= spec.budget:
            break
        if w_arr[idx] <= 0.0:
            break
        c, d = int(c_arr[idx]), int(d_arr[idx])
        if (c, d) not in used and admissible(float(mids[c])):
            take(c, d)
            continue
        # spill to the nearest free same-sensor cell, earlier time on ties
        ranks = np.lexsort((mids, np.abs(mids - mids[c])))
        for c2 in ranks:
            if (int(c2), d) not in used and admissible(float(mids[c2])):
                take(int(c2), d)
                break
    return DiscreteDesign(tuple(chosen), relaxed.u.copy())


def finalize_design(spec: ProblemSpec, prior: ParticleCloud, criterion: str,
                    relaxed: RelaxedDesign, centers=None
                    ) -> tuple[RelaxedDesign, DiscreteDesign]:
    """Budget-filling discretization of a relaxed solution.

    When weight cells are narrower than the separation rule, the relaxed
    optimum can concentrate on adjacent cells, and plain rounding then
    strands part of the budget behind the separation constraint. Both the
    plain rounding and the spillover rounding are evaluated as bang-bang
    designs under the criterion and the better one is kept.
    """
    candidates = [round_design(relaxed, spec), spillover_round(relaxed, spec)]
    best = None
    for cand in candidates:
        vertex = RelaxedDesign(relaxed.u, _indicator_weights(spec, cand))
        val = objective_and_gradient(spec, prior, criterion, pack(vertex),
                                     centers, need_grad=False).value
        if best is None or val < best[0]:
            best = (val, vertex, cand)
    return best[1], best[2]


def round_design(relaxed: RelaxedDesign, spec: ProblemSpec) -> DiscreteDesign:
    """Greedy weight-ranked selection under the minimum-separation rule.

    Candidates are (cell midpoint, sensor) pairs scored by their relaxed
    weight; ties break on earlier time then lower sensor index. A
    candidate is admissible when its time either coincides exactly with
    an already selected time (co-located activation) or keeps the minimum
    separation from every selected distinct time. Selection stops at K
    activations or when only zero-weight candidates remain.
    """
    grid = spec.grid()
    mids = grid.cell_mid_times()
    C, n_exp = relaxed.w.shape
    t_arr = np.repeat(mids, n_exp)
    d_arr = np.tile(np.arange(n_exp), C)
    w_arr = relaxed.w.ravel()
    order = np.lexsort((d_arr, t_arr, -w_arr))
    chosen: list[tuple[float, int]] = []
    times: list[float] = []
    for idx in order:
        if len(chosen) >= spec.budget:
            break
        if w_arr[idx] <= 0.0:
            break
        t = float(t_arr[idx])
        if t in times or all(abs(t - s) >= spec.min_separation for s in times):
            chosen.append((t, int(d_arr[idx])))
            if t not in times:
                times.append(t)
    return DiscreteDesign(tuple(chosen), relaxed.u.copy())
