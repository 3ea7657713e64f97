"""Monte Carlo design evaluation: simulate, fit by maximum likelihood,
aggregate paired error statistics, and read/write the report CSV.

Evaluation is paired: within a run every method sees the same true
parameter and the same noise sub-seed, so method comparisons are made
against common randomness. True parameters are drawn from the continuous
prior distribution, not from its quadrature discretization, to avoid
favoring quadrature-aware designs.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .dynamics import ProblemSpec, TimeGrid, integrate
from .measure import (
    LogNormalMixturePrior,
    LogNormalPrior,
    ParticleCloud,
    PriorSpec,
    UniformBoxPrior,
)
from .solve import DiscreteDesign


@dataclass(frozen=True)
class Dataset:
    """Observations (time, sensor, value) generated under one design."""

    records: tuple[tuple[float, int, float], ...]
    theta_true: np.ndarray
    seed: int


@dataclass(frozen=True)
class EvalRow:
    method: str
    run: int
    theta_true: np.ndarray
    theta_hat: np.ndarray
    errors: np.ndarray
    err_l2: float
    status: str


@dataclass
class EvalReport:
    rows: list

    def methods(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def errors_of(self, method: str) -> np.ndarray:
        return np.array([r.err_l2 for r in self.rows
                         if r.method == method and r.status == "ok"])

    def median_errors(self) -> dict:
        return {m: float(np.median(self.errors_of(m))) for m in self.methods()}

    def mean_errors(self) -> dict:
        return {m: float(np.mean(self.errors_of(m))) for m in self.methods()}


def _node_of_time(grid: TimeGrid, t: float) -> int:
    node = int(np.argmin(np.abs(grid.times - t)))
    if abs(grid.times[node] - t) > 1e-9 * (1.0 + abs(t)):
        raise ValueError(f"activation time {t} is not a grid node")
    return node


def simulate_data(spec: ProblemSpec, design: DiscreteDesign, theta_true,
                  seed: int) -> Dataset:
    """Draw one dataset: y = h_d(x(t; theta_true)) + sigma_d * N(0, 1)."""
    theta_true = np.asarray(theta_true, dtype=float)
    grid = spec.grid()
    traj = integrate(spec, design.u, theta_true, grid)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    records = []
    for (t, d) in design.activations:
        node = _node_of_time(grid, t)
        y = float(spec.obs[d].h(traj.x[node]) + spec.noise.sigma[d] * rng.standard_normal())
        records.append((float(t), int(d), y))
    return Dataset(tuple(records), theta_true, int(seed))


# ---------------------------------------------------------------------------
# Batched maximum-likelihood fitting
# ---------------------------------------------------------------------------

class _LogParam:
    """theta = exp(z); keeps positive-support fits on the positive orthant."""

    unconstrained = True

    def to_theta(self, z):
        with np.errstate(over="ignore"):  # inf thetas fail the line search cleanly
            return np.exp(z)

    def from_theta(self, th):
        return np.log(th)

    def chain(self, z, grad_theta):
        return grad_theta * np.exp(z)

    def project(self, z):
        return z


class _BoxParam:
    """Identity parameterization with box projection."""

    unconstrained = False

    def __init__(self, lo, hi):
        self.lo, self.hi = lo, hi

    def to_theta(self, z):
        return z

    def from_theta(self, th):
        return th

    def chain(self, z, grad_theta):
        return grad_theta

    def project(self, z):
        return np.clip(z, self.lo, self.hi)


def _param_for_prior(prior_dist: PriorSpec | None, cloud: ParticleCloud):
    if isinstance(prior_dist, (LogNormalPrior, LogNormalMixturePrior)):
        return _LogParam()
    if isinstance(prior_dist, UniformBoxPrior):
        return _BoxParam(prior_dist.lo, prior_dist.hi)
    # fall back to the atom hull when only a cloud is known
    lo = cloud.atoms.min(axis=0)
    hi = cloud.atoms.max(axis=0)
    if np.all(lo > 0):
        return _LogParam()
    return _BoxParam(lo, hi)


def _nll_batch(spec, design_nodes, design_sensors, u, ys, thetas, with_grad):
    """Gaussian negative log-likelihood over a theta batch.

    ys: (B, n_act); thetas: (B, n_theta). Non-finite trajectories yield
    inf so the line search backs away from blowup regions.
    """
    grid = spec.grid()
    sig = spec.noise.sigma[design_sensors]
    Bn = thetas.shape[0]
    with np.errstate(all="ignore"):
        if with_grad:
            xs, Gs = _integrate_nanfree(spec, u, thetas, grid, True)
        else:
            xs, Gs = _integrate_nanfree(spec, u, thetas, grid, False)
        resid = np.empty((Bn, len(design_nodes)))
        nll_grad = np.zeros((Bn, spec.n_theta)) if with_grad else None
        for a, (node, d) in enumerate(zip(design_nodes, design_sensors)):
            hx = spec.obs[d].h(xs[node])
            resid[:, a] = ys[:, a] - hx
            if with_grad:
                dh = spec.obs[d].dh_dx(xs[node])                 # (B, n_x)
                HG = np.einsum("bp,bpq->bq", dh, Gs[node])       # (B, n_theta)
                nll_grad -= (resid[:, a] / sig[a] ** 2)[:, None] * HG
        nll = 0.5 * np.sum(resid**2 / sig**2, axis=1)
    nll = np.where(np.isfinite(nll), nll, np.inf)
    if with_grad:
        nll_grad = np.where(np.isfinite(nll_grad), nll_grad, 0.0)
        return nll, nll_grad
    return nll, None


def _integrate_nanfree(spec, u, thetas, grid, with_G):
    """RK4 like the dynamics integrators but letting rows blow up to NaN."""
    from .dynamics import _controls_per_step
    thetas = np.atleast_2d(thetas)
    n = thetas.shape[0]
    us = _controls_per_step(u, grid)
    ts, h = grid.times, grid.dt
    S = grid.n_steps
    xs = np.empty((S + 1, n, spec.n_x))
    x = np.broadcast_to(spec.x0, (n, spec.n_x)).copy()
    xs[0] = x
    if with_G:
        Gs = np.empty((S + 1, n, spec.n_x, spec.n_theta))
        G = np.zeros((n, spec.n_x, spec.n_theta))
        Gs[0] = G
    f, f_x, f_th = spec.f, spec.f_x, spec.f_theta
    for s in range(S):
        t, uc = ts[s], us[s]
        k1 = f(x, uc, thetas, t)
        if with_G:
            K1 = f_x(x, uc, thetas, t) @ G + f_th(x, uc, thetas, t)
            x2, G2 = x + 0.5 * h * k1, G + 0.5 * h * K1
            k2 = f(x2, uc, thetas, t + 0.5 * h)
            K2 = f_x(x2, uc, thetas, t + 0.5 * h) @ G2 + f_th(x2, uc, thetas, t + 0.5 * h)
            x3, G3 = x + 0.5 * h * k2, G + 0.5 * h * K2
            k3 = f(x3, uc, thetas, t + 0.5 * h)
            K3 = f_x(x3, uc, thetas, t + 0.5 * h) @ G3 + f_th(x3, uc, thetas, t + 0.5 * h)
            x4, G4 = x + h * k3, G + h * K3
            k4 = f(x4, uc, thetas, t + h)
            K4 = f_x(x4, uc, thetas, t + h) @ G4 + f_th(x4, uc, thetas, t + h)
            G = G + (h / 6.0) * (K1 + 2 * K2 + 2 * K3 + K4)
            Gs[s + 1] = G
        else:
            k2 = f(x + 0.5 * h * k1, uc, thetas, t + 0.5 * h)
            k3 = f(x + 0.5 * h * k2, uc, thetas, t + 0.5 * h)
            k4 = f(x + h * k3, uc, thetas, t + h)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        xs[s + 1] = x
    return (xs, Gs) if with_G else (xs, None)


def _fit_batch(spec, design: DiscreteDesign, ys: np.ndarray, starts: np.ndarray,
               param, max_iters: int = 200, tol: float = 1e-8):
    """Projected-gradient MLE over a (runs x starts) batch.

    ys: (B, n_act) observations, starts: (n_starts, n_theta). Each row
    runs its own Armijo backtracking until the accepted step is below
    ``tol`` in relative parameter change or the iteration cap; converged
    rows are compacted out of the batch. Returns (theta_hat (B, n_theta),
    ok (B,) flags).
    """
    grid = spec.grid()
    nodes = [_node_of_time(grid, t) for t, _ in design.activations]
    sensors = [d for _, d in design.activations]
    B, n_starts = ys.shape[0], starts.shape[0]
    P = spec.n_theta
    z_all = np.tile(param.project(param.from_theta(starts))[None], (B, 1, 1))
    z_all = z_all.reshape(B * n_starts, P)
    ys_rep = np.repeat(ys, n_starts, axis=0)

    def nll(zv, rows, g):
        f, gth = _nll_batch(spec, nodes, sensors, design.u,
                            ys_rep[rows], param.to_theta(zv), g)
        if g:
            return f, param.chain(zv, gth)
        return f, None

    idx = np.arange(B * n_starts)
    z = z_all.copy()
    f, g = nll(z, idx, True)
    f_all = f.copy()
    # per-row initial step keeps huge low-noise gradients in range
    alpha = 1.0 / (1.0 + np.linalg.norm(g, axis=1))
    live = np.isfinite(f)
    for _ in range(max_iters):
        pending = live.copy()
        for _bt in range(60):
            rows = np.flatnonzero(pending)
            if rows.size == 0:
                break
            trial = param.project(z[rows] - alpha[rows, None] * g[rows])
            f_try, _ = nll(trial, idx[rows], False)
            dz = trial - z[rows]
            dec = f_try <= f[rows] + 1e-4 * np.einsum("bp,bp->b", g[rows], dz)
            small = (np.abs(dz).max(axis=1)
                     <= tol * (1.0 + np.abs(z[rows]).max(axis=1)))
            acc = np.flatnonzero(dec)
            if acc.size:
                z[rows[acc]] = trial[acc]
                f[rows[acc]] = f_try[acc]
                pending[rows[acc]] = False
                live[rows[acc[small[acc]]]] = False   # converged step
            stalled = rows[~dec & small]              # cannot move measurably
            pending[stalled] = False
            live[stalled] = False
            rest = rows[~dec & ~small]
            alpha[rest] *= 0.5
        live[pending] = False  # exhausted backtracks
        alpha = np.minimum(alpha * 2.0, 1e6)
        z_all[idx], f_all[idx] = z, f
        if not live.any():
            break
        if live.mean() < 0.9:  # compact the batch
            keep = np.flatnonzero(live)
            idx, z, f, alpha = idx[keep], z[keep], f[keep], alpha[keep]
            live = np.ones(keep.shape[0], dtype=bool)
        _, g = nll(z, idx, True)
    z_all[idx], f_all[idx] = z, f
    f_final = f_all.reshape(B, n_starts)
    z_fin = z_all.reshape(B, n_starts, P)
    best = np.argmin(np.where(np.isfinite(f_final), f_final, np.inf), axis=1)
    theta_hat = param.to_theta(z_fin[np.arange(B), best])
    ok = np.isfinite(f_final[np.arange(B), best]) & np.all(np.isfinite(theta_hat), axis=1)
    return theta_hat, ok


def _mle_starts(cloud: ParticleCloud, n_atoms: int = 9) -> np.ndarray:
    order = np.lexsort((np.arange(cloud.size), -cloud.masses))
    picks = cloud.atoms[order[:min(n_atoms, cloud.size)]]
    return np.vstack([picks, cloud.mean[None, :]])


def mle_fit(spec: ProblemSpec, design: DiscreteDesign, data: Dataset,
            prior: ParticleCloud, prior_dist: PriorSpec | None = None) -> np.ndarray:
    """Maximum-likelihood estimate by multi-start projected gradient.

    Starts at the nine highest-mass prior atoms plus the prior mean; uses
    a log parameterization for positive-support priors and the box hull
    otherwise. Falls back to Nelder-Mead if the gradient path fails.
    """
    if not data.records:
        raise ValueError("at least one observation required")
    ys = np.array([[y for _, _, y in data.records]])
    param = _param_for_prior(prior_dist, prior)
    theta, ok = _fit_batch(spec, design, ys, _mle_starts(prior), param)
    if not ok[0]:
        theta = _nelder_mead_fallback(spec, design, ys[0], prior, param)
    return theta[0] if ok[0] else theta


def _nelder_mead_fallback(spec, design, y, cloud, param):
    from scipy.optimize import minimize
    grid = spec.grid()
    nodes = [_node_of_time(grid, t) for t, _ in design.activations]
    sensors = [d for _, d in design.activations]

    def fun(z):
        f, _ = _nll_batch(spec, nodes, sensors, design.u, y[None, :],
                          param.to_theta(z[None, :]), False)
        return f[0] if np.isfinite(f[0]) else 1e12

    res = minimize(fun, param.from_theta(cloud.mean), method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 2000})
    return param.to_theta(res.x)


def mc_evaluate(spec: ProblemSpec, designs: dict, prior_dist: PriorSpec,
                cloud: ParticleCloud, runs: int, seed: int) -> EvalReport:
    """Paired Monte Carlo evaluation of several designs.

    Draws ``runs`` true parameters from the continuous prior; within each
    run every method sees the same theta_true and noise sub-seed. Runs
    whose fit fails are flagged, never dropped.
    """
    if runs < 1:
        raise ValueError("need at least one run")
    theta_rngs = [np.random.default_rng(np.random.SeedSequence((seed, r, 1)))
                  for r in range(runs)]
    noise_seeds = [np.random.SeedSequence((seed, r, 2)).generate_state(1)[0]
                   for r in range(runs)]
    theta_true = np.vstack([prior_dist.sample(rg, 1) for rg in theta_rngs])
    starts = _mle_starts(cloud)
    param = _param_for_prior(prior_dist, cloud)
    rows: list[EvalRow] = []
    for method, design in designs.items():
        if not design.activations:
            raise ValueError(f"design '{method}' has no activations")
        ys = np.empty((runs, len(design.activations)))
        for r in range(runs):
            ds = simulate_data(spec, design, theta_true[r], int(noise_seeds[r]))
            ys[r] = [y for _, _, y in ds.records]
        theta_hat, ok = _fit_batch(spec, design, ys, starts, param)
        for r in range(runs):
            errs = np.abs(theta_hat[r] - theta_true[r])
            rows.append(EvalRow(method, r, theta_true[r].copy(), theta_hat[r].copy(),
                                errs, float(np.linalg.norm(theta_hat[r] - theta_true[r])),
                                "ok" if ok[r] else "failed"))
    return EvalReport(rows)


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def report_to_csv(report: EvalReport, header_comment: str = "") -> str:
    if not report.rows:
        raise ValueError("empty report")
    n = report.rows[0].theta_true.shape[0]
    cols = (["method", "run"]
            + [f"theta_true_{i+1}" for i in range(n)]
            + [f"theta_hat_{i+1}" for i in range(n)]
            + [f"err_{i+1}" for i in range(n)]
            + ["err_l2", "status"])
    out = io.StringIO()
    for line in header_comment.splitlines():
        out.write(f"# {line}\n")
    out.write(",".join(cols) + "\n")
    for r in report.rows:
        vals = ([r.method, str(r.run)]
                + [_fmt(v) for v in r.theta_true]
                + [_fmt(v) for v in r.theta_hat]
                + [_fmt(v) for v in r.errors]
                + [_fmt(r.err_l2), r.status])
        out.write(",".join(vals) + "\n")
    return out.getvalue()


def report_from_csv(text: str) -> EvalReport:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    n = sum(1 for c in header if c.startswith("theta_true_"))
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        method, run = parts[0], int(parts[1])
        vals = [float(v) for v in parts[2:2 + 3 * n + 1]]
        rows.append(EvalRow(method, run,
                            np.array(vals[:n]), np.array(vals[n:2 * n]),
                            np.array(vals[2 * n:3 * n]), vals[3 * n],
                            parts[-1]))
    return EvalReport(rows)
