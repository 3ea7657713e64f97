"""Design criteria: Fisher A/D-optimality and the information-gain surrogates.

All four objectives are time-integrated functionals of a relaxed design
(u, w), transcribed with a rectangle rule per weight cell whose integrand
is evaluated at the cell-midpoint states. Every objective returns the
quantity to MINIMIZE together with its exact gradient with respect to the
flattened decision vector [u cells | w cells]; the information objectives
return the negative of the information functional, so smaller values mean
more informative designs.

The tilting objectives reweight the prior atoms with masses computed in
closed form from the Fisher information accumulated strictly before each
weight cell (the same staging as a sequential posterior update), which is
the exact solution of the replicator dynamics for a single center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _backprop as bp
from .dynamics import ObservationMap, ProblemSpec, TimeGrid
from .measure import NoiseSpec, ParticleCloud, noise_entropy, sensor_rules

RIDGE = 1e-6          # D/A-criterion regularization of the final FIM
_CELL_CHUNK = 16      # weight cells processed per vectorized block


# ---------------------------------------------------------------------------
# Designs and configurations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RelaxedDesign:
    """Piecewise-constant control and sampling weights in [0, 1]."""

    u: np.ndarray  # (N_u, n_u)
    w: np.ndarray  # (N_w, n_exp)

    def __post_init__(self):
        object.__setattr__(self, "u", np.atleast_2d(np.asarray(self.u, dtype=float)))
        object.__setattr__(self, "w", np.atleast_2d(np.asarray(self.w, dtype=float)))

    def budget_used(self) -> float:
        return float(self.w.sum())

    def is_feasible(self, spec: ProblemSpec, tol: float = 1e-9) -> bool:
        ok_u = np.all(self.u >= spec.u_lo - tol) and np.all(self.u <= spec.u_hi + tol)
        ok_w = np.all(self.w >= -tol) and np.all(self.w <= 1.0 + tol)
        return bool(ok_u and ok_w and self.w.sum() <= spec.budget + tol)


@dataclass(frozen=True)
class ConfigTable:
    """All sensor configurations eta in {0,1}^n_exp."""

    configs: np.ndarray              # (B, n_exp), entry d of row b is (b >> d) & 1
    active: tuple[tuple[int, ...], ...]


@lru_cache(maxsize=None)
def config_table(n_exp: int) -> ConfigTable:
    if not 1 <= n_exp <= 8:
        raise ValueError("configuration enumeration supports 1..8 sensors")
    B = 1 << n_exp
    configs = np.array([[(b >> d) & 1 for d in range(n_exp)] for b in range(B)])
    active = tuple(tuple(int(d) for d in range(n_exp) if configs[b, d]) for b in range(B))
    return ConfigTable(configs, active)


def config_weights(w_t: np.ndarray) -> np.ndarray:
    """Configuration probabilities pi_eta(w_t) under independent activation."""
    w_t = np.atleast_1d(np.asarray(w_t, dtype=float))
    return _config_weights_cells(w_t[None, :])[0]


def _config_weights_cells(w: np.ndarray) -> np.ndarray:
    """pi_eta per cell: w (C, n_exp) -> (C, B)."""
    table = config_table(w.shape[1])
    C, B = w.shape[0], table.configs.shape[0]
    pi = np.ones((C, B))
    for d in range(w.shape[1]):
        on = table.configs[:, d] == 1
        pi[:, on] *= w[:, d][:, None]
        pi[:, ~on] *= (1.0 - w[:, d])[:, None]
    return pi


def _config_weight_grads(w: np.ndarray) -> np.ndarray:
    """d pi_eta / d w_d per cell: returns (C, B, n_exp)."""
    table = config_table(w.shape[1])
    C, B, n = w.shape[0], table.configs.shape[0], w.shape[1]
    out = np.empty((C, B, n))
    for d in range(n):
        sub = np.ones((C, B))
        for dd in range(n):
            if dd == d:
                continue
            on = table.configs[:, dd] == 1
            sub[:, on] *= w[:, dd][:, None]
            sub[:, ~on] *= (1.0 - w[:, dd])[:, None]
        sign = np.where(table.configs[:, d] == 1, 1.0, -1.0)
        out[:, :, d] = sub * sign[None, :]
    return out


def predictive_log_likelihood(atom_obs: np.ndarray, masses: np.ndarray, k: int,
                              eta, xi_q: np.ndarray, noise: NoiseSpec) -> float:
    """Log predictive mixture density at the k-th atom's noisy observation.

    ``atom_obs`` holds the sensor values h_d per atom, shape (N, n_exp);
    the result is log sum_l masses_l prod_{d active} N(obs_k,d - obs_l,d
    + xi_q,d; 0, sigma_d^2), evaluated in the log domain.
    """
    atom_obs = np.atleast_2d(np.asarray(atom_obs, dtype=float))
    masses = np.asarray(masses, dtype=float)
    if np.all(masses == 0):
        raise ValueError("masses must not be all zero")
    eta = np.atleast_1d(np.asarray(eta, dtype=int))
    xi_q = np.atleast_1d(np.asarray(xi_q, dtype=float))
    with np.errstate(divide="ignore"):
        terms = np.where(masses > 0, np.log(masses, where=masses > 0), -np.inf)
    for d in np.flatnonzero(eta):
        z = atom_obs[k, d] - atom_obs[:, d] + xi_q[d]
        sig = noise.sigma[d]
        terms = terms - 0.5 * math.log(2.0 * math.pi * sig * sig) - z * z / (2.0 * sig * sig)
    m = terms.max()
    return float(m + np.log(np.exp(terms - m).sum()))


def fim_increment(dhdx_G: np.ndarray, w_t: np.ndarray, noise: NoiseSpec) -> np.ndarray:
    """Instantaneous Fisher rate sum_d w_d H_d^T H_d / sigma_d^2."""
    H = np.atleast_2d(np.asarray(dhdx_G, dtype=float))
    w_t = np.atleast_1d(np.asarray(w_t, dtype=float))
    scale = w_t / noise.sigma**2
    return np.einsum("d,di,dj->ij", scale, H, H)


# ---------------------------------------------------------------------------
# Result containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectiveEval:
    value: float
    gradient: np.ndarray  # layout [u cells | w cells]


@dataclass(frozen=True)
class FisherAccumulator:
    """Accumulated Fisher information along the grid, plus cell increments."""

    times: np.ndarray       # (S+1,)
    F: np.ndarray           # (S+1, n_theta, n_theta)
    increments: np.ndarray  # (N_w, n_theta, n_theta), width * rate per cell


@dataclass(frozen=True)
class TiltPath:
    """Tilted particle masses over the grid for a set of centers."""

    times: np.ndarray
    mu: np.ndarray                   # (S+1, N)
    center_atoms: np.ndarray         # (J, n_theta)
    center_masses: np.ndarray        # (J,)
    accumulators: tuple[FisherAccumulator, ...]


def centers_from_cloud(cloud: ParticleCloud) -> list[tuple[np.ndarray, float]]:
    return [(cloud.atoms[j].copy(), float(cloud.masses[j])) for j in range(cloud.size)]


def single_center(prior: ParticleCloud) -> list[tuple[np.ndarray, float]]:
    """The one-center tilt anchored at the prior mean."""
    return [(prior.mean.copy(), 1.0)]


# ---------------------------------------------------------------------------
# Shared forward machinery
# ---------------------------------------------------------------------------

def _obs_hessian(om: ObservationMap, x: np.ndarray) -> np.ndarray:
    if om.d2h_dxx is not None:
        return om.d2h_dxx(x)
    n_x = x.shape[-1]
    out = np.empty(x.shape[:-1] + (n_x, n_x))
    for m in range(n_x):
        step = 1e-6
        xp = x.copy(); xp[..., m] += step
        xm = x.copy(); xm[..., m] -= step
        out[..., m] = (np.asarray(om.dh_dx(xp)) - np.asarray(om.dh_dx(xm))) / (2 * step)
    return out


def _midpoint_obs(spec: ProblemSpec, xs: np.ndarray, mids: np.ndarray):
    """Sensor values and Jacobians at cell-midpoint states.

    xs: (S+1, N, n_x) -> Hv (C, N, n_exp), dh (C, N, n_exp, n_x).
    """
    Xm = xs[mids]  # (C, N, n_x)
    C, N = Xm.shape[0], Xm.shape[1]
    Hv = np.empty((C, N, spec.n_exp))
    dh = np.empty((C, N, spec.n_exp, spec.n_x))
    for d, om in enumerate(spec.obs):
        Hv[:, :, d] = om.h(Xm)
        dh[:, :, d, :] = om.dh_dx(Xm)
    return Xm, Hv, dh


class _ReferenceSystem:
    """Per-center reference trajectories, sensitivities and Fisher rates."""

    def __init__(self, spec: ProblemSpec, grid: TimeGrid, design: RelaxedDesign,
                 centers, store_stages: bool):
        self.spec, self.grid = spec, grid
        self.atoms = np.array([c[0] for c in centers], dtype=float)
        self.masses = np.array([c[1] for c in centers], dtype=float)
        xs, Gs, stages = bp.integrate_augmented_fwd(spec, design.u, self.atoms,
                                                    grid, store_stages)
        self.xs, self.Gs, self.stages = xs, Gs, stages
        mids = grid.cell_mid_nodes()
        Xm = xs[mids]            # (C, J, n_x)
        Gm = Gs[mids]            # (C, J, n_x, n_theta)
        self.Xm, self.Gm = Xm, Gm
        C, J = Xm.shape[0], Xm.shape[1]
        hvec = np.empty((C, J, spec.n_exp, spec.n_theta))
        self.dh = np.empty((C, J, spec.n_exp, spec.n_x))
        for d, om in enumerate(spec.obs):
            dhd = om.dh_dx(Xm)   # (C, J, n_x)
            self.dh[:, :, d, :] = dhd
            hvec[:, :, d, :] = np.einsum("cjp,cjpq->cjq", dhd, Gm)
        self.hvec = hvec
        sig2 = spec.noise.sigma**2
        # per-cell, per-sensor Fisher rate H^T H / sigma^2
        self.rate_d = np.einsum("cjdp,cjdq,d->cjdpq", hvec, hvec, 1.0 / sig2)
        # cell rate under the design weights
        self.R = np.einsum("cd,cjdpq->cjpq", design.w, self.rate_d)

    def fisher_left_edges(self) -> np.ndarray:
        """F at each cell's left edge: (C, J, n_theta, n_theta)."""
        dt_cell = self.grid.cell_width
        csum = np.cumsum(self.R * dt_cell, axis=0)
        F = np.zeros_like(csum)
        F[1:] = csum[:-1]
        return F

    def fisher_nodes(self) -> np.ndarray:
        """F at every grid node (piecewise linear in t): (S+1, J, ntheta, ntheta)."""
        grid = self.grid
        F_left = self.fisher_left_edges()
        S = grid.n_steps
        out = np.empty((S + 1,) + self.R.shape[1:])
        cells = grid.cell_of_step
        t = grid.times
        lefts = grid.cell_left_nodes()
        out[0] = 0.0
        for s in range(1, S + 1):
            c = cells[s - 1]
            out[s] = F_left[c] + (t[s] - t[lefts[c]]) * self.R[c]
        return out

    def accumulators(self) -> tuple[FisherAccumulator, ...]:
        Fn = self.fisher_nodes()
        inc = self.R * self.grid.cell_width
        return tuple(
            FisherAccumulator(self.grid.times.copy(), Fn[:, j], inc[:, j])
            for j in range(self.atoms.shape[0])
        )


def _tilt_masses(prior: ParticleCloud, ref: _ReferenceSystem, F: np.ndarray):
    """Closed-form tilted masses for accumulated information F (..., p, q).

    Returns (mu, rho) where mu has shape (..., N) and rho (..., N, J) are
    the per-atom center responsibilities needed for differentiation.
    """
    delta = prior.atoms[:, None, :] - ref.atoms[None, :, :]      # (N, J, p)
    a = np.einsum("...jpq,kjp,kjq->...kj", F, delta, delta)      # (..., N, J)
    beta = np.log(ref.masses)[None, :] - 0.5 * a
    bmax = beta.max(axis=-1, keepdims=True)
    rho_un = np.exp(beta - bmax)
    lse = bmax[..., 0] + np.log(rho_un.sum(axis=-1))
    rho = rho_un / rho_un.sum(axis=-1, keepdims=True)
    E = np.log(prior.masses) + lse                               # (..., N)
    emax = E.max(axis=-1, keepdims=True)
    mu_un = np.exp(E - emax)
    mu = mu_un / mu_un.sum(axis=-1, keepdims=True)
    return mu, rho, delta


def replicator_rhs(mu: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """Replicator vector field for per-atom information rates a_k(t).

    ``rates`` holds a_k = (theta_k - theta_ref)^T Fdot (theta_k -
    theta_ref); the flow preserves the probability simplex.
    """
    avg = float(mu @ rates)
    return -0.5 * mu * (rates - avg)


def replicator_path(prior: ParticleCloud, center: np.ndarray,
                    acc: FisherAccumulator, substeps: int = 64) -> np.ndarray:
    """RK4 integration of the single-center replicator dynamics.

    Integrates the mass flow through the accumulator's piecewise-constant
    information rates with ``substeps`` RK4 steps per grid interval and
    returns the masses at every grid node; a cross-check for the closed
    form used by the tilting objectives. The rates can be stiff when the
    tilt collapses, so use enough substeps.
    """
    times = acc.times
    S = times.shape[0] - 1
    n_cells = acc.increments.shape[0]
    steps_per_cell = S // n_cells
    width = (times[-1] - times[0]) / n_cells
    delta = prior.atoms - np.asarray(center, dtype=float)
    # a_k per cell from the cell's constant rate matrix
    rates = np.einsum("kp,cpq,kq->ck", delta, acc.increments / width, delta)
    mu = prior.masses.copy()
    out = np.empty((S + 1, prior.size))
    out[0] = mu
    for s in range(S):
        a = rates[s // steps_per_cell]
        h = (times[s + 1] - times[s]) / substeps
        for _ in range(substeps):
            k1 = replicator_rhs(mu, a)
            k2 = replicator_rhs(mu + 0.5 * h * k1, a)
            k3 = replicator_rhs(mu + 0.5 * h * k2, a)
            k4 = replicator_rhs(mu + h * k3, a)
            mu = mu + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[s + 1] = mu
    return out


# ---------------------------------------------------------------------------
# Information-surrogate integrand (shared by inst and tilt)
# ---------------------------------------------------------------------------

_R_LETTERS = "abdefghi"  # one quadrature axis label per active sensor


def _integrand(spec: ProblemSpec, grid: TimeGrid, design: RelaxedDesign,
               Hv: np.ndarray, logM: np.ndarray, M: np.ndarray, need_grad: bool):
    """Per-cell surrogate integrand and its partials.

    Hv: (C, N, n_exp) sensor values, M/logM: (C, N) atom masses per cell.
    Returns (value, T_eta (C, B), dHv (C, N, n_exp), dM (C, N), dw_direct
    (C, n_exp)); gradient outputs are None when need_grad is false.

    The predictive mixture is evaluated through per-sensor Gaussian
    factors G_d = exp(log phi_d); products over active sensors then
    reduce to small contractions instead of joint log-sum-exp tensors.
    Underflowed mixture sums are floored at 1e-300, which only affects
    terms whose outer mass is itself below ~1e-300.
    """
    table = config_table(spec.n_exp)
    rules = sensor_rules(spec.noise)
    sig2 = spec.noise.sigma**2
    norm = 1.0 / np.sqrt(2.0 * math.pi * sig2)
    C, N = Hv.shape[0], Hv.shape[1]
    B = table.configs.shape[0]
    dt_cell = grid.cell_width
    pi = _config_weights_cells(design.w)                  # (C, B)
    Hent = np.array([noise_entropy(spec.noise, d) for d in range(spec.n_exp)])

    T_eta = np.zeros((C, B))
    dHv = np.zeros_like(Hv) if need_grad else None
    dM = np.zeros((C, N)) if need_grad else None

    for lo in range(0, C, _CELL_CHUNK):
        hi = min(lo + _CELL_CHUNK, C)
        cc = slice(lo, hi)
        Mcc = M[cc]
        # per-sensor Gaussian factors at every (atom pair, noise node)
        G, Gc = [], []
        for d in range(spec.n_exp):
            z = (Hv[cc, :, None, d] - Hv[cc, None, :, d])[..., None] + rules[d].nodes
            g = np.exp(z * z * (-0.5 / sig2[d])) * norm[d]   # (cc, k, l, r)
            G.append(g)
            if need_grad:
                Gc.append(g * (z * (-1.0 / sig2[d])))        # dG/dD
        Bd = [None] * spec.n_exp if need_grad else None
        for b in range(1, B):
            act = table.active[b]
            rl = {d: _R_LETTERS[i] for i, d in enumerate(act)}
            rstr = "".join(rl[d] for d in act)
            sj = rules[act[0]].weights
            for d in act[1:]:
                sj = np.multiply.outer(sj, rules[d].weights)
            g_ops = [G[d] for d in act]
            g_subs = ",".join(f"ckl{rl[d]}" for d in act)
            sumexp = np.einsum(f"cl,{g_subs}->ck{rstr}", Mcc, *g_ops,
                               optimize=True)
            sumexp = np.maximum(sumexp, 1e-300)
            logL = np.log(sumexp)                            # (cc, k, r...)
            tmp = np.tensordot(logL, sj, axes=(tuple(range(2, logL.ndim)),
                                               tuple(range(sj.ndim))))
            T_eta[cc, b] = np.einsum("ck,ck->c", Mcc, tmp)
            if need_grad:
                coef = (dt_cell * pi[cc, b])[:, None]
                Q = coef[..., None] * Mcc[:, :, None] * sj.ravel()
                Q = Q.reshape(sumexp.shape) / sumexp         # (cc, k, r...)
                dM[cc] += np.einsum(f"ck{rstr},{g_subs}->cl", Q, *g_ops,
                                    optimize=True)
                dM[cc] += coef * tmp
                for d in act:
                    others = [G[dd] for dd in act if dd != d]
                    o_subs = ",".join(f"ckl{rl[dd]}" for dd in act if dd != d)
                    if others:
                        contrib = np.einsum(
                            f"cl,ckl{rl[d]},ck{rstr},{o_subs}->ckl",
                            Mcc, Gc[d], Q, *others, optimize=True)
                    else:
                        contrib = np.einsum(f"cl,ckl{rl[d]},ck{rstr}->ckl",
                                            Mcc, Gc[d], Q, optimize=True)
                    Bd[d] = contrib if Bd[d] is None else Bd[d] + contrib
        if need_grad:
            for d in range(spec.n_exp):
                dHv[cc, :, d] += Bd[d].sum(axis=2) - Bd[d].sum(axis=1)

    cell_vals = np.einsum("cb,cb->c", pi, T_eta) + design.w @ Hent
    value = dt_cell * float(cell_vals.sum())
    dw_direct = None
    if need_grad:
        dpi = _config_weight_grads(design.w)              # (C, B, n_exp)
        dw_direct = dt_cell * (np.einsum("cbd,cb->cd", dpi, T_eta) + Hent[None, :])
    return value, T_eta, dHv, dM, dw_direct


def _particle_u_gradient(spec, grid, design, thetas, stages, dHv, dh):
    """Pull sensor-value cotangents back through the particle trajectories."""
    mids = grid.cell_mid_nodes()
    S = grid.n_steps
    N = dHv.shape[1]
    sources = np.zeros((S + 1, N, spec.n_x))
    np.add.at(sources, mids, np.einsum("cnd,cndq->cnq", dHv, dh))
    return bp.reverse_particles(spec, design.u, thetas, grid, stages, sources)


# ---------------------------------------------------------------------------
# Instantaneous surrogate
# ---------------------------------------------------------------------------

def inst_objective(design: RelaxedDesign, prior: ParticleCloud,
                   spec: ProblemSpec, need_grad: bool = True) -> ObjectiveEval:
    """Myopic information surrogate (value to minimize, gradient exact)."""
    grid = spec.grid()
    _check_design(design, spec, grid)
    xs, stages = bp.integrate_particles_fwd(spec, design.u, prior.atoms, grid,
                                            store_stages=need_grad)
    _, Hv, dh = _midpoint_obs(spec, xs, grid.cell_mid_nodes())
    logm = np.log(prior.masses)
    C = grid.n_cells
    logM = np.broadcast_to(logm, (C, prior.size))
    M = np.broadcast_to(prior.masses, (C, prior.size))
    value, _, dHv, _, dw = _integrand(spec, grid, design, Hv, logM, M, need_grad)
    if not need_grad:
        return ObjectiveEval(value, None)
    du = _particle_u_gradient(spec, grid, design, prior.atoms, stages, dHv, dh)
    return ObjectiveEval(value, np.concatenate([du.ravel(), dw.ravel()]))


# ---------------------------------------------------------------------------
# Fisher objectives
# ---------------------------------------------------------------------------

def fisher_path(design: RelaxedDesign, theta_nom: np.ndarray,
                spec: ProblemSpec) -> FisherAccumulator:
    """Accumulated Fisher information along the nominal trajectory."""
    grid = spec.grid()
    _check_design(design, spec, grid)
    ref = _ReferenceSystem(spec, grid, design, [(np.asarray(theta_nom, float), 1.0)],
                           store_stages=False)
    return ref.accumulators()[0]


def fisher_objective(design: RelaxedDesign, theta_nom: np.ndarray,
                     spec: ProblemSpec, criterion: str,
                     need_grad: bool = True) -> ObjectiveEval:
    """A- or D-optimality of the final accumulated FIM (plus ridge)."""
    if criterion not in ("A", "D"):
        raise ValueError("criterion must be 'A' or 'D'")
    grid = spec.grid()
    _check_design(design, spec, grid)
    theta_nom = np.asarray(theta_nom, dtype=float)
    ref = _ReferenceSystem(spec, grid, design, [(theta_nom, 1.0)],
                           store_stages=need_grad)
    dt_cell = grid.cell_width
    F_T = dt_cell * ref.R[:, 0].sum(axis=0) + RIDGE * np.eye(spec.n_theta)
    Finv = np.linalg.inv(F_T)
    if criterion == "D":
        sign, logdet = np.linalg.slogdet(F_T)
        if sign <= 0:
            raise FloatingPointError("FIM lost positive definiteness")
        value = -float(logdet)
        W = -Finv
    else:
        value = float(np.trace(Finv))
        W = -(Finv @ Finv)
    if not need_grad:
        return ObjectiveEval(value, None)
    dw = dt_cell * np.einsum("pq,cjdpq->cd", W, ref.rate_d)[:, :]
    dh = 2.0 * dt_cell * np.einsum(
        "cd,d,pq,cjdq->cjdp", design.w, 1.0 / spec.noise.sigma**2, W, ref.hvec)
    du = _reference_u_gradient(spec, grid, design, ref, dh)
    return ObjectiveEval(value, np.concatenate([du.ravel(), dw.ravel()]))


def _reference_u_gradient(spec, grid, design, ref: _ReferenceSystem,
                          dhvec: np.ndarray) -> np.ndarray:
    """Pull cotangents of the linearized sensor rows back to the control.

    dhvec: (C, J, n_exp, n_theta) cotangent of hvec = dh_dx(x_ref) G.
    """
    mids = grid.cell_mid_nodes()
    S = grid.n_steps
    J = ref.atoms.shape[0]
    xsrc = np.zeros((S + 1, J, spec.n_x))
    Gsrc = np.zeros((S + 1, J, spec.n_x, spec.n_theta))
    np.add.at(Gsrc, mids, np.einsum("cjdp,cjdq->cjpq", ref.dh, dhvec))
    curv = np.zeros((mids.shape[0], J, spec.n_x))
    for d, om in enumerate(spec.obs):
        h_xx = _obs_hessian(om, ref.Xm)  # (C, J, n_x, n_x)
        if np.any(h_xx):
            curv += np.einsum("cjpm,cjpq,cjq->cjm", h_xx, ref.Gm, dhvec[:, :, d, :])
    np.add.at(xsrc, mids, curv)
    return bp.reverse_augmented(spec, design.u, ref.atoms, grid, ref.stages,
                                xsrc, Gsrc)


# ---------------------------------------------------------------------------
# Tilting surrogates
# ---------------------------------------------------------------------------

def tilt_weight_path(design: RelaxedDesign, prior: ParticleCloud,
                     spec: ProblemSpec, centers) -> TiltPath:
    """Closed-form tilted mass path over all grid nodes."""
    if not centers:
        raise ValueError("at least one tilting center required")
    grid = spec.grid()
    _check_design(design, spec, grid)
    ref = _ReferenceSystem(spec, grid, design, centers, store_stages=False)
    Fn = ref.fisher_nodes()                    # (S+1, J, p, q)
    mu, _, _ = _tilt_masses(prior, ref, Fn)
    return TiltPath(grid.times.copy(), mu, ref.atoms.copy(), ref.masses.copy(),
                    ref.accumulators())


def tilt_objective(design: RelaxedDesign, prior: ParticleCloud,
                   spec: ProblemSpec, centers,
                   need_grad: bool = True) -> ObjectiveEval:
    """Tilting surrogate (single- or multi-center) to minimize."""
    if not centers:
        raise ValueError("at least one tilting center required")
    grid = spec.grid()
    _check_design(design, spec, grid)
    dt_cell = grid.cell_width
    ref = _ReferenceSystem(spec, grid, design, centers, store_stages=need_grad)
    F_left = ref.fisher_left_edges()           # (C, J, p, q)
    mu, rho, delta = _tilt_masses(prior, ref, F_left)   # (C, N), (C, N, J)
    with np.errstate(divide="ignore"):
        logM = np.where(mu > 0, np.log(np.maximum(mu, 1e-300)), -np.inf)

    xs, stages = bp.integrate_particles_fwd(spec, design.u, prior.atoms, grid,
                                            store_stages=need_grad)
    _, Hv, dh = _midpoint_obs(spec, xs, grid.cell_mid_nodes())
    value, _, dHv, dMu, dw = _integrand(spec, grid, design, Hv, logM, mu, need_grad)
    if not need_grad:
        return ObjectiveEval(value, None)

    # masses -> accumulated information -> (weights, reference paths)
    dE = mu * (dMu - np.einsum("ck,ck->c", mu, dMu)[:, None])      # (C, N)
    da = -0.5 * rho * dE[:, :, None]                               # (C, N, J)
    dF_left = np.einsum("ckj,kjp,kjq->cjpq", da, delta, delta)     # (C, J, p, q)
    # suffix sum: rate of cell c' enters F at left edges of cells c > c'
    suffix = np.flip(np.cumsum(np.flip(dF_left, axis=0), axis=0), axis=0)
    dR = np.zeros_like(dF_left)
    dR[:-1] = dt_cell * suffix[1:]
    dw_tilt = np.einsum("cjpq,cjdpq->cd", dR, ref.rate_d)
    dRsym = 0.5 * (dR + np.swapaxes(dR, -1, -2))
    dhvec = 2.0 * np.einsum(
        "cd,d,cjpq,cjdq->cjdp", design.w, 1.0 / spec.noise.sigma**2, dRsym, ref.hvec)

    du = _particle_u_gradient(spec, grid, design, prior.atoms, stages, dHv, dh)
    du += _reference_u_gradient(spec, grid, design, ref, dhvec)
    return ObjectiveEval(value, np.concatenate([du.ravel(),
                                                (dw + dw_tilt).ravel()]))


def _check_design(design: RelaxedDesign, spec: ProblemSpec, grid: TimeGrid):
    if design.u.shape != (spec.n_controls, spec.n_u):
        raise ValueError(f"control must have shape ({spec.n_controls}, {spec.n_u})")
    if design.w.shape != (grid.n_cells, spec.n_exp):
        raise ValueError(f"weights must have shape ({grid.n_cells}, {spec.n_exp})")
