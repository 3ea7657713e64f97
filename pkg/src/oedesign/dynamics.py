"""Controlled ODE models, fixed-step RK4 integration, and forward sensitivity.

Model callables follow a broadcasting convention: ``f(x, u, theta, t)``
accepts ``x`` of shape (..., n_x), ``u`` of shape (n_u,) or (..., n_u),
``theta`` of shape (..., n_theta) and a scalar ``t``, and returns
(..., n_x). Jacobian callables append the differentiation axes, e.g.
``f_x`` returns (..., n_x, n_x) and ``f_theta`` returns (..., n_x,
n_theta). This lets one call integrate a whole particle batch at once.

Integration is classical fixed-step RK4 on a uniform grid; there is no
adaptivity so every objective built on top is a smooth deterministic
function of the decision variables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .measure import (
    LogNormalMixturePrior,
    LogNormalPrior,
    NoiseSpec,
    PriorSpec,
    UniformBoxPrior,
)


class IntegrationBlowup(RuntimeError):
    """Non-finite state encountered during integration."""

    def __init__(self, time: float):
        super().__init__(f"integration produced a non-finite state near t={time:.6g}")
        self.time = time


class ConfigurationError(ValueError):
    """Unknown benchmark name or scenario."""


@dataclass(frozen=True)
class ObservationMap:
    """Scalar sensor: value, state Jacobian, optional state Hessian."""

    h: Callable
    dh_dx: Callable
    d2h_dxx: Optional[Callable] = None


@dataclass(frozen=True)
class ProblemSpec:
    """Full experimental setup for one controlled ODE design problem.

    Second-order model derivatives (`f_xx`, `f_xu`, `f_thx`, `f_thu`) are
    needed only for exact gradients of criteria that propagate the
    sensitivity path; when absent they are approximated by finite
    differences of the supplied Jacobians.
    """

    n_x: int
    n_theta: int
    n_exp: int
    horizon: float
    x0: np.ndarray
    f: Callable
    f_x: Callable
    f_theta: Callable
    f_u: Callable
    obs: tuple[ObservationMap, ...]
    u_lo: np.ndarray
    u_hi: np.ndarray
    n_controls: int          # control intervals N_u
    n_cells: int             # weight cells N_w
    steps_per_cell: int
    noise: NoiseSpec
    budget: int
    min_separation: float
    f_xx: Optional[Callable] = None
    f_xu: Optional[Callable] = None
    f_thx: Optional[Callable] = None
    f_thu: Optional[Callable] = None
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "u_lo", np.atleast_1d(np.asarray(self.u_lo, dtype=float)))
        object.__setattr__(self, "u_hi", np.atleast_1d(np.asarray(self.u_hi, dtype=float)))
        if self.horizon <= 0:
            raise ValueError("horizon T must be positive")
        if self.n_controls < 1 or self.n_cells < 1:
            raise ValueError("need at least one control interval and one weight cell")
        if self.budget < 1:
            raise ValueError("budget K must be >= 1")
        if self.min_separation < 0:
            raise ValueError("min_separation must be non-negative")
        if self.n_exp > 8:
            raise ValueError("at most 8 sensors supported (configuration set is 2^n)")
        if len(self.obs) != self.n_exp:
            raise ValueError("one observation map per sensor required")
        if self.noise.n_sensors != self.n_exp:
            raise ValueError("noise spec must cover every sensor")
        if self.x0.shape != (self.n_x,):
            raise ValueError("x0 has wrong dimension")
        if self.n_cells % self.n_controls != 0:
            raise ValueError("weight cells must align with control intervals "
                             "(n_cells divisible by n_controls)")
        if self.steps_per_cell < 2 or self.steps_per_cell % 2 != 0:
            raise ValueError("steps_per_cell must be even and >= 2 so cell "
                             "midpoints are grid nodes")

    @property
    def n_u(self) -> int:
        return self.u_lo.shape[0]

    def grid(self) -> "TimeGrid":
        return TimeGrid.build(self.horizon, self.n_cells, self.n_controls,
                              self.steps_per_cell)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform integration grid aligned with weight cells and controls."""

    times: np.ndarray          # (S+1,) node times
    n_cells: int
    n_controls: int
    steps_per_cell: int
    cell_of_step: np.ndarray     # (S,) weight cell of each RK4 step
    control_of_cell: np.ndarray  # (N_w,) control interval of each cell

    @staticmethod
    def build(horizon: float, n_cells: int, n_controls: int,
              steps_per_cell: int) -> "TimeGrid":
        n_steps = n_cells * steps_per_cell
        times = np.linspace(0.0, horizon, n_steps + 1)
        cell_of_step = np.repeat(np.arange(n_cells), steps_per_cell)
        control_of_cell = np.arange(n_cells) // (n_cells // n_controls)
        return TimeGrid(times, n_cells, n_controls, steps_per_cell,
                        cell_of_step, control_of_cell)

    @property
    def n_steps(self) -> int:
        return self.times.shape[0] - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def cell_width(self) -> float:
        return self.dt * self.steps_per_cell

    def cell_mid_nodes(self) -> np.ndarray:
        """Node index of each weight cell's midpoint."""
        half = self.steps_per_cell // 2
        return np.arange(self.n_cells) * self.steps_per_cell + half

    def cell_left_nodes(self) -> np.ndarray:
        """Node index of each weight cell's left edge."""
        return np.arange(self.n_cells) * self.steps_per_cell

    def cell_mid_times(self) -> np.ndarray:
        return self.times[self.cell_mid_nodes()]


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    x: np.ndarray  # (S+1, n_x)


@dataclass(frozen=True)
class SensitivityPath:
    times: np.ndarray
    G: np.ndarray  # (S+1, n_x, n_theta)


def _controls_per_step(u: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Control value applied on each RK4 step, shape (S, n_u)."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    return u[grid.control_of_cell[grid.cell_of_step]]


def _check_finite(x: np.ndarray, t: float):
    if not np.all(np.isfinite(x)):
        raise IntegrationBlowup(t)


def integrate_batch(spec: ProblemSpec, u: np.ndarray, thetas: np.ndarray,
                    grid: TimeGrid) -> np.ndarray:
    """RK4-integrate a batch of particles; returns (S+1, N, n_x)."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    n = thetas.shape[0]
    us = _controls_per_step(u, grid)
    ts = grid.times
    h = grid.dt
    out = np.empty((grid.n_steps + 1, n, spec.n_x))
    x = np.broadcast_to(spec.x0, (n, spec.n_x)).copy()
    out[0] = x
    f = spec.f
    check_every = grid.steps_per_cell
    for s in range(grid.n_steps):
        t = ts[s]
        uc = us[s]
        k1 = f(x, uc, thetas, t)
        k2 = f(x + 0.5 * h * k1, uc, thetas, t + 0.5 * h)
        k3 = f(x + 0.5 * h * k2, uc, thetas, t + 0.5 * h)
        k4 = f(x + h * k3, uc, thetas, t + h)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[s + 1] = x
        if (s + 1) % check_every == 0:
            _check_finite(x, ts[s + 1])
    _check_finite(x, ts[-1])
    return out


def integrate(spec: ProblemSpec, u: np.ndarray, theta: np.ndarray,
              grid: TimeGrid) -> Trajectory:
    """Integrate one trajectory with classical RK4 on the grid."""
    theta = np.asarray(theta, dtype=float)
    xs = integrate_batch(spec, u, theta[None, :], grid)[:, 0, :]
    return Trajectory(grid.times.copy(), xs)


def integrate_with_sensitivity_batch(spec: ProblemSpec, u: np.ndarray,
                                     thetas: np.ndarray, grid: TimeGrid
                                     ) -> tuple[np.ndarray, np.ndarray]:
    """Co-integrate state and sensitivity for a batch of reference points.

    Returns (xs, Gs) with shapes (S+1, N, n_x) and (S+1, N, n_x, n_theta).
    The state recursion performs exactly the same arithmetic as
    ``integrate_batch``, so the trajectory component bit-matches it.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    n = thetas.shape[0]
    us = _controls_per_step(u, grid)
    ts = grid.times
    h = grid.dt
    xs = np.empty((grid.n_steps + 1, n, spec.n_x))
    Gs = np.empty((grid.n_steps + 1, n, spec.n_x, spec.n_theta))
    x = np.broadcast_to(spec.x0, (n, spec.n_x)).copy()
    G = np.zeros((n, spec.n_x, spec.n_theta))
    xs[0] = x
    Gs[0] = G
    f, f_x, f_th = spec.f, spec.f_x, spec.f_theta

    def rhs_G(xv, uc, t, Gv):
        A = f_x(xv, uc, thetas, t)
        B = f_th(xv, uc, thetas, t)
        return np.einsum("nij,njk->nik", A, Gv) + B

    check_every = grid.steps_per_cell
    for s in range(grid.n_steps):
        t = ts[s]
        uc = us[s]
        k1 = f(x, uc, thetas, t)
        K1 = rhs_G(x, uc, t, G)
        x2 = x + 0.5 * h * k1
        k2 = f(x2, uc, thetas, t + 0.5 * h)
        K2 = rhs_G(x2, uc, t + 0.5 * h, G + 0.5 * h * K1)
        x3 = x + 0.5 * h * k2
        k3 = f(x3, uc, thetas, t + 0.5 * h)
        K3 = rhs_G(x3, uc, t + 0.5 * h, G + 0.5 * h * K2)
        x4 = x + h * k3
        k4 = f(x4, uc, thetas, t + h)
        K4 = rhs_G(x4, uc, t + h, G + h * K3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        G = G + (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
        xs[s + 1] = x
        Gs[s + 1] = G
        if (s + 1) % check_every == 0:
            _check_finite(x, ts[s + 1])
    _check_finite(x, ts[-1])
    return xs, Gs


def integrate_with_sensitivity(spec: ProblemSpec, u: np.ndarray,
                               theta_ref: np.ndarray, grid: TimeGrid
                               ) -> tuple[Trajectory, SensitivityPath]:
    theta_ref = np.asarray(theta_ref, dtype=float)
    xs, Gs = integrate_with_sensitivity_batch(spec, u, theta_ref[None, :], grid)
    return (Trajectory(grid.times.copy(), xs[:, 0, :]),
            SensitivityPath(grid.times.copy(), Gs[:, 0, :, :]))


# ---------------------------------------------------------------------------
# Jacobian self-checks and finite-difference fallbacks
# ---------------------------------------------------------------------------

def check_jacobians(spec: ProblemSpec, rng: np.random.Generator,
                    n_points: int = 5, rtol: float = 1e-5):
    """Verify f_x / f_theta / f_u against central finite differences.

    Raises ValueError when any Jacobian disagrees beyond ``rtol`` relative
    error at random test points.
    """
    for _ in range(n_points):
        x = spec.x0 + rng.standard_normal(spec.n_x) * (0.5 + np.abs(spec.x0))
        th = 1.0 + np.abs(rng.standard_normal(spec.n_theta))
        uc = rng.uniform(spec.u_lo, spec.u_hi)
        t = rng.uniform(0.0, spec.horizon)
        pairs = [
            (spec.f_x(x, uc, th, t), _fd_jac(lambda v: spec.f(v, uc, th, t), x)),
            (spec.f_theta(x, uc, th, t), _fd_jac(lambda v: spec.f(x, uc, v, t), th)),
            (spec.f_u(x, uc, th, t), _fd_jac(lambda v: spec.f(x, v, th, t), uc)),
        ]
        for supplied, fd in pairs:
            scale = 1.0 + np.abs(fd)
            if np.max(np.abs(supplied - fd) / scale) > rtol:
                raise ValueError("model Jacobian disagrees with finite differences")


def _fd_jac(fun: Callable, v: np.ndarray) -> np.ndarray:
    base = np.asarray(fun(v), dtype=float)
    jac = np.empty(base.shape + (v.shape[0],))
    for i in range(v.shape[0]):
        step = 1e-6 * (1.0 + abs(v[i]))
        vp = v.copy(); vp[i] += step
        vm = v.copy(); vm[i] -= step
        jac[..., i] = (np.asarray(fun(vp)) - np.asarray(fun(vm))) / (2.0 * step)
    return jac


def fd_second_derivatives(spec: ProblemSpec):
    """Finite-difference second derivatives from the supplied Jacobians.

    Used when a model does not provide analytic f_xx / f_xu / f_thx /
    f_thu; gradients of sensitivity-propagating criteria are then only
    finite-difference accurate.
    """
    def d_by_x(jac, x, u, th, t):
        out = np.empty(np.asarray(jac(x, u, th, t)).shape + (x.shape[-1],))
        for m in range(x.shape[-1]):
            step = 1e-6 * (1.0 + abs(float(np.atleast_2d(x)[0, m])))
            xp = x.copy(); xp[..., m] += step
            xm = x.copy(); xm[..., m] -= step
            out[..., m] = (np.asarray(jac(xp, u, th, t))
                           - np.asarray(jac(xm, u, th, t))) / (2.0 * step)
        return out

    def d_by_u(jac, x, u, th, t):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        out = np.empty(np.asarray(jac(x, u, th, t)).shape + (u.shape[-1],))
        for m in range(u.shape[-1]):
            step = 1e-6 * (1.0 + abs(float(np.atleast_1d(u)[m])))
            up = u.copy(); up[..., m] += step
            um = u.copy(); um[..., m] -= step
            out[..., m] = (np.asarray(jac(x, up, th, t))
                           - np.asarray(jac(x, um, th, t))) / (2.0 * step)
        return out

    f_xx = lambda x, u, th, t: d_by_x(spec.f_x, x, u, th, t)
    f_xu = lambda x, u, th, t: d_by_u(spec.f_x, x, u, th, t)
    f_thx = lambda x, u, th, t: d_by_x(spec.f_theta, x, u, th, t)
    f_thu = lambda x, u, th, t: d_by_u(spec.f_theta, x, u, th, t)
    return f_xx, f_xu, f_thx, f_thu


# ---------------------------------------------------------------------------
# Benchmark systems
# ---------------------------------------------------------------------------

def _parabatch(x, template_shape):
    """Zeros with batch dims of x and trailing template_shape."""
    batch = np.asarray(x).shape[:-1]
    return np.zeros(batch + template_shape)


def _harmonic_spec(sigma: tuple[float, float]) -> ProblemSpec:
    damping = (0.4, 0.8)

    def f(x, u, th, t):
        u0 = np.asarray(u)[..., 0]
        return np.stack([
            x[..., 2],
            x[..., 3],
            u0 - damping[0] * x[..., 2] - th[..., 0] * x[..., 0],
            u0 - damping[1] * x[..., 3] - th[..., 1] * x[..., 1],
        ], axis=-1)

    def f_x(x, u, th, t):
        J = _parabatch(x, (4, 4))
        J[..., 0, 2] = 1.0
        J[..., 1, 3] = 1.0
        J[..., 2, 0] = -th[..., 0]
        J[..., 2, 2] = -damping[0]
        J[..., 3, 1] = -th[..., 1]
        J[..., 3, 3] = -damping[1]
        return J

    def f_theta(x, u, th, t):
        J = _parabatch(x, (4, 2))
        J[..., 2, 0] = -x[..., 0]
        J[..., 3, 1] = -x[..., 1]
        return J

    def f_u(x, u, th, t):
        J = _parabatch(x, (4, 1))
        J[..., 2, 0] = 1.0
        J[..., 3, 0] = 1.0
        return J

    def f_xx(x, u, th, t):
        return _parabatch(x, (4, 4, 4))

    def f_xu(x, u, th, t):
        return _parabatch(x, (4, 4, 1))

    def f_thx(x, u, th, t):
        T = _parabatch(x, (4, 2, 4))
        T[..., 2, 0, 0] = -1.0
        T[..., 3, 1, 1] = -1.0
        return T

    def f_thu(x, u, th, t):
        return _parabatch(x, (4, 2, 1))

    obs = tuple(
        ObservationMap(
            h=(lambda i: lambda x: x[..., i])(i),
            dh_dx=(lambda i: lambda x: _coord_grad(x, 4, i))(i),
            d2h_dxx=lambda x: _parabatch(x, (4, 4)),
        )
        for i in (0, 1)
    )
    return ProblemSpec(
        n_x=4, n_theta=2, n_exp=2, horizon=10.0, x0=np.array([1.0, 1.0, 0.0, 0.0]),
        f=f, f_x=f_x, f_theta=f_theta, f_u=f_u, obs=obs,
        u_lo=np.array([0.0]), u_hi=np.array([1.0]),
        n_controls=12, n_cells=120, steps_per_cell=4,
        noise=NoiseSpec(np.asarray(sigma), np.array([5, 5])),
        budget=8, min_separation=0.1,
        f_xx=f_xx, f_xu=f_xu, f_thx=f_thx, f_thu=f_thu,
        name="harmonic",
    )


def _coord_grad(x, n, i):
    g = _parabatch(x, (n,))
    g[..., i] = 1.0
    return g


def _lotka_volterra_spec() -> ProblemSpec:
    cu = (0.4, 0.2)

    def f(x, u, th, t):
        u0 = np.asarray(u)[..., 0]
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([
            x1 - th[..., 0] * x1 * x2 - cu[0] * u0 * x1,
            -x2 + th[..., 1] * x1 * x2 - cu[1] * u0 * x2,
        ], axis=-1)

    def f_x(x, u, th, t):
        u0 = np.asarray(u)[..., 0]
        J = _parabatch(x, (2, 2))
        J[..., 0, 0] = 1.0 - th[..., 0] * x[..., 1] - cu[0] * u0
        J[..., 0, 1] = -th[..., 0] * x[..., 0]
        J[..., 1, 0] = th[..., 1] * x[..., 1]
        J[..., 1, 1] = -1.0 + th[..., 1] * x[..., 0] - cu[1] * u0
        return J

    def f_theta(x, u, th, t):
        J = _parabatch(x, (2, 2))
        J[..., 0, 0] = -x[..., 0] * x[..., 1]
        J[..., 1, 1] = x[..., 0] * x[..., 1]
        return J

    def f_u(x, u, th, t):
        J = _parabatch(x, (2, 1))
        J[..., 0, 0] = -cu[0] * x[..., 0]
        J[..., 1, 0] = -cu[1] * x[..., 1]
        return J

    def f_xx(x, u, th, t):
        T = _parabatch(x, (2, 2, 2))
        T[..., 0, 0, 1] = -th[..., 0]
        T[..., 0, 1, 0] = -th[..., 0]
        T[..., 1, 0, 1] = th[..., 1]
        T[..., 1, 1, 0] = th[..., 1]
        return T

    def f_xu(x, u, th, t):
        T = _parabatch(x, (2, 2, 1))
        T[..., 0, 0, 0] = -cu[0]
        T[..., 1, 1, 0] = -cu[1]
        return T

    def f_thx(x, u, th, t):
        T = _parabatch(x, (2, 2, 2))
        T[..., 0, 0, 0] = -x[..., 1]
        T[..., 0, 0, 1] = -x[..., 0]
        T[..., 1, 1, 0] = x[..., 1]
        T[..., 1, 1, 1] = x[..., 0]
        return T

    def f_thu(x, u, th, t):
        return _parabatch(x, (2, 2, 1))

    obs = tuple(
        ObservationMap(
            h=(lambda i: lambda x: x[..., i])(i),
            dh_dx=(lambda i: lambda x: _coord_grad(x, 2, i))(i),
            d2h_dxx=lambda x: _parabatch(x, (2, 2)),
        )
        for i in (0, 1)
    )
    sig = float(np.sqrt(0.2))
    return ProblemSpec(
        n_x=2, n_theta=2, n_exp=2, horizon=12.0, x0=np.array([0.5, 0.7]),
        f=f, f_x=f_x, f_theta=f_theta, f_u=f_u, obs=obs,
        u_lo=np.array([0.0]), u_hi=np.array([1.0]),
        n_controls=12, n_cells=96, steps_per_cell=6,
        noise=NoiseSpec(np.array([sig, sig]), np.array([6, 6])),
        budget=10, min_separation=0.25,
        f_xx=f_xx, f_xu=f_xu, f_thx=f_thx, f_thu=f_thu,
        name="lotka_volterra",
    )


@dataclass(frozen=True)
class PriorConfig:
    """Prior distribution plus the discretization orders used for design."""

    dist: PriorSpec
    orders: tuple[int, ...]
    center_orders: tuple[int, ...]


_HARMONIC_SCENARIOS = {"similar": (0.03, 0.025), "uneven": (0.03, 0.03)}
_LV_SCENARIOS = ("lognormal", "lognormal_mixture")


def benchmark_model(name: str, scenario: str) -> ProblemSpec:
    """Exact benchmark setups; see `benchmark_prior` for the matching priors."""
    if name == "harmonic":
        if scenario not in _HARMONIC_SCENARIOS:
            raise ConfigurationError(f"unknown harmonic scenario '{scenario}'")
        spec = _harmonic_spec(_HARMONIC_SCENARIOS[scenario])
    elif name == "lotka_volterra":
        if scenario not in _LV_SCENARIOS:
            raise ConfigurationError(f"unknown lotka_volterra scenario '{scenario}'")
        spec = _lotka_volterra_spec()
    else:
        raise ConfigurationError(f"unknown benchmark '{name}'")
    check_jacobians(spec, np.random.default_rng(0), n_points=3)
    return spec


def benchmark_prior(name: str, scenario: str) -> PriorConfig:
    """Prior distribution and quadrature orders for each benchmark scenario."""
    if name == "harmonic":
        if scenario not in _HARMONIC_SCENARIOS:
            raise ConfigurationError(f"unknown harmonic scenario '{scenario}'")
        dist = UniformBoxPrior(np.array([5.0, 5.0]), np.array([10.0, 10.0]))
        return PriorConfig(dist, (8, 8), (2, 2))
    if name == "lotka_volterra":
        log2 = float(np.log(2.0))
        base = LogNormalPrior(np.array([log2, log2]), 0.2 * np.eye(2))
        if scenario == "lognormal":
            return PriorConfig(base, (6, 6), (2, 2))
        if scenario == "lognormal_mixture":
            log10 = float(np.log(10.0))
            second = LogNormalPrior(np.array([log10, log10]), 0.05 * np.eye(2))
            dist = LogNormalMixturePrior(np.array([0.5, 0.5]), (base, second))
            return PriorConfig(dist, (4, 4), (2, 2))
        raise ConfigurationError(f"unknown lotka_volterra scenario '{scenario}'")
    raise ConfigurationError(f"unknown benchmark '{name}'")
