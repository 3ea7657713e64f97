"""Exact reverse-mode differentiation of the fixed-step RK4 transcription.

The forward integrators here store the four stage states of every step so
the reverse sweep can evaluate model Jacobians exactly where the forward
pass did. The resulting control gradients are the exact derivatives of
the discretized computation (no finite differencing anywhere).

Two systems are supported:

* a particle batch ``x' = f(x, u, theta_k, t)``, one state row per prior
  atom, and
* an augmented reference batch ``(x, G)`` per tilt/Fisher center, where
  ``G' = f_x G + f_theta`` is the forward sensitivity. Its reverse sweep
  needs second derivatives of ``f``; models may supply them analytically
  or fall back to finite differences of their Jacobians.

Stage times are passed to the model callables as a broadcastable array
(shape (4, 1, ...)) when the four stages are evaluated in one batch.
"""

from __future__ import annotations

import numpy as np

from .dynamics import ProblemSpec, TimeGrid, _check_finite, _controls_per_step, fd_second_derivatives

_RK_COEF = np.array([1.0, 2.0, 2.0, 1.0]) / 6.0


def _stage_times(t: float, h: float, trailing_ndim: int) -> np.ndarray:
    ts = np.array([t, t + 0.5 * h, t + 0.5 * h, t + h])
    return ts.reshape((4,) + (1,) * trailing_ndim)


def integrate_particles_fwd(spec: ProblemSpec, u: np.ndarray, thetas: np.ndarray,
                            grid: TimeGrid, store_stages: bool):
    """Forward RK4 over a particle batch; optionally keep stage states.

    Returns (xs, stages) with xs of shape (S+1, N, n_x) and stages of
    shape (S, 4, N, n_x) or None.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    n = thetas.shape[0]
    us = _controls_per_step(u, grid)
    ts, h = grid.times, grid.dt
    S = grid.n_steps
    xs = np.empty((S + 1, n, spec.n_x))
    stages = np.empty((S, 4, n, spec.n_x)) if store_stages else None
    x = np.broadcast_to(spec.x0, (n, spec.n_x)).copy()
    xs[0] = x
    f = spec.f
    for s in range(S):
        t, uc = ts[s], us[s]
        z1 = x
        k1 = f(z1, uc, thetas, t)
        z2 = x + 0.5 * h * k1
        k2 = f(z2, uc, thetas, t + 0.5 * h)
        z3 = x + 0.5 * h * k2
        k3 = f(z3, uc, thetas, t + 0.5 * h)
        z4 = x + h * k3
        k4 = f(z4, uc, thetas, t + h)
        if store_stages:
            stages[s, 0], stages[s, 1], stages[s, 2], stages[s, 3] = z1, z2, z3, z4
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        xs[s + 1] = x
        if (s + 1) % grid.steps_per_cell == 0:
            _check_finite(x, ts[s + 1])
    return xs, stages


def reverse_particles(spec: ProblemSpec, u: np.ndarray, thetas: np.ndarray,
                      grid: TimeGrid, stages: np.ndarray,
                      sources: np.ndarray) -> np.ndarray:
    """Reverse sweep over the particle batch.

    ``sources[s]`` is d(value)/d(x at node s), shape (S+1, N, n_x); the
    return value is d(value)/du with shape (N_u, n_u).
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    us = _controls_per_step(u, grid)
    ts, h = grid.times, grid.dt
    S = grid.n_steps
    intervals = grid.control_of_cell[grid.cell_of_step]
    u_bar = np.zeros((grid.n_controls, np.atleast_2d(u).shape[1]))
    xbar = sources[S].copy()
    for s in range(S - 1, -1, -1):
        t, uc = ts[s], us[s]
        z = stages[s]  # (4, N, n_x)
        tt = _stage_times(t, h, z.ndim - 1)
        A = spec.f_x(z, uc, thetas, tt)   # (4, N, n_x, n_x)
        B = spec.f_u(z, uc, thetas, tt)   # (4, N, n_x, n_u)
        kbar = np.empty_like(z)
        zbar = np.empty_like(z)
        step_u = 0.0
        # stage 4 back to stage 1
        kbar[3] = (h * _RK_COEF[3]) * xbar
        zbar[3] = np.einsum("nij,ni->nj", A[3], kbar[3])
        step_u = step_u + np.einsum("nil,ni->l", B[3], kbar[3])
        kbar[2] = (h * _RK_COEF[2]) * xbar + h * zbar[3]
        zbar[2] = np.einsum("nij,ni->nj", A[2], kbar[2])
        step_u = step_u + np.einsum("nil,ni->l", B[2], kbar[2])
        kbar[1] = (h * _RK_COEF[1]) * xbar + 0.5 * h * zbar[2]
        zbar[1] = np.einsum("nij,ni->nj", A[1], kbar[1])
        step_u = step_u + np.einsum("nil,ni->l", B[1], kbar[1])
        kbar[0] = (h * _RK_COEF[0]) * xbar + 0.5 * h * zbar[1]
        zbar[0] = np.einsum("nij,ni->nj", A[0], kbar[0])
        step_u = step_u + np.einsum("nil,ni->l", B[0], kbar[0])
        xbar = xbar + zbar[0] + zbar[1] + zbar[2] + zbar[3]
        u_bar[intervals[s]] += step_u
        xbar += sources[s]
    return u_bar


def _second_derivs(spec: ProblemSpec):
    if all(c is not None for c in (spec.f_xx, spec.f_xu, spec.f_thx, spec.f_thu)):
        return spec.f_xx, spec.f_xu, spec.f_thx, spec.f_thu
    return fd_second_derivatives(spec)


def integrate_augmented_fwd(spec: ProblemSpec, u: np.ndarray, thetas: np.ndarray,
                            grid: TimeGrid, store_stages: bool):
    """Forward RK4 for the (x, G) system over a batch of reference points.

    Returns (xs, Gs, stages) with stages = (zx, zG) stage-state arrays of
    shapes (S, 4, J, n_x) and (S, 4, J, n_x, n_theta), or None.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    nref = thetas.shape[0]
    us = _controls_per_step(u, grid)
    ts, h = grid.times, grid.dt
    S = grid.n_steps
    xs = np.empty((S + 1, nref, spec.n_x))
    Gs = np.empty((S + 1, nref, spec.n_x, spec.n_theta))
    zx = np.empty((S, 4, nref, spec.n_x)) if store_stages else None
    zGs = np.empty((S, 4, nref, spec.n_x, spec.n_theta)) if store_stages else None
    x = np.broadcast_to(spec.x0, (nref, spec.n_x)).copy()
    G = np.zeros((nref, spec.n_x, spec.n_theta))
    xs[0], Gs[0] = x, G
    f, f_x, f_th = spec.f, spec.f_x, spec.f_theta

    def rhs(xv, Gv, uc, t):
        kx = f(xv, uc, thetas, t)
        kG = np.einsum("nij,njk->nik", f_x(xv, uc, thetas, t), Gv) \
            + f_th(xv, uc, thetas, t)
        return kx, kG

    for s in range(S):
        t, uc = ts[s], us[s]
        x1, G1 = x, G
        k1, K1 = rhs(x1, G1, uc, t)
        x2, G2 = x + 0.5 * h * k1, G + 0.5 * h * K1
        k2, K2 = rhs(x2, G2, uc, t + 0.5 * h)
        x3, G3 = x + 0.5 * h * k2, G + 0.5 * h * K2
        k3, K3 = rhs(x3, G3, uc, t + 0.5 * h)
        x4, G4 = x + h * k3, G + h * K3
        k4, K4 = rhs(x4, G4, uc, t + h)
        if store_stages:
            zx[s, 0], zx[s, 1], zx[s, 2], zx[s, 3] = x1, x2, x3, x4
            zGs[s, 0], zGs[s, 1], zGs[s, 2], zGs[s, 3] = G1, G2, G3, G4
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        G = G + (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
        xs[s + 1], Gs[s + 1] = x, G
        if (s + 1) % grid.steps_per_cell == 0:
            _check_finite(x, ts[s + 1])
    _check_finite(G, ts[-1])
    return xs, Gs, (zx, zGs) if store_stages else None


def reverse_augmented(spec: ProblemSpec, u: np.ndarray, thetas: np.ndarray,
                      grid: TimeGrid, stages, x_sources: np.ndarray,
                      G_sources: np.ndarray) -> np.ndarray:
    """Reverse sweep for the (x, G) system; returns du of shape (N_u, n_u).

    ``x_sources`` (S+1, J, n_x) and ``G_sources`` (S+1, J, n_x, n_theta)
    hold the per-node cotangents of the objective.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    us = _controls_per_step(u, grid)
    ts, h = grid.times, grid.dt
    S = grid.n_steps
    intervals = grid.control_of_cell[grid.cell_of_step]
    u_bar = np.zeros((grid.n_controls, np.atleast_2d(u).shape[1]))
    f_xx, f_xu, f_thx, f_thu = _second_derivs(spec)
    zx_all, zG_all = stages
    xbar = x_sources[S].copy()
    Gbar = G_sources[S].copy()
    for s in range(S - 1, -1, -1):
        t, uc = ts[s], us[s]
        zx = zx_all[s]  # (4, J, n_x)
        zG = zG_all[s]  # (4, J, n_x, n_theta)
        tt = _stage_times(t, h, zx.ndim - 1)
        A = spec.f_x(zx, uc, thetas, tt)      # (4,J,i,j)
        B = spec.f_u(zx, uc, thetas, tt)      # (4,J,i,l)
        Txx = f_xx(zx, uc, thetas, tt)        # (4,J,i,p,m)
        Txu = f_xu(zx, uc, thetas, tt)        # (4,J,i,p,l)
        Tthx = f_thx(zx, uc, thetas, tt)      # (4,J,i,q,m)
        Tthu = f_thu(zx, uc, thetas, tt)      # (4,J,i,q,l)

        def vjp(i, vx, vG):
            # cotangent of rhs at stage i pulled back to (x, G, u)
            xb = np.einsum("nij,ni->nj", A[i], vx)
            xb += np.einsum("nipm,npq,niq->nm", Txx[i], zG[i], vG)
            xb += np.einsum("niqm,niq->nm", Tthx[i], vG)
            Gb = np.einsum("niq,nip->npq", vG, A[i])
            ub = np.einsum("nil,ni->l", B[i], vx)
            ub += np.einsum("nipl,npq,niq->l", Txu[i], zG[i], vG)
            ub += np.einsum("niql,niq->l", Tthu[i], vG)
            return xb, Gb, ub

        step_u = 0.0
        kx4 = (h * _RK_COEF[3]) * xbar
        kG4 = (h * _RK_COEF[3]) * Gbar
        zx4, zG4, ub = vjp(3, kx4, kG4)
        step_u = step_u + ub
        kx3 = (h * _RK_COEF[2]) * xbar + h * zx4
        kG3 = (h * _RK_COEF[2]) * Gbar + h * zG4
        zx3, zG3, ub = vjp(2, kx3, kG3)
        step_u = step_u + ub
        kx2 = (h * _RK_COEF[1]) * xbar + 0.5 * h * zx3
        kG2 = (h * _RK_COEF[1]) * Gbar + 0.5 * h * zG3
        zx2, zG2, ub = vjp(1, kx2, kG2)
        step_u = step_u + ub
        kx1 = (h * _RK_COEF[0]) * xbar + 0.5 * h * zx2
        kG1 = (h * _RK_COEF[0]) * Gbar + 0.5 * h * zG2
        zx1, zG1, ub = vjp(0, kx1, kG1)
        step_u = step_u + ub
        xbar = xbar + zx1 + zx2 + zx3 + zx4
        Gbar = Gbar + zG1 + zG2 + zG3 + zG4
        u_bar[intervals[s]] += step_u
        xbar += x_sources[s]
        Gbar += G_sources[s]
    return u_bar
