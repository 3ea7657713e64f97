"""Quadrature rules, Dirac-mixture priors, and sensor noise models.

All quadratures here are probability rules: weights are positive and sum
to one, so weighted sums are expectations. Gauss-Hermite uses the
probabilists' normalization (exact moments of the standard normal up to
degree 2n-1), Gauss-Legendre is mapped to [a, b] and renormalized so the
weights are uniform-prior probability masses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal


@dataclass(frozen=True)
class Quadrature1D:
    """One-dimensional probability quadrature rule."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("quadrature weights must sum to 1")


def _golub_welsch(alpha: np.ndarray, beta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and probability weights from three-term recurrence coefficients.

    The nodes are the eigenvalues of the symmetric tridiagonal Jacobi
    matrix (diagonal ``alpha``, off-diagonal ``beta``). Weights come from
    w_i = 1 / sum_k phi_k(x_i)^2 with phi_k the orthonormal polynomials,
    which stays accurate for the extreme nodes of high-order rules where
    eigenvector first components underflow.
    """
    n = len(alpha)
    if n == 1:
        return alpha.copy(), np.ones(1)
    nodes = eigh_tridiagonal(alpha, beta, eigvals_only=True)
    p_prev = np.zeros_like(nodes)
    p = np.ones_like(nodes)
    total = np.ones_like(nodes)
    for k in range(1, n):
        p_next = ((nodes - alpha[k - 1]) * p
                  - (beta[k - 2] * p_prev if k > 1 else 0.0)) / beta[k - 1]
        p_prev, p = p, p_next
        total += p * p
    weights = 1.0 / total
    return nodes, weights / weights.sum()


def gauss_hermite(n: int) -> Quadrature1D:
    """Gauss-Hermite rule for the standard normal density (probabilists').

    A rule of order ``n`` integrates polynomials of degree up to 2n-1
    exactly against N(0, 1).
    """
    if n < 1:
        raise ValueError("gauss_hermite order must be >= 1")
    alpha = np.zeros(n)
    beta = np.sqrt(np.arange(1, n, dtype=float))
    nodes, weights = _golub_welsch(alpha, beta)
    return Quadrature1D(nodes, weights)


def gauss_legendre(n: int, a: float, b: float) -> Quadrature1D:
    """Gauss-Legendre rule on [a, b] with weights normalized to sum 1.

    The normalized weights are the probability masses of a Uniform(a, b)
    discretization; the rule reproduces uniform moments of degree up
    to 2n-1 exactly.
    """
    if n < 1:
        raise ValueError("gauss_legendre order must be >= 1")
    if not a < b:
        raise ValueError("gauss_legendre requires a < b")
    alpha = np.zeros(n)
    k = np.arange(1, n, dtype=float)
    beta = k / np.sqrt(4.0 * k**2 - 1.0)
    nodes, weights = _golub_welsch(alpha, beta)
    nodes = 0.5 * (b - a) * nodes + 0.5 * (a + b)
    return Quadrature1D(nodes, weights)


@dataclass(frozen=True)
class ParticleCloud:
    """Finite Dirac mixture {(theta_k, m_k)} with its weighted mean."""

    atoms: np.ndarray   # (N, n_theta)
    masses: np.ndarray  # (N,)
    mean: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        masses = np.asarray(self.masses, dtype=float)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "masses", masses)
        if atoms.shape[0] != masses.shape[0]:
            raise ValueError("atoms and masses length mismatch")
        if np.any(masses <= 0):
            raise ValueError("particle masses must be positive")
        if abs(masses.sum() - 1.0) > 1e-12:
            raise ValueError("particle masses must sum to 1")
        if self.mean is None:
            object.__setattr__(self, "mean", masses @ atoms)
        else:
            object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]


# ---------------------------------------------------------------------------
# Prior specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UniformBoxPrior:
    """Uniform prior on the box [lo, hi]^n."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("uniform box requires lo < hi componentwise")

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))


@dataclass(frozen=True)
class LogNormalPrior:
    """log(theta) ~ N(mean_log, cov_log), componentwise positive support."""

    mean_log: np.ndarray
    cov_log: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean_log, dtype=float))
        c = np.atleast_2d(np.asarray(self.cov_log, dtype=float))
        object.__setattr__(self, "mean_log", m)
        object.__setattr__(self, "cov_log", c)
        try:
            np.linalg.cholesky(c)
        except np.linalg.LinAlgError:
            raise ValueError("log-normal covariance must be positive definite")

    @property
    def dim(self) -> int:
        return self.mean_log.shape[0]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        chol = np.linalg.cholesky(self.cov_log)
        z = rng.standard_normal((n, self.dim))
        return np.exp(self.mean_log + z @ chol.T)


@dataclass(frozen=True)
class LogNormalMixturePrior:
    """Weighted mixture of log-normal components."""

    weights: np.ndarray
    components: tuple[LogNormalPrior, ...]

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", tuple(self.components))
        if len(self.components) != w.shape[0]:
            raise ValueError("one weight per mixture component required")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.choice(len(self.components), size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for j, comp in enumerate(self.components):
            mask = idx == j
            if mask.any():
                out[mask] = comp.sample(rng, int(mask.sum()))
        return out


PriorSpec = UniformBoxPrior | LogNormalPrior | LogNormalMixturePrior


def _tensor_product(rules: list[Quadrature1D]) -> tuple[np.ndarray, np.ndarray]:
    """Tensorize 1D rules: returns nodes (Q, dim) and weights (Q,)."""
    grids = np.meshgrid(*[r.nodes for r in rules], indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    wgrids = np.meshgrid(*[r.weights for r in rules], indexing="ij")
    weights = np.ones(nodes.shape[0])
    for w in wgrids:
        weights = weights * w.ravel()
    return nodes, weights


def build_prior(prior: PriorSpec, orders) -> ParticleCloud:
    """Discretize a prior into a particle cloud by tensor quadrature.

    Uniform boxes use tensor Gauss-Legendre per dimension; log-normals map
    tensor Gauss-Hermite nodes z through exp(mean_log + L z) with L the
    Cholesky factor of cov_log. Mixtures concatenate per-component clouds
    with masses scaled by the mixture weights. The cloud mean is always
    the weighted atom mean.
    """
    orders = np.atleast_1d(np.asarray(orders, dtype=int))
    if np.any(orders < 1):
        raise ValueError("quadrature orders must be >= 1")
    if isinstance(prior, UniformBoxPrior):
        if orders.shape[0] != prior.dim:
            raise ValueError("one order per dimension required")
        rules = [gauss_legendre(int(orders[i]), prior.lo[i], prior.hi[i])
                 for i in range(prior.dim)]
        atoms, masses = _tensor_product(rules)
        return ParticleCloud(atoms, masses)
    if isinstance(prior, LogNormalPrior):
        if orders.shape[0] != prior.dim:
            raise ValueError("one order per dimension required")
        rules = [gauss_hermite(int(orders[i])) for i in range(prior.dim)]
        z, masses = _tensor_product(rules)
        chol = np.linalg.cholesky(prior.cov_log)
        atoms = np.exp(prior.mean_log + z @ chol.T)
        return ParticleCloud(atoms, masses)
    if isinstance(prior, LogNormalMixturePrior):
        parts = [build_prior(c, orders) for c in prior.components]
        atoms = np.concatenate([p.atoms for p in parts], axis=0)
        masses = np.concatenate([w * p.masses
                                 for w, p in zip(prior.weights, parts)])
        return ParticleCloud(atoms, masses)
    raise TypeError(f"unknown prior specification {type(prior).__name__}")


def mix_clouds(clouds: list[ParticleCloud], weights) -> ParticleCloud:
    """Concatenate clouds with masses scaled by mixture weights."""
    weights = np.asarray(weights, dtype=float)
    atoms = np.concatenate([c.atoms for c in clouds], axis=0)
    masses = np.concatenate([w * c.masses for w, c in zip(weights, clouds)])
    return ParticleCloud(atoms, masses)


# ---------------------------------------------------------------------------
# Sensor noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    """Per-sensor Gaussian noise: standard deviations and quadrature orders."""

    sigma: np.ndarray
    orders: np.ndarray

    def __post_init__(self):
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        orders = np.atleast_1d(np.asarray(self.orders, dtype=int))
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "orders", orders)
        if sigma.shape != orders.shape:
            raise ValueError("sigma and orders must have equal length")
        if np.any(sigma <= 0):
            raise ValueError("noise standard deviations must be positive")
        if np.any(orders < 2):
            raise ValueError("noise quadrature orders must be >= 2")

    @property
    def n_sensors(self) -> int:
        return self.sigma.shape[0]


@dataclass(frozen=True)
class NoiseQuadrature:
    """Tensor-product noise rule over all sensors, scaled by sigma_d."""

    nodes: np.ndarray    # (Q, n_exp)
    weights: np.ndarray  # (Q,)

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValueError("noise quadrature weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("noise quadrature weights must sum to 1")


def noise_entropy(noise: NoiseSpec, d: int) -> float:
    """Differential entropy of sensor d's Gaussian noise, in nats."""
    sigma = noise.sigma[d]
    return 0.5 * math.log(2.0 * math.pi * math.e * sigma * sigma)


def sensor_rules(noise: NoiseSpec) -> list[Quadrature1D]:
    """Per-sensor Gauss-Hermite rules scaled by each sigma_d."""
    rules = []
    for d in range(noise.n_sensors):
        gh = gauss_hermite(int(noise.orders[d]))
        rules.append(Quadrature1D(gh.nodes * noise.sigma[d], gh.weights))
    return rules


def noise_quadrature(noise: NoiseSpec) -> NoiseQuadrature:
    """Joint noise rule: tensor product of the scaled per-sensor rules."""
    nodes, weights = _tensor_product(sensor_rules(noise))
    return NoiseQuadrature(nodes, weights)
