import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oedesign import measure as ms


def test_gauss_hermite_order_one():
    q = ms.gauss_hermite(1)
    assert np.allclose(q.nodes, [0.0])
    assert np.allclose(q.weights, [1.0])


def test_gauss_hermite_order_two():
    q = ms.gauss_hermite(2)
    assert np.allclose(sorted(q.nodes), [-1.0, 1.0])
    assert np.allclose(q.weights, [0.5, 0.5])


def test_gauss_hermite_tenth_moment():
    # E[Z^10] = 9!! = 945 for a standard normal
    q = ms.gauss_hermite(6)
    assert abs((q.weights * q.nodes**10).sum() - 945.0) < 1e-8


def _normal_moment(p: int) -> float:
    if p % 2 == 1:
        return 0.0
    out = 1.0
    for k in range(1, p, 2):
        out *= k
    return out


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8, 16, 64])
def test_gauss_hermite_polynomial_exactness(n):
    q = ms.gauss_hermite(n)
    for p in range(min(2 * n, 32)):  # beyond ~30 the double-precision moments overflow usefully
        got = (q.weights * q.nodes**p).sum()
        want = _normal_moment(p)
        # odd moments vanish by symmetry; scale their error by the absolute moment
        scale = max(1.0, (q.weights * np.abs(q.nodes) ** p).sum())
        assert abs(got - want) <= 1e-8 * scale


def test_gauss_hermite_rejects_zero():
    with pytest.raises(ValueError):
        ms.gauss_hermite(0)


def test_gauss_legendre_midpoint():
    q = ms.gauss_legendre(1, 5.0, 10.0)
    assert np.allclose(q.nodes, [7.5])
    assert np.allclose(q.weights, [1.0])


def test_gauss_legendre_two_point():
    q = ms.gauss_legendre(2, 5.0, 10.0)
    assert np.allclose(sorted(q.nodes), [7.5 - 2.5 / np.sqrt(3), 7.5 + 2.5 / np.sqrt(3)])
    assert np.allclose(q.weights, [0.5, 0.5])


def test_gauss_legendre_uniform_second_moment():
    # E[theta^2] under Uniform[5, 10] = (10^3 - 5^3) / (3 * 5)
    q = ms.gauss_legendre(8, 5.0, 10.0)
    assert abs((q.weights * q.nodes**2).sum() - 875.0 / 15.0) < 1e-10


def test_gauss_legendre_rejects_bad_interval():
    with pytest.raises(ValueError):
        ms.gauss_legendre(3, 2.0, 2.0)


@given(st.integers(min_value=1, max_value=40))
@settings(max_examples=25, deadline=None)
def test_quadratures_are_probability_rules(n):
    for q in (ms.gauss_hermite(n), ms.gauss_legendre(n, -2.0, 7.0)):
        assert np.all(q.weights > 0)
        assert abs(q.weights.sum() - 1.0) <= 1e-12


def test_build_prior_uniform_box():
    prior = ms.UniformBoxPrior([5.0, 5.0], [10.0, 10.0])
    cloud = ms.build_prior(prior, (8, 8))
    assert cloud.size == 64
    assert abs(cloud.masses.sum() - 1.0) <= 1e-12
    assert np.allclose(cloud.mean, [7.5, 7.5], atol=1e-12)


def test_build_prior_lognormal_mean():
    prior = ms.LogNormalPrior(np.log(2.0) * np.ones(2), 0.2 * np.eye(2))
    cloud = ms.build_prior(prior, (6, 6))
    want = 2.0 * np.exp(0.1)
    assert np.all(np.abs(cloud.mean - want) < 1e-3)


def test_build_prior_mixture_masses():
    base = ms.LogNormalPrior(np.log(2.0) * np.ones(2), 0.2 * np.eye(2))
    other = ms.LogNormalPrior(np.log(10.0) * np.ones(2), 0.05 * np.eye(2))
    mix = ms.LogNormalMixturePrior([0.5, 0.5], (base, other))
    cloud = ms.build_prior(mix, (4, 4))
    part = ms.build_prior(base, (4, 4))
    assert cloud.size == 32
    assert np.allclose(cloud.masses[:16], 0.5 * part.masses)
    assert abs(cloud.masses.sum() - 1.0) <= 1e-12


def test_build_prior_rejects_bad_covariance():
    with pytest.raises(ValueError):
        ms.LogNormalPrior(np.zeros(2), -np.eye(2))


@given(st.sampled_from(["uniform", "lognormal", "mixture"]),
       st.integers(min_value=1, max_value=5))
@settings(max_examples=20, deadline=None)
def test_build_prior_normalization_property(kind, order):
    if kind == "uniform":
        dist = ms.UniformBoxPrior([0.0, -1.0], [2.0, 3.0])
    elif kind == "lognormal":
        dist = ms.LogNormalPrior([0.1, 0.4], 0.3 * np.eye(2))
    else:
        dist = ms.LogNormalMixturePrior(
            [0.25, 0.75],
            (ms.LogNormalPrior([0.0, 0.0], 0.1 * np.eye(2)),
             ms.LogNormalPrior([1.0, 1.0], 0.2 * np.eye(2))))
    cloud = ms.build_prior(dist, (order, order))
    assert abs(cloud.masses.sum() - 1.0) <= 1e-12
    assert np.allclose(cloud.mean, cloud.masses @ cloud.atoms, atol=1e-12)


def test_noise_entropy_values():
    # 0.5 * ln(2 pi e sigma^2), evaluated at sigma = 1, 0.03, sqrt(0.2)
    noise = ms.NoiseSpec([1.0, 0.03, np.sqrt(0.2)], [5, 5, 5])
    assert abs(ms.noise_entropy(noise, 0) - 1.4189385) < 1e-6
    assert abs(ms.noise_entropy(noise, 1) - (-2.0876194)) < 1e-5
    assert abs(ms.noise_entropy(noise, 2) - 0.6142196) < 1e-5


def test_noise_quadrature_tensor():
    noise = ms.NoiseSpec([0.1, 0.2], [5, 5])
    q = ms.noise_quadrature(noise)
    assert q.nodes.shape == (25, 2)
    assert abs(q.weights.sum() - 1.0) <= 1e-14


def test_noise_quadrature_scaled_two_point():
    noise = ms.NoiseSpec([0.03], [2])
    q = ms.noise_quadrature(noise)
    assert np.allclose(sorted(q.nodes[:, 0]), [-0.03, 0.03])


def test_noise_quadrature_second_moment():
    noise = ms.NoiseSpec([0.3, 1.7], [6, 6])
    q = ms.noise_quadrature(noise)
    for d in range(2):
        got = (q.weights * q.nodes[:, d] ** 2).sum()
        assert abs(got - noise.sigma[d] ** 2) < 1e-12


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        ms.NoiseSpec([-0.1], [5])
    with pytest.raises(ValueError):
        ms.NoiseSpec([0.1], [1])


def test_particle_cloud_validation():
    with pytest.raises(ValueError):
        ms.ParticleCloud(np.ones((2, 1)), np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        ms.ParticleCloud(np.ones((2, 1)), np.array([1.0, 0.0]))
