import numpy as np
import pytest

from oedesign import oracle as orc
from oedesign.solve import DiscreteDesign


def _scalar_model(H_rows, R=1.0, s0=1.0):
    M = len(H_rows)
    return orc.LinearGaussianModel(
        H=np.array(H_rows, dtype=float).reshape(M, 1, 1),
        b=np.zeros((M, 1)), R=np.full((M, 1), R), w=np.ones((M, 1)),
        m0=np.zeros(1), Sigma0=np.array([[s0]]))


def test_lg_single_stage():
    total, inc = orc.lg_eig_closed_form(_scalar_model([1.0]))
    assert abs(total - 0.5 * np.log(2.0)) < 1e-12


def test_lg_two_identical_stages():
    total, inc = orc.lg_eig_closed_form(_scalar_model([1.0, 1.0]))
    assert abs(inc[0] - 0.5 * np.log(2.0)) < 1e-12
    assert abs(inc[1] - 0.5 * np.log(1.5)) < 1e-12
    assert abs(total - 0.5 * np.log(3.0)) < 1e-12


def test_lg_decoupled_coordinates():
    H = np.zeros((2, 1, 2))
    H[0, 0, 0] = 1.0
    H[1, 0, 1] = 1.0
    model = orc.LinearGaussianModel(H=H, b=np.zeros((2, 1)), R=np.ones((2, 1)),
                                    w=np.ones((2, 1)), m0=np.zeros(2),
                                    Sigma0=np.eye(2))
    total, _ = orc.lg_eig_closed_form(model)
    assert abs(total - np.log(2.0)) < 1e-12


def test_lg_tilt_matches_closed_form_examples():
    for model in (_scalar_model([1.0]), _scalar_model([1.0, 1.0])):
        total, _ = orc.lg_eig_closed_form(model)
        assert abs(orc.lg_tilt_exact(model) - total) < 1e-10


def test_lg_tilt_zero_information():
    model = _scalar_model([0.0, 0.0])
    assert orc.lg_tilt_exact(model) == 0.0


def test_lg_tilt_random_models():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n_th = int(rng.integers(1, 4))
        M = int(rng.integers(1, 6))
        A = rng.standard_normal((n_th, n_th))
        model = orc.LinearGaussianModel(
            H=rng.standard_normal((M, 2, n_th)), b=rng.standard_normal((M, 2)),
            R=rng.uniform(0.2, 2.0, (M, 2)),
            w=(rng.random((M, 2)) < 0.7).astype(float),
            m0=rng.standard_normal(n_th), Sigma0=A @ A.T + n_th * np.eye(n_th))
        total, _ = orc.lg_eig_closed_form(model)
        assert abs(orc.lg_tilt_exact(model) - total) <= 1e-10


def test_enumerate_noiseless_binary():
    model = orc.DiscreteModel(np.array([0.5, 0.5]), (np.eye(2),))
    rep = orc.enumerate_mi(model)
    assert abs(rep.j_eig - np.log(2.0)) < 1e-12
    assert np.allclose(rep.gaps, [0.0])


def test_enumerate_two_identical_observations():
    model = orc.DiscreteModel(np.array([0.5, 0.5]), (np.eye(2), np.eye(2)))
    rep = orc.enumerate_mi(model)
    assert np.allclose(rep.increments, [np.log(2.0), 0.0], atol=1e-12)
    assert np.allclose(rep.inst_terms, [np.log(2.0)] * 2, atol=1e-12)
    assert abs(rep.gaps[1] - np.log(2.0)) < 1e-12


def test_enumerate_identity_and_bounds_random():
    rng = np.random.default_rng(5)
    for _ in range(30):
        model = orc.random_discrete_model(rng, 4, 3, 3)
        rep = orc.enumerate_mi(model)
        assert np.abs((rep.inst_terms - rep.increments) - rep.gaps).max() <= 1e-12
        assert rep.j_eig <= rep.j_inst + 1e-12
        assert rep.j_inst / max(rep.k_time, 1) <= rep.j_eig + 1e-12


def test_enumerate_capacity_guard():
    model = orc.DiscreteModel(np.array([0.5, 0.5]),
                              tuple(np.full((2, 10), 0.1) for _ in range(8)))
    with pytest.raises(orc.CapacityError):
        orc.enumerate_mi(model, max_support=10**6)


def test_k_time_counts_active_stages():
    model = orc.DiscreteModel(np.array([0.4, 0.6]),
                              (np.eye(2), np.ones((2, 1)), np.eye(2)))
    assert model.k_time == 2


def test_nested_mc_zero_design():
    spec, _ = orc.linear_benchmark(4, sigma=1.0)
    cloud = orc.gaussian_cloud([0.0], [[1.0]], [8])
    design = DiscreteDesign((), np.zeros((1, 1)))
    est, se = orc.nested_mc_eig(spec, design, cloud, 100, 100, seed=0)
    assert est == 0.0 and se == 0.0


def test_nested_mc_matches_lg_closed_form():
    # gentle benchmark so the order-20 cloud is indistinguishable from the
    # continuous prior at Monte Carlo resolution
    spec, builder = orc.linear_benchmark(3, sigma=2.0)
    model = builder(np.array([0.4]), np.array([[0.25]]))
    closed, _ = orc.lg_eig_closed_form(model)
    cloud = orc.gaussian_cloud([0.4], [[0.25]], [20])
    mids = spec.grid().cell_mid_times()
    design = DiscreteDesign(tuple((float(t), 0) for t in mids), np.zeros((1, 1)))
    est, se = orc.nested_mc_eig(spec, design, cloud, 20000, 4000, seed=9)
    assert abs(est - closed) <= 3 * se


def test_nested_mc_matches_enumeration():
    model = orc.DiscreteModel(
        np.array([0.3, 0.45, 0.25]),
        (np.array([[0.8, 0.2], [0.3, 0.7], [0.5, 0.5]]),
         np.array([[0.6, 0.3, 0.1], [0.1, 0.6, 0.3], [0.25, 0.5, 0.25]])))
    rep = orc.enumerate_mi(model)
    est, se = orc.nested_mc_eig_discrete(model, 40000, 4000, seed=5)
    assert abs(est - rep.j_eig) <= 3 * se


def test_nested_mc_reproducible():
    spec, _ = orc.linear_benchmark(3, sigma=1.0)
    cloud = orc.gaussian_cloud([0.0], [[0.5]], [10])
    mids = spec.grid().cell_mid_times()
    design = DiscreteDesign(tuple((float(t), 0) for t in mids), np.zeros((1, 1)))
    a = orc.nested_mc_eig(spec, design, cloud, 500, 100, seed=42)
    b = orc.nested_mc_eig(spec, design, cloud, 500, 100, seed=42)
    assert a == b


def test_nested_mc_rejects_small_samples():
    spec, _ = orc.linear_benchmark(3, sigma=1.0)
    cloud = orc.gaussian_cloud([0.0], [[0.5]], [10])
    design = DiscreteDesign(((0.5, 0),), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        orc.nested_mc_eig(spec, design, cloud, 5, 100, seed=0)
