"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The reduced-scale benchmark studies (criteria 9-12) are expensive; they
run once in a session fixture and the individual tests assert on the
shared results. Run with `pytest -s tests/test_acceptance.py` to see the
per-criterion lines.
"""

import numpy as np
import pytest

from oedesign import validate as val


def _report(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num} ({name}): {detail}")


def test_criterion_1_linear_gaussian_exactness():
    ok, detail = val.check_lg_tilt_exactness()
    _report(1, "linear-Gaussian tilt exactness", ok, detail)
    assert ok, detail


def test_criterion_2_redundancy_identity():
    ok, detail = val.check_redundancy_identity()
    _report(2, "redundancy identity", ok, detail)
    assert ok, detail


def test_criterion_3_surrogate_bounds():
    ok, detail = val.check_surrogate_bounds()
    _report(3, "myopic surrogate bounds", ok, detail)
    assert ok, detail


def test_criterion_4_tilt_quadrature_convergence():
    ok, detail = val.check_tilt_convergence()
    _report(4, "tilt quadrature convergence", ok, detail)
    assert ok, detail


def test_criterion_5_entropy_decomposition():
    ok, detail = val.check_entropy_decomposition()
    _report(5, "relaxed-observation entropy decomposition", ok, detail)
    assert ok, detail


def test_criterion_6_gradient_exactness():
    ok, detail = val.check_gradient_exactness()
    _report(6, "gradient exactness", ok, detail)
    assert ok, detail


def test_criterion_7_tilt_path_invariants():
    ok, detail = val.check_tilt_path_invariants()
    _report(7, "tilt mass path invariants", ok, detail)
    assert ok, detail


def test_criterion_8_bang_bang_vertex():
    ok, detail = val.check_bang_bang_vertex()
    _report(8, "bang-bang vertex optimality", ok, detail)
    assert ok, detail


@pytest.fixture(scope="session")
def benchmark_results():
    surrogates = ["inst", "tilt", "multi_tilt"]
    all_criteria = ["a_opt", "d_opt", "inst", "tilt", "multi_tilt"]
    first = {
        "uneven": val.run_benchmark_pipeline("harmonic_uneven", surrogates,
                                             runs=50, seed=0),
        "mixture": val.run_benchmark_pipeline("lotka_volterra_lognormal_mixture",
                                              all_criteria, runs=200, seed=0),
        "similar": val.run_benchmark_pipeline("harmonic_similar", all_criteria,
                                              runs=200, seed=0),
    }
    second = {
        "uneven": val.run_benchmark_pipeline("harmonic_uneven", surrogates,
                                             runs=50, seed=0),
        "mixture": val.run_benchmark_pipeline("lotka_volterra_lognormal_mixture",
                                              all_criteria, runs=200, seed=0),
        "similar": val.run_benchmark_pipeline("harmonic_similar", all_criteria,
                                              runs=200, seed=0),
    }
    return first, second


@pytest.mark.slow
def test_criterion_9_harmonic_uneven_structure(benchmark_results):
    first, _ = benchmark_results
    ok, detail = val.check_harmonic_uneven(first["uneven"])
    _report(9, "uneven-observability sensor allocation", ok, detail)
    assert ok, detail


@pytest.mark.slow
def test_criterion_10_lv_mixture_ordering(benchmark_results):
    first, _ = benchmark_results
    ok, detail = val.check_lv_mixture(first["mixture"])
    _report(10, "mixture-prior method ordering", ok, detail)
    assert ok, detail


@pytest.mark.slow
def test_criterion_11_harmonic_similar_ordering(benchmark_results):
    # Known failure, asserted as stated rather than weakened: at this noise
    # scale the discretized information surrogates saturate and their optima
    # are nearly indifferent among schedules, so the Fisher designs' late
    # high-sensitivity measurements win the median comparison under a
    # multi-start estimator (see README).
    first, _ = benchmark_results
    ok, detail = val.check_harmonic_similar(first["similar"])
    _report(11, "balanced-noise method ordering", ok, detail)
    assert ok, detail


@pytest.mark.slow
def test_criterion_12_determinism(benchmark_results):
    first, second = benchmark_results
    same_csv = all(first[k]["csv"] == second[k]["csv"] for k in first)
    same_designs = all(
        first[k]["designs"][m].activations == second[k]["designs"][m].activations
        and np.array_equal(first[k]["designs"][m].u, second[k]["designs"][m].u)
        for k in first for m in first[k]["designs"])
    ok = same_csv and same_designs
    _report(12, "benchmark determinism", ok,
            "byte-identical CSVs and identical designs on rerun" if ok
            else f"csv match={same_csv}, designs match={same_designs}")
    assert ok
