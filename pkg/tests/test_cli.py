import numpy as np
import pytest

from oedesign import cli, dynamics as dyn, solve
from oedesign.cli import ParseError


def test_bundled_problems_match_builtins():
    for name, (bench, scen) in cli._BUNDLED.items():
        spec, pcfg = cli.load_problem(name)
        ref = dyn.benchmark_model(bench, scen)
        refp = dyn.benchmark_prior(bench, scen)
        assert spec.horizon == ref.horizon
        assert np.array_equal(spec.x0, ref.x0)
        assert np.allclose(spec.noise.sigma, ref.noise.sigma)
        assert np.array_equal(spec.noise.orders, ref.noise.orders)
        assert spec.budget == ref.budget
        assert spec.min_separation == ref.min_separation
        assert spec.n_cells == ref.n_cells
        assert spec.n_controls == ref.n_controls
        assert pcfg.orders == refp.orders
        assert pcfg.center_orders == refp.center_orders
        assert type(pcfg.dist) is type(refp.dist)


def _base_text():
    from importlib import resources
    ref = resources.files("oedesign").joinpath("problems/harmonic_similar.spec")
    return ref.read_text()


def test_parse_rejects_negative_sigma(tmp_path):
    text = _base_text().replace("sigma_1 = 0.03", "sigma_1 = -0.1")
    p = tmp_path / "bad.spec"
    p.write_text(text)
    with pytest.raises(ParseError, match="sigma_1 must be positive"):
        cli.parse_problem(p)


def test_parse_rejects_unknown_key(tmp_path):
    text = _base_text().replace("sigma_1 = 0.03", "sigm_1 = 0.03\nsigma_1 = 0.03")
    p = tmp_path / "bad.spec"
    p.write_text(text)
    with pytest.raises(ParseError, match="sigm_1"):
        cli.parse_problem(p)


def test_parse_rejects_missing_key(tmp_path):
    text = _base_text().replace("K = 8\n", "")
    p = tmp_path / "bad.spec"
    p.write_text(text)
    with pytest.raises(ParseError, match="'K'"):
        cli.parse_problem(p)


def test_parse_error_reports_line(tmp_path):
    text = _base_text() + "junk line\n"
    p = tmp_path / "bad.spec"
    p.write_text(text)
    with pytest.raises(ParseError, match="line"):
        cli.parse_problem(p)


def test_design_file_round_trip(tmp_path):
    design = solve.DiscreteDesign(((0.25, 0), (1.75, 1), (0.25, 1)),
                                  np.array([[0.5], [0.75]]))
    path = tmp_path / "x.design"
    cli.write_design(path, design, ["oedesign", "test"], 7)
    text = path.read_text()
    assert text.startswith("# argv: oedesign test\n# seed: 7\n")
    back = cli.read_design(path)
    assert back.activations == design.activations
    assert np.array_equal(back.u, design.u)


def test_evaluate_empty_design_dir(tmp_path):
    rc = cli.dispatch(["evaluate", "--problem", "harmonic_similar",
                       "--designs", str(tmp_path), "--runs", "2",
                       "--seed", "0", "--out", str(tmp_path)])
    assert rc == 2


def test_usage_error_exit_code():
    assert cli.dispatch(["design", "--problem", "harmonic_similar"]) == 2
    assert cli.dispatch(["nonsense"]) == 2


def test_unknown_problem_exit_code(tmp_path):
    rc = cli.dispatch(["design", "--problem", "no_such_thing",
                       "--criterion", "inst", "--out", str(tmp_path)])
    assert rc == 2


@pytest.mark.slow
def test_design_evaluate_workflow(tmp_path):
    out = tmp_path / "designs"
    argv = ["design", "--problem", "harmonic_uneven", "--criterion", "d_opt",
            "--seed", "1", "--out", str(out), "--max-iters", "60",
            "--restarts", "1"]
    assert cli.dispatch(argv) == 0
    design_file = out / "d_opt.design"
    assert design_file.exists() and (out / "d_opt.relaxed").exists()
    assert (out / "d_opt.log").exists()
    design = cli.read_design(design_file)
    assert len(design.activations) == 8  # the budget is filled
    times = sorted({t for t, _ in design.activations})
    assert all(b - a >= 0.1 - 1e-12 for a, b in zip(times, times[1:]))

    rc = cli.dispatch(["evaluate", "--problem", "harmonic_uneven",
                       "--designs", str(out), "--runs", "3", "--seed", "2",
                       "--out", str(tmp_path / "eval")])
    assert rc == 0
    csv_path = tmp_path / "eval" / "errors.csv"
    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("# argv: oedesign evaluate")
    assert sum(1 for ln in lines if ln and not ln.startswith("#")) == 1 + 3

    # same argv and seed give byte-identical outputs
    out2 = tmp_path / "designs2"
    argv2 = ["design", "--problem", "harmonic_uneven", "--criterion", "d_opt",
             "--seed", "1", "--out", str(out2), "--max-iters", "60",
             "--restarts", "1"]
    assert cli.dispatch(argv2) == 0
    a = (out / "d_opt.design").read_text().replace(str(out), "OUT")
    b = (out2 / "d_opt.design").read_text().replace(str(out2), "OUT")
    assert a == b


@pytest.mark.slow
def test_reproduce_workflow_smoke(tmp_path):
    rc = cli.dispatch(["reproduce", "--figure", "2", "--runs", "2", "--seed", "0",
                       "--out", str(tmp_path), "--max-iters", "5", "--restarts", "1"])
    assert rc == 0
    fig_dir = tmp_path / "fig2"
    for crit in solve.CRITERIA:
        assert (fig_dir / f"{crit}.design").exists()
    assert (fig_dir / "errors.csv").exists()


@pytest.mark.slow
def test_validate_oracle_suite_exits_zero(capsys):
    rc = cli.dispatch(["validate", "--suite", "oracle"])
    out = capsys.readouterr().out
    assert rc == 0
    assert out.count("[PASS]") == 5
