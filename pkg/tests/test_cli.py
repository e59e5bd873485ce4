"""End-to-end command tests; every command runs in process through main()."""

import json

import pytest

from edgemarket.cli import main

SMALL = ("--set", "population.total_users=24", "--set", "population.n_types=3")


def read(path):
    return path.read_text(encoding="utf-8")


def test_solve_writes_all_outputs(tmp_path):
    out = tmp_path / "solve"
    assert main(["solve", "--out", str(out)]) == 0
    for name in ("menus.json", "matching.csv", "assignment.json",
                 "trace.csv", "metrics.json"):
        assert (out / name).exists(), name

    metrics = json.loads(read(out / "metrics.json"))
    assert metrics["converged"] is True
    assert metrics["projected"]["max_user_regret"] <= 5e-3
    assert metrics["projected"]["max_operator_gain_ratio"] <= 0.01
    assert all(w == 0.0 for w in metrics["shadow_prices"])

    menus = json.loads(read(out / "menus.json"))["menus"]
    assert len(menus) == 3
    assert all(len(m) == 8 for m in menus)
    assert menus[0][0]["type_index"] == 1
    assert {"latency_s", "price_usd"} <= set(menus[0][0])

    assignment = json.loads(read(out / "assignment.json"))
    assert assignment["columns"] == ["opt_out", "op_1", "op_2", "op_3"]
    assert all(sum(row) == 1 for row in assignment["assignment"])

    trace = read(out / "trace.csv").splitlines()
    assert trace[0] == "# edgemarket trace v1"
    assert trace[1].startswith("iteration,temperature,matching_residual")
    assert len(trace) == 2 + metrics["iterations"]

    matching = read(out / "matching.csv").splitlines()
    assert matching[0] == "type,opt_out,op_1,op_2,op_3"
    assert len(matching) == 9
    for line in matching[1:]:
        probs = [float(x) for x in line.split(",")[1:]]
        assert sum(probs) == pytest.approx(1.0, abs=1e-9)


def test_solve_rejects_bad_override(tmp_path, capsys):
    code = main(["solve", "--out", str(tmp_path / "x"),
                 "--set", "solver.zeta=1.5"])
    assert code == 1
    assert "zeta" in capsys.readouterr().err


def test_solve_rejects_unknown_key(tmp_path, capsys):
    code = main(["solve", "--out", str(tmp_path / "x"),
                 "--set", "solver.nope=1"])
    assert code == 1
    assert "nope" in capsys.readouterr().err


def test_unwritable_output_directory(tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("a file, not a directory", encoding="utf-8")
    code = main(["solve", "--out", str(blocker / "sub")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_bench_outputs_and_determinism(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["bench", "--out", str(out1)]) == 0
    assert main(["bench", "--out", str(out2)]) == 0
    names = ["bench_ours.json", "bench_ct.json", "bench_mc.json",
             "bench_gsmc.json", "comparison.csv", "totals.json"]
    for name in names:
        assert (out1 / name).exists(), name
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name

    totals = json.loads(read(out1 / "totals.json"))
    assert set(totals) == {"OURS", "CT", "MC", "GSMC"}
    comparison = read(out1 / "comparison.csv").splitlines()
    assert comparison[0] == ("type,ours_opt_out,ours_op_1,ours_op_2,ours_op_3"
                             ",ct,mc,gsmc")
    assert len(comparison) == 9


def test_seed_flag_changes_the_composition(tmp_path):
    out1, out2 = tmp_path / "s0", tmp_path / "s3"
    assert main(["bench", "--out", str(out1), *SMALL]) == 0
    assert main(["bench", "--out", str(out2), *SMALL, "--seed", "3"]) == 0
    a = json.loads(read(out1 / "bench_ct.json"))
    b = json.loads(read(out2 / "bench_ct.json"))
    assert a["design_congestion"] != b["design_congestion"]


def test_scenario_file_flag(tmp_path):
    scn_path = tmp_path / "scn.json"
    scn_path.write_text(json.dumps({
        "population": {"total_users": 24, "n_types": 3},
    }), encoding="utf-8")
    out = tmp_path / "out"
    assert main(["solve", "--scenario", str(scn_path), "--out", str(out)]) == 0
    menus = json.loads(read(out / "menus.json"))["menus"]
    assert all(len(m) == 3 for m in menus)


def test_sweep_writes_detail_and_mean(tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--out", str(out), *SMALL,
                 "--sweep", "total_users=24,30", "--replicates", "1"]) == 0
    detail = read(out / "sweep_total_users.csv").splitlines()
    mean = read(out / "sweep_total_users_mean.csv").splitlines()
    assert detail[0] == "# edgemarket sweep v1"
    assert mean[0] == "# edgemarket sweep v1"
    # 2 values x 1 replicate x 4 methods, plus version and header lines
    assert len(detail) == 2 + 8
    assert len(mean) == 2 + 8


def test_sweep_rejects_malformed_axis(tmp_path, capsys):
    code = main(["sweep", "--out", str(tmp_path / "x"), "--sweep", "zeta"])
    assert code == 1
    assert "AXIS=" in capsys.readouterr().err


def test_validate_prints_one_line_per_check(capsys):
    code = main(["validate", *SMALL])
    out = capsys.readouterr().out.splitlines()
    assert code == 0
    assert len(out) == 4
    assert all(line.startswith("PASS ") for line in out)
    names = [line.split()[1].rstrip(":") for line in out]
    assert names == ["floor-stability", "bound-dominance", "menu-ic-ir",
                     "small-menu-oracle"]


def test_validate_fails_on_unstable_floor(capsys):
    code = main(["validate", "--set", "operators.2.processing.servers=1",
                 "--set", "operators.2.processing.unit_throughput=3.6e11"])
    out = capsys.readouterr().out
    assert code == 1
    assert "FAIL floor-stability" in out


def test_emit_plots_writes_scripts(tmp_path):
    out = tmp_path / "plots"
    assert main(["emit-plots", "--out", str(out)]) == 0
    for name in ("plot_market_structure.py", "plot_economics.py",
                 "plot_robustness.py", "PLOTS.txt"):
        assert (out / name).exists(), name
    text = read(out / "plot_market_structure.py")
    assert "total_users" in text and "matplotlib" in text
    compile(text, "plot_market_structure.py", "exec")
