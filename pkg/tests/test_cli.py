import json

import numpy as np
import pytest

from capdrop import cli, io


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_horizon_reference(capsys):
    code, out, _ = run(capsys, "horizon", "two_cell")
    assert code == 0
    for line in ("T_D=2", "T_R=4", "T_S=13", "total=19"):
        assert line in out.splitlines()


def test_horizon_json_and_general(capsys):
    code, out, _ = run(capsys, "horizon", "two_cell", "--general", "--json")
    assert code == 0
    report = json.loads(out)
    assert report["T_D"] == 17 and report["T_R"] == 4


def test_horizon_rejects_three_cells(capsys):
    code, _, err = run(capsys, "horizon", "three_cell")
    assert code == 1 and "two-cell" in err


def test_analyze_flags_drain(capsys):
    code, out, _ = run(capsys, "analyze", "two_cell", "--lambda0", "40")
    assert code == 0
    drain = next(l for l in out.splitlines() if l.startswith("drain"))
    assert "FAILS" in drain
    code, out, _ = run(capsys, "analyze", "two_cell", "--json")
    report = json.loads(out)
    assert report["drain_ok"] and report["delta_E"] == pytest.approx(50 / 3)


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run(capsys, "control", "two_cell", "--controller", "none", "--bogus")
    assert code == 1 and "--bogus" in err


def test_unknown_scenario(capsys):
    code, _, err = run(capsys, "simulate", "nowhere")
    assert code == 1 and "nowhere" in err


def test_invalid_memory(capsys):
    code, _, err = run(capsys, "control", "two_cell", "--controller", "ehmpc",
                       "--horizon", "3", "--memory", "5")
    assert code == 1 and "memory" in err


def test_solver_failure_exit_code(capsys, monkeypatch):
    import capdrop.controllers as ctl
    from capdrop.milp import MilpSolution
    monkeypatch.setattr(ctl, "solve_milp",
                        lambda *a, **k: MilpSolution("infeasible", None, np.inf, np.inf, 0))
    code, _, err = run(capsys, "control", "two_cell", "--controller", "ehmpc",
                       "--horizon", "3", "--steps", "2")
    assert code == 2 and "solver" in err


def test_simulate_writes_csv_and_summary(capsys, tmp_path):
    out = tmp_path / "sim.csv"
    code, stdout, _ = run(capsys, "simulate", "two_cell", "--u", "0.5",
                          "--steps", "12", "--out", str(out))
    assert code == 0
    cols = io.read_record_csv(out)
    assert len(cols["k"]) == 12
    assert (cols["u_1"] == 0.5).all()
    info = json.loads(out.with_suffix(".json").read_text())
    assert info["steps"] == 12
    assert json.loads(stdout)["cumulative_exits"] == pytest.approx(info["cumulative_exits"])


def test_control_writes_solve_rows(capsys, tmp_path):
    out = tmp_path / "ctl.csv"
    code, _, _ = run(capsys, "control", "two_cell", "--controller", "ehmpc",
                     "--horizon", "4", "--steps", "6", "--out", str(out))
    assert code == 0
    rows = (tmp_path / "ctl_solves.csv").read_text().splitlines()
    assert rows[0] == "step,wall_time,nodes,objective,status"
    assert len(rows) == 7


def test_compare_ranks_by_exits(capsys, tmp_path):
    code, out, _ = run(capsys, "compare", "two_cell", "--controllers", "none,hc,rampc",
                       "--horizon", "8", "--steps", "30", "--out", str(tmp_path))
    assert code == 0
    table = json.loads((tmp_path / "ranking.json").read_text())
    exits = [row["cumulative_exits"] for row in table]
    assert exits == sorted(exits, reverse=True)
    assert {row["controller"] for row in table} == {"none", "hc", "rampc"}
    assert out.splitlines()[0].split()[:3] == ["rank", "controller", "cumulative_exits"]


def test_compare_rejects_unknown_controller(capsys):
    code, _, err = run(capsys, "compare", "two_cell", "--controllers", "none,pid")
    assert code == 1 and "pid" in err
