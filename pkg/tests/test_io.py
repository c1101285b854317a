import json

import numpy as np
import pytest

from capdrop import io, model
from capdrop.controllers import ControllerConfig
from capdrop.harness import replay, run_closed_loop
from capdrop.io import ScenarioError


@pytest.mark.parametrize("name", ["two_cell", "three_cell", "eight_cell"])
def test_round_trip_is_byte_identical(tmp_path, name):
    sc = io.load_scenario(io.bundled(name))
    first = tmp_path / "a.json"
    io.write_scenario(sc, first)
    again = io.load_scenario(first)
    assert io.dumps_scenario(again) == first.read_text()
    assert np.array_equal(again.lambda0, sc.lambda0)
    assert np.array_equal(again.lam, sc.lam)


def test_three_cell_bundle():
    sc = io.load_scenario(io.bundled("three_cell"))
    assert sc.network.n == 3 and sc.K == 81
    assert list(sc.network.ramp_cells) == [0, 1]
    assert model.validate(sc.network) == []


def test_eight_cell_ramps_only_on_odd_cells():
    sc = io.load_scenario(io.bundled("eight_cell"))
    net = sc.network
    assert list(net.ramp_cells) == [0, 2, 4, 6]
    idle = [i for i in range(8) if i not in (0, 2, 4, 6)]
    assert (net.c[idle] == 0).all() and (sc.lam[:, idle] == 0).all()
    assert (sc.lam[:, [0, 2, 4, 6]] == 80).all()


def _doc(name="three_cell"):
    return json.loads(io.bundled(name).read_text())


def test_missing_field_is_named(tmp_path):
    doc = _doc()
    del doc["cell_defaults"]["x_jam"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ScenarioError, match=r"cells\[0\]\.x_jam"):
        io.load_scenario(path)


@pytest.mark.parametrize("mutate, needle", [
    (lambda d: d.update(K=0), "K"),
    (lambda d: d.update(h="1/0"), "h"),
    (lambda d: d.update(lambda0=[1, 2]), "lambda0"),
    (lambda d: d["ramps"][0].update(present="yes"), "ramps[0].present"),
    (lambda d: d.update(x0=[0, "a", 0]), "x0[1]"),
])
def test_parse_errors_point_at_location(mutate, needle):
    doc = _doc()
    mutate(doc)
    with pytest.raises(ScenarioError) as err:
        io.parse_scenario(doc)
    assert needle in str(err.value)


def test_malformed_json_reports_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "h": 1,\n  "K": \n}')
    with pytest.raises(ScenarioError, match="line 4"):
        io.load_scenario(path)


@pytest.fixture(scope="module")
def heuristic_run():
    sc = io.load_scenario(io.bundled("three_cell"))
    return sc, run_closed_loop(sc, ControllerConfig("hc"))


def test_csv_column_order(tmp_path, heuristic_run):
    _, rec = heuristic_run
    path = tmp_path / "run.csv"
    io.write_record(rec, path)
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["k", "x_1", "x_2", "x_3", "r_1", "r_2", "r_3",
                      "sigma_1", "sigma_2", "sigma_3", "phi_1", "phi_2", "phi_3",
                      "u_1", "u_2", "exit_flow", "cumulative_exits"]
    cols = io.read_record_csv(path)
    assert len(cols["k"]) == 81
    assert (np.diff(cols["cumulative_exits"]) >= 0).all()
    # nine significant digits
    assert cols["exit_flow"] == pytest.approx(rec.exits, rel=1e-8)


def test_replay_is_bit_identical(heuristic_run):
    sc, rec = heuristic_run
    for k, res in enumerate(replay(sc, rec)):
        assert res.state.x.tobytes() == rec.x[k + 1].tobytes()
        assert res.state.r.tobytes() == rec.r[k + 1].tobytes()
        assert res.state.sigma.tobytes() == rec.sigma[k + 1].tobytes()


def test_run_conserves_vehicles(heuristic_run):
    sc, rec = heuristic_run
    inflow = sc.lambda0.sum() + sc.lam.sum()
    stored = rec.x[-1].sum() + rec.r[-1].sum() - rec.x[0].sum() - rec.r[0].sum()
    assert abs(inflow - rec.total_exits - stored) <= 1e-9 * inflow
    for k in range(rec.steps):
        step_in = sc.lambda0[k] + sc.lam[k].sum()
        change = rec.x[k + 1].sum() + rec.r[k + 1].sum() - rec.x[k].sum() - rec.r[k].sum()
        assert change == pytest.approx(step_in - rec.exits[k], abs=1e-9 * max(1, step_in))


def test_zero_scenario_stays_empty():
    doc = _doc("two_cell")
    doc.update(lambda0=0, x0=[0, 0], r0=[0, 0], K=10)
    doc["lambda"] = [0, 0]
    doc.pop("sigma0")
    sc = io.parse_scenario(doc)
    rec = run_closed_loop(sc, ControllerConfig("none"))
    assert rec.total_exits == 0
    assert not rec.x.any() and not rec.r.any()


def test_summary_fields(heuristic_run):
    _, rec = heuristic_run
    s = io.summary(rec)
    assert s["steps"] == 81 and s["controller"] == "heuristic"
    assert s["cumulative_exits"] == pytest.approx(rec.total_exits)
