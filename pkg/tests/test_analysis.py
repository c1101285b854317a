import numpy as np
import pytest

from capdrop import analysis
from capdrop.analysis import AnalysisError
from capdrop.model import CellParams, Network, RampParams

from conftest import table_cell


def _two_cell(c1=60.0, **cell2):
    return Network((table_cell(), table_cell(beta=1.0, **cell2)),
                   (RampParams(c1, True), RampParams()), 1 / 120)


@pytest.mark.parametrize("kw, expected", [
    (dict(), 80.0),
    (dict(w=45.0, v=45.0, x_jam=250.0), 125.0),
    (dict(x_jam=160.0), 40.0),
])
def test_critical_density(kw, expected):
    assert analysis.critical_density(table_cell(**kw)) == pytest.approx(expected)


def test_conditions_reference_pair():
    a = analysis.check_prop1(_two_cell(), 30.0)
    assert a.x1_target == pytest.approx(122.2222222, abs=1e-6)
    assert a.fill_lhs == pytest.approx(90) and a.fill_rhs == pytest.approx(61.1111111)
    assert a.drain_lhs == pytest.approx(27) and a.drain_rhs == pytest.approx(35)
    assert a.fill_ok and a.drain_ok and a.gap_ok
    assert a.E_convex == pytest.approx(44.4444444, abs=1e-6)
    assert a.E_hyst == pytest.approx(61.1111111, abs=1e-6)
    assert a.delta_E == pytest.approx(16.6666667, abs=1e-6)
    assert a.decongestion_pays


def test_conditions_heavy_inflow_cannot_drain():
    a = analysis.check_prop1(_two_cell(), 40.0)
    assert a.drain_lhs == pytest.approx(36)
    assert not a.drain_ok


def test_conditions_threshold_at_critical_density():
    a = analysis.check_prop1(_two_cell(x_hi=80.0), 30.0)
    assert not a.gap_ok
    assert a.delta_E == pytest.approx(0.0, abs=1e-12)


def test_conditions_not_applicable_with_second_ramp():
    net = Network((table_cell(), table_cell(beta=1.0)),
                  (RampParams(60, True), RampParams(60, True)), 1 / 120)
    a = analysis.check_prop1(net, 30.0)
    assert a.gap_ok and not a.applicable
    assert not a.decongestion_pays


def test_conditions_needs_two_cells():
    net = Network((table_cell(),) * 3, (RampParams(),) * 3, 1 / 120)
    with pytest.raises(AnalysisError):
        analysis.check_prop1(net, 30.0)


def test_delta_e_sign_tracks_threshold_gap():
    rng = np.random.default_rng(2)
    for _ in range(200):
        x_hi = rng.uniform(40, 160)
        a = analysis.check_prop1(_two_cell(x_hi=x_hi, x_lo=x_hi - 10), 10.0)
        assert (a.delta_E > 0) == (x_hi > a.x_c)
        assert a.gap_ok == (a.x_c < x_hi)


# -- decongestion ---------------------------------------------------------------

def test_T_D_reference():
    assert analysis.horizon_T_D(_two_cell(), 0.0, 30.0) == 2


def test_T_D_zero_when_nothing_to_drain():
    assert analysis.horizon_T_D(_two_cell(x_lo=80.0, x_hi=110.0), 0.0, 30.0) == 0


def test_T_D_non_drainable():
    with pytest.raises(AnalysisError, match="non-drainable"):
        analysis.horizon_T_D(_two_cell(), 0.0, 40.0)


def test_T_D_monotone():
    net = _two_cell()
    by_x1 = [analysis.horizon_T_D(net, x1, 30.0) for x1 in np.linspace(0, 300, 61)]
    assert all(a <= b for a, b in zip(by_x1, by_x1[1:]))
    by_lam = [analysis.horizon_T_D(net, 50.0, lam) for lam in np.linspace(0, 38.8, 60)]
    assert all(a <= b for a, b in zip(by_lam, by_lam[1:]))


# -- recovery -------------------------------------------------------------------

def test_T_R_reference_trace():
    net = _two_cell()
    trace = analysis.recovery_trace(net, 30.0)
    assert trace == pytest.approx([70, 35, 58, 89.75, 115.75], abs=1e-9)
    assert analysis.horizon_T_R(net, 30.0) == 4


def test_T_R_zero_at_threshold():
    assert analysis.horizon_T_R(_two_cell(), 30.0, x2_start=110.0) == 0


def test_T_R_unreachable():
    with pytest.raises(AnalysisError, match="unreachable"):
        analysis.horizon_T_R(_two_cell(c1=0.0), 0.0, cap=500)


def test_T_R_accepts_series():
    net = _two_cell()
    assert analysis.horizon_T_R(net, [30.0] * 3) == analysis.horizon_T_R(net, 30.0)


# -- steady state and budget ----------------------------------------------------

def test_average_exits_reference():
    decon, recov = analysis.average_exits(_two_cell(), 0.0)
    assert decon == pytest.approx(2.5)
    assert recov == pytest.approx(13.0555556, abs=1e-6)


def test_T_S_reference():
    assert analysis.horizon_T_S(2, 4, 400 / 9, 550 / 9, 2.5, 13.0555556) == 13


def test_T_S_floors_at_zero():
    assert analysis.horizon_T_S(2, 4, 10.0, 20.0, 30.0, 30.0) == 0


def test_T_S_without_gap():
    with pytest.raises(AnalysisError):
        analysis.horizon_T_S(2, 4, 44.0, 44.0, 2.5, 13.0)


def test_budget_reference():
    b = analysis.horizon_budget(_two_cell(), 30.0)
    assert (b.T_D, b.T_R, b.T_S, b.total) == (2, 4, 13, 19)


def test_mean_inflow_window():
    assert analysis.mean_inflow([10, 20, 60], window=2) == 15
    assert analysis.mean_inflow(7.5) == 7.5
    with pytest.raises(AnalysisError):
        analysis.mean_inflow([])


# -- general demand curves ------------------------------------------------------

def _linear(v):
    return lambda x: v * x


def test_T_D_general_affine():
    net = _two_cell()
    assert analysis.horizon_T_D_general(_linear(60), _linear(60), net, 30.0) == 17


def test_T_D_general_nothing_to_drain():
    net = Network((table_cell(beta=0.0), table_cell(beta=1.0, x_lo=80.0)),
                  (RampParams(60, True), RampParams()), 1 / 120)
    assert analysis.horizon_T_D_general(_linear(60), _linear(60), net, 30.0) == 0


def test_T_D_general_zero_denominator():
    with pytest.raises(AnalysisError):
        analysis.horizon_T_D_general(_linear(60), _linear(60), _two_cell(), 35.0)


def test_T_R_general_matches_specialized():
    rng = np.random.default_rng(12)
    for _ in range(100):
        net = _two_cell(c1=rng.uniform(30, 90), v=rng.uniform(40, 80))
        lam = list(rng.uniform(0, 40, 30))
        x1 = rng.uniform(0, 100)
        x2 = rng.uniform(0, 110)
        v1, v2 = net.v
        results = []
        for fn, args in ((analysis.horizon_T_R_general, (_linear(v1), _linear(v2))),
                         (analysis.horizon_T_R, ())):
            try:
                results.append(fn(*args, net, lam, x1_start=x1, x2_start=x2, cap=400))
            except AnalysisError:
                results.append(None)
        assert results[0] == results[1]


def test_T_R_general_concave_demand_is_slower():
    # a saturating cell-1 demand delivers less, so recovery cannot be faster
    net = _two_cell()
    sat = lambda x: min(60 * x, 7500.0)
    fast = analysis.horizon_T_R_general(_linear(60), _linear(60), net, 30.0)
    slow = analysis.horizon_T_R_general(sat, _linear(60), net, 30.0)
    assert slow >= fast


def test_T_R_general_closed_threshold_band():
    net = Network((table_cell(), table_cell(beta=1.0, x_hi=90.0, x_lo=90.0)),
                  (RampParams(60, True), RampParams()), 1 / 120)
    assert analysis.horizon_T_R_general(_linear(60), _linear(60), net, 30.0) == 0


def test_T_R_general_unreachable():
    huge = lambda x: 1e6
    with pytest.raises(AnalysisError):
        analysis.horizon_T_R_general(_linear(60), huge, _two_cell(), 0.0,
                                     cap=200)


# -- closed-loop check of the budget --------------------------------------------

def _scaled_family(rng):
    """Reference two-cell network with densities and speeds rescaled.

    Ratios between the density parameters (and between v and w) are kept,
    so the relaxed steady state stays inside the hysteresis band."""
    s, t = rng.uniform(0.8, 1.25), rng.uniform(0.8, 1.25)
    cell = dict(v=60 * t, w=20 * t, x_jam=320 * s, x_hi=110 * s, x_lo=70 * s)
    net = Network((CellParams(beta=0.9, **cell), CellParams(beta=1.0, **cell)),
                  (RampParams(60 * s * t * rng.uniform(0.8, 1.2), True), RampParams()),
                  1 / 120)
    drain_max = net.h * cell["v"] * cell["x_lo"] / 0.9
    return net, rng.uniform(0.6, 0.95) * drain_max


@pytest.mark.slow
def test_budget_horizon_beats_relaxed_controller():
    from capdrop.controllers import ControllerConfig
    from capdrop.harness import run_closed_loop
    from capdrop.model import Scenario

    rng = np.random.default_rng(31)
    checked = 0
    while checked < 4:
        net, lam0 = _scaled_family(rng)
        info = analysis.check_prop1(net, lam0)
        if not info.decongestion_pays:
            continue
        T = analysis.horizon_budget(net, lam0).total
        if T > 22:
            continue
        K = 2 * T
        sc = Scenario(net, K, np.full(K, lam0), np.tile([80.0, 0.0], (K, 1)),
                      [0.0, info.x_c], [0.0, 0.0], np.array([0, 1]))
        exact = run_closed_loop(sc, ControllerConfig("ehmpc", T=T)).total_exits
        relaxed = run_closed_loop(sc, ControllerConfig("rampc", T=T)).total_exits
        assert exact >= relaxed - 1e-9, (T, exact, relaxed)
        checked += 1
