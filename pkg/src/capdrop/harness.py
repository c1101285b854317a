"""Closed-loop receding-horizon runs against the exact hysteretic plant."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import model
from .controllers import (ControllerConfig, ControllerError, RolloutProblem,
                          plan)
from .model import NetworkState, Scenario

log = logging.getLogger(__name__)


@dataclass
class SolveRow:
    step: int
    wall_time: float
    nodes: int
    objective: float
    status: str
    warning: bool = False


@dataclass
class RunRecord:
    scenario: str
    controller: str
    x: np.ndarray           # (K+1, N), row K is the final state
    r: np.ndarray
    sigma: np.ndarray
    phi: np.ndarray         # (K, N)
    f: np.ndarray           # (K, N)
    u: np.ndarray           # (K, n_ramps)
    exits: np.ndarray       # (K,)
    solves: list[SolveRow] = field(default_factory=list)
    aborted: str | None = None

    @property
    def steps(self) -> int:
        return len(self.exits)

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.exits)

    @property
    def total_exits(self) -> float:
        return float(self.exits.sum())

    @property
    def solve_time(self) -> float:
        return float(sum(s.wall_time for s in self.solves))

    def final_state(self) -> NetworkState:
        n = self.steps
        return NetworkState(self.x[n], self.r[n], self.sigma[n])


def scenario_config(scenario: Scenario, kind: str, **overrides) -> ControllerConfig:
    """Controller settings from the scenario's ``controllers`` section.

    Keys ``horizon``, ``memory`` and ``time_limit`` are read; explicit
    keyword arguments that are not None win.
    """
    canonical = ControllerConfig(kind).kind
    defaults = scenario.controllers.get(canonical, scenario.controllers.get(kind, {}))
    settings = {"T": defaults.get("horizon", 1), "memory": defaults.get("memory", 1),
                "time_limit": defaults.get("time_limit")}
    settings.update({k: v for k, v in overrides.items() if v is not None})
    return ControllerConfig(kind=canonical, **settings)


def run_closed_loop(scenario: Scenario, cfg: ControllerConfig,
                    K: int | None = None) -> RunRecord:
    """Plan, apply ``cfg.memory`` actions to the plant, repeat.

    A solver failure stops the run; the partial record is attached to
    the raised :class:`ControllerError` as ``exc.record``.
    """
    net = scenario.network
    K = scenario.K if K is None else min(K, scenario.K)
    errors = cfg.validate(net)
    if errors:
        raise ValueError("; ".join(errors))
    state = scenario.initial_state()
    xs, rs, sigmas = [state.x], [state.r], [state.sigma]
    phis, fs, us, exits, solves = [], [], [], [], []

    def record(aborted=None):
        n = len(exits)
        shape = (n, net.n)
        return RunRecord(
            scenario.name, cfg.kind, np.array(xs), np.array(rs),
            np.array(sigmas),
            np.array(phis).reshape(shape), np.array(fs).reshape(shape),
            np.array(us).reshape(n, len(net.ramp_cells)), np.array(exits),
            solves, aborted)

    k = 0
    while k < K:
        horizon = cfg.T
        prob = RolloutProblem.from_scenario(scenario, state, k, horizon)
        t0 = time.perf_counter()
        try:
            ctrl, report = plan(cfg, prob)
        except ControllerError as exc:
            exc.record = record(str(exc))
            raise
        solves.append(SolveRow(k, time.perf_counter() - t0, report.nodes,
                               report.objective, report.status,
                               report.warning))
        log.debug("step %d: %s %s in %.3fs", k, cfg.kind, report.status,
                  solves[-1].wall_time)
        for u in ctrl.u:
            if k >= K:
                break
            res = model.step_detail(net, state, u, scenario.lambda0[k],
                                    scenario.lam[k])
            phis.append(res.phi)
            fs.append(res.f)
            us.append(u)
            exits.append(res.exits)
            state = res.state
            xs.append(state.x)
            rs.append(state.r)
            sigmas.append(state.sigma)
            k += 1
    return record()


def replay(scenario: Scenario, record: RunRecord) -> list[model.StepResult]:
    """Re-apply the recorded metering rates open loop."""
    return model.simulate(scenario, record.u)
