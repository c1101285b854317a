"""Two-cell throughput gap and sufficient rollout horizon.

All exit quantities are vehicles per timestep; densities are vehicles
per cell length. Cell indices in docstrings are 1-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import CellParams, Network

DEFAULT_STEP_CAP = 10_000


class AnalysisError(ValueError):
    """Preconditions of a horizon or gap computation do not hold."""


@dataclass(frozen=True)
class TwoCellAnalysis:
    x_c: float
    x1_target: float
    E_convex: float
    E_hyst: float
    delta_E: float
    fill_ok: bool
    drain_ok: bool
    gap_ok: bool
    fill_lhs: float = 0.0
    fill_rhs: float = 0.0
    drain_lhs: float = 0.0
    drain_rhs: float = 0.0
    applicable: bool = True     # cell 2 has no onramp, so lambda_2 = r_2 = 0

    @property
    def decongestion_pays(self) -> bool:
        return self.applicable and self.fill_ok and self.drain_ok and self.gap_ok


@dataclass(frozen=True)
class HorizonBudget:
    T_D: int
    T_R: int
    T_S: int
    E_decon_avg: float
    E_recov_avg: float

    @property
    def total(self) -> int:
        return self.T_D + self.T_R + self.T_S


def critical_density(cell2: CellParams) -> float:
    """Density where supply equals demand: ``w x_jam / (v + w)``."""
    return cell2.w * cell2.x_jam / (cell2.v + cell2.w)


def _two_cells(net: Network):
    if net.n != 2:
        raise AnalysisError(f"two-cell network required, got {net.n} cells")
    return net.cells[0], net.cells[1]


def check_prop1(net: Network, lambda0_avg: float) -> TwoCellAnalysis:
    c1, c2 = _two_cells(net)
    h, b1 = net.h, c1.beta
    x_c = critical_density(c2)
    x1_target = c2.v * c2.x_hi / (b1 * c1.v)
    E_convex = h * c2.v * x_c / b1
    E_hyst = h * c2.v * c2.x_hi / b1
    fill_lhs = lambda0_avg + net.ramps[0].c
    fill_rhs = h * c1.v * x1_target
    drain_lhs = b1 * lambda0_avg
    drain_rhs = h * c2.v * c2.x_lo
    return TwoCellAnalysis(
        x_c=x_c, x1_target=x1_target, E_convex=E_convex, E_hyst=E_hyst,
        delta_E=E_hyst - E_convex,
        fill_ok=fill_lhs > fill_rhs, drain_ok=drain_lhs < drain_rhs,
        gap_ok=x_c < c2.x_hi,
        fill_lhs=fill_lhs, fill_rhs=fill_rhs,
        drain_lhs=drain_lhs, drain_rhs=drain_rhs,
        applicable=not net.ramps[1].present)


def _ceil(value: float) -> int:
    # absorb float noise such as 2.0000000000000004
    return math.ceil(round(value, 9))


def horizon_T_D(net: Network, x1_0: float, lambda0_avg: float) -> int:
    """Steps to push cell 2 from ``x_c`` below ``x_lo`` with ramps closed."""
    c1, c2 = _two_cells(net)
    rate = net.h * c2.v * c2.x_lo - c1.beta * lambda0_avg
    if rate <= 0:
        raise AnalysisError(
            f"non-drainable: drain rate {rate:g} <= 0 (beta_1 * lambda0 too large)")
    backlog = c1.beta * x1_0 + (critical_density(c2) - c2.x_lo)
    return max(0, _ceil(backlog / rate))


def _inflow_at(series, n: int) -> float:
    if np.ndim(series) == 0:
        return float(series)
    seq = list(series)
    if not seq:
        return 0.0
    return float(seq[min(n, len(seq) - 1)])


def recovery_trace(net: Network, lambda0_series, x1_start: float = 0.0,
                   x2_start: float | None = None,
                   cap: int = DEFAULT_STEP_CAP,
                   d1: Callable[[float], float] | None = None,
                   d2: Callable[[float], float] | None = None) -> list[float]:
    """Cell-2 densities under free flow with the ramp at full release,
    stopping at the first one that reaches ``x_hi``."""
    c1, c2 = _two_cells(net)
    d1 = d1 or (lambda x: c1.v * x)
    d2 = d2 or (lambda x: c2.v * x)
    h, c = net.h, net.ramps[0].c
    x1 = x1_start
    x2 = c2.x_lo if x2_start is None else x2_start
    trace = [x2]
    for n in range(cap):
        if x2 >= c2.x_hi:
            return trace
        x1, x2 = (x1 + c + _inflow_at(lambda0_series, n) - h * d1(x1),
                  x2 + h * (c1.beta * d1(x1) - d2(x2)))
        trace.append(x2)
    if x2 >= c2.x_hi:
        return trace
    raise AnalysisError(
        f"unreachable: x_2 stays below x_hi={c2.x_hi:g} after {cap} steps "
        "(ramp capacity too small)")


def horizon_T_R(net: Network, lambda0_series, x1_start: float = 0.0,
                x2_start: float | None = None,
                cap: int = DEFAULT_STEP_CAP) -> int:
    """First step at which the recovery recursion lifts cell 2 to ``x_hi``."""
    return len(recovery_trace(net, lambda0_series, x1_start, x2_start, cap)) - 1


def average_exits(net: Network, x1_0: float) -> tuple[float, float]:
    """Mean per-step exits during decongestion and during recovery."""
    c1, c2 = _two_cells(net)
    h, b1 = net.h, c1.beta
    x_c = critical_density(c2)
    decon = h * ((1 - b1) * c1.v * x1_0 / 2 + c2.v * (x_c - c2.x_lo) / 2)
    recov = h * ((1 - b1) * c1.v * 0.5 * c2.v / (b1 * c1.v) * c2.x_hi
                 + c2.v * (c2.x_hi - c2.x_lo) / 2)
    return decon, recov


def horizon_T_S(T_D: int, T_R: int, E_convex: float, E_hyst: float,
                E_decon_avg: float, E_recov_avg: float) -> int:
    gain = E_hyst - E_convex
    if gain <= 0:
        raise AnalysisError("no throughput gap: E_hyst <= E_convex")
    deficit = (T_D + T_R) * E_convex - (T_D * E_decon_avg + T_R * E_recov_avg)
    if deficit <= 0:
        return 0
    return _ceil(deficit / gain)


def horizon_budget(net: Network, lambda0_series, x1_0: float = 0.0,
                   window: int | None = None,
                   cap: int = DEFAULT_STEP_CAP) -> HorizonBudget:
    """Decongestion, recovery and steady-state step counts.

    ``lambda0_series`` may be a scalar. Its mean over the first ``window``
    entries (all of them by default) stands in for the average inflow.
    """
    lam_avg = mean_inflow(lambda0_series, window)
    info = check_prop1(net, lam_avg)
    T_D = horizon_T_D(net, x1_0, lam_avg)
    T_R = horizon_T_R(net, lambda0_series, 0.0, None, cap)
    decon, recov = average_exits(net, x1_0)
    T_S = horizon_T_S(T_D, T_R, info.E_convex, info.E_hyst, decon, recov)
    return HorizonBudget(T_D, T_R, T_S, decon, recov)


def mean_inflow(series, window: int | None = None) -> float:
    if np.ndim(series) == 0:
        return float(series)
    arr = np.asarray(series, dtype=float)
    if window is not None:
        arr = arr[:window]
    if arr.size == 0:
        raise AnalysisError("empty inflow series")
    return float(arr.mean())


# -- arbitrary monotone demand curves -------------------------------------------

def horizon_T_D_general(d1: Callable[[float], float],
                        d2: Callable[[float], float], net: Network,
                        lambda0_avg: float) -> int:
    """Decongestion bound for general demands, starting from ``x_1 = x_c``.

    ``d1`` is accepted for symmetry with :func:`horizon_T_R_general`; the
    bound only needs the drain rate of cell 2.
    """
    c1, c2 = _two_cells(net)
    x_c = critical_density(c2)
    rate = net.h * d2(c2.x_lo) - lambda0_avg
    if rate <= 0:
        raise AnalysisError(f"non-drainable: drain rate {rate:g} <= 0")
    return max(0, _ceil((c1.beta * x_c + (x_c - c2.x_lo)) / rate))


def horizon_T_R_general(d1: Callable[[float], float],
                        d2: Callable[[float], float], net: Network,
                        lambda0_series: float | Sequence[float],
                        x1_start: float = 0.0, x2_start: float | None = None,
                        cap: int = DEFAULT_STEP_CAP) -> int:
    """Smallest ``k`` whose accumulated net inflow into cell 2 closes the
    gap ``x_hi - x_2(start)``."""
    c1, c2 = _two_cells(net)
    h, c = net.h, net.ramps[0].c
    x1 = x1_start
    x2 = c2.x_lo if x2_start is None else x2_start
    need = c2.x_hi - x2
    gained = 0.0
    for k in range(cap + 1):
        if gained >= need - 1e-12:
            return k
        step = h * (c1.beta * d1(x1) - d2(x2))
        gained += step
        x1, x2 = x1 + c + _inflow_at(lambda0_series, k) - h * d1(x1), x2 + step
    raise AnalysisError(
        f"unreachable: x_2 stays below x_hi={c2.x_hi:g} after {cap} steps")
