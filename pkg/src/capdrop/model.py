"""Cell transmission model with capacity-drop hysteresis.

Mainline flows (supply, demand, outflow) are in veh/hour and enter the
density update scaled by the sampling interval ``h``. Ramp releases,
ramp inflows and the upstream inflow are in veh/timestep and enter
unscaled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np


class ModelError(ValueError):
    """Raised for malformed parameters or states."""


@dataclass(frozen=True)
class CellParams:
    v: float        # free-flow speed
    w: float        # shock-wave speed
    x_jam: float    # jam density
    x_hi: float     # congestion-onset density
    x_lo: float     # decongestion density
    beta: float     # fraction of outflow continuing on the mainline


@dataclass(frozen=True)
class RampParams:
    c: float = 0.0          # max release per timestep
    present: bool = False


@dataclass(frozen=True)
class Network:
    cells: tuple[CellParams, ...]
    ramps: tuple[RampParams, ...]
    h: float

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(self, "ramps", tuple(self.ramps))
        if len(self.cells) != len(self.ramps):
            raise ModelError(
                f"{len(self.cells)} cells but {len(self.ramps)} ramps")

    @property
    def n(self) -> int:
        return len(self.cells)

    @cached_property
    def v(self) -> np.ndarray:
        return np.array([c.v for c in self.cells], dtype=float)

    @cached_property
    def w(self) -> np.ndarray:
        return np.array([c.w for c in self.cells], dtype=float)

    @cached_property
    def x_jam(self) -> np.ndarray:
        return np.array([c.x_jam for c in self.cells], dtype=float)

    @cached_property
    def x_hi(self) -> np.ndarray:
        return np.array([c.x_hi for c in self.cells], dtype=float)

    @cached_property
    def x_lo(self) -> np.ndarray:
        return np.array([c.x_lo for c in self.cells], dtype=float)

    @cached_property
    def beta(self) -> np.ndarray:
        return np.array([c.beta for c in self.cells], dtype=float)

    @cached_property
    def c(self) -> np.ndarray:
        return np.array([r.c if r.present else 0.0 for r in self.ramps],
                        dtype=float)

    @cached_property
    def ramp_cells(self) -> tuple[int, ...]:
        """0-based indices of cells with an onramp, in order."""
        return tuple(i for i, r in enumerate(self.ramps) if r.present)


@dataclass(frozen=True)
class NetworkState:
    x: np.ndarray
    r: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        for name in ("x", "r"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        sig = np.array(self.sigma, dtype=np.int8)
        sig.setflags(write=False)
        object.__setattr__(self, "sigma", sig)
        if not (self.x.shape == self.r.shape == self.sigma.shape):
            raise ModelError("x, r and sigma must have equal length")

    @property
    def total(self) -> float:
        return float(self.x.sum() + self.r.sum())


@dataclass(frozen=True)
class Scenario:
    network: Network
    K: int
    lambda0: np.ndarray          # shape (K,)
    lam: np.ndarray              # shape (K, N), ramp inflows per cell
    x0: np.ndarray
    r0: np.ndarray
    sigma0: np.ndarray | None = None
    name: str = ""
    controllers: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.network.n
        lam0 = np.array(self.lambda0, dtype=float).reshape(-1)
        lam = np.array(self.lam, dtype=float).reshape(-1, n)
        if self.K < 1:
            raise ModelError("K must be >= 1")
        if lam0.shape != (self.K,) or lam.shape != (self.K, n):
            raise ModelError("inflow series must have length K")
        if (lam0 < 0).any() or (lam < 0).any():
            raise ModelError("inflows must be nonnegative")
        x0 = np.array(self.x0, dtype=float)
        r0 = np.array(self.r0, dtype=float)
        if x0.shape != (n,) or r0.shape != (n,):
            raise ModelError("x0 and r0 must have one entry per cell")
        if (x0 < 0).any() or (r0 < 0).any():
            raise ModelError("initial densities and queues must be >= 0")
        for name, arr in (("lambda0", lam0), ("lam", lam), ("x0", x0),
                          ("r0", r0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def initial_state(self) -> NetworkState:
        if self.sigma0 is not None:
            return NetworkState(self.x0, self.r0, self.sigma0)
        return initial_state(self.network, self.x0, self.r0)


def supply(cell: CellParams, x: float) -> float:
    return -cell.w * (x - cell.x_jam)


def demand(cell: CellParams, x: float) -> float:
    return cell.v * x


def update_congestion(cell: CellParams, x: float,
                      sigma_prev: int | None) -> int:
    """Hysteretic congestion flag. ``sigma_prev=None`` means no history."""
    if x >= cell.x_hi:
        return 1
    if x <= cell.x_lo:
        return 0
    return 0 if sigma_prev is None else int(sigma_prev)


def outflow(cell: CellParams, x: float, sigma_next: int | None = None,
            supply_next: float | None = None) -> float:
    """Outflow of a cell given its downstream neighbour.

    ``sigma_next=None`` marks the last cell, which drains into an
    uncongested sink.
    """
    d = demand(cell, x)
    if sigma_next is None or not sigma_next:
        return d
    if cell.beta == 0.0:
        return d
    return max(0.0, min(d, supply_next / cell.beta))


def initial_state(net: Network, x0: Sequence[float],
                  r0: Sequence[float] | None = None) -> NetworkState:
    x0 = np.asarray(x0, dtype=float)
    r0 = np.zeros(net.n) if r0 is None else np.asarray(r0, dtype=float)
    sigma = [update_congestion(c, xi, None) for c, xi in zip(net.cells, x0)]
    return NetworkState(x0, r0, sigma)


def congestion_flags(net: Network, x: np.ndarray,
                     sigma_prev: np.ndarray) -> np.ndarray:
    return np.where(x >= net.x_hi, 1,
                    np.where(x <= net.x_lo, 0, sigma_prev)).astype(np.int8)


def flows(net: Network, x: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Outflows of every cell (veh/hour) given densities and flags."""
    d = net.v * x
    phi = d.copy()
    if net.n > 1:
        s_next = -net.w[1:] * (x[1:] - net.x_jam[1:])
        beta = net.beta[:-1]
        with np.errstate(divide="ignore"):
            cap = np.where(beta > 0, s_next / np.where(beta > 0, beta, 1.0),
                           np.inf)
        limited = np.maximum(0.0, np.minimum(d[:-1], cap))
        phi[:-1] = np.where(sigma[1:] == 1, limited, d[:-1])
    return phi


def exit_flow(net: Network, phis: np.ndarray) -> float:
    """Vehicles leaving the network during one step (veh/timestep)."""
    phis = np.asarray(phis, dtype=float)
    off = (1.0 - net.beta[:-1]) * phis[:-1]
    return float(net.h * (off.sum() + phis[-1]))


def releases(net: Network, r: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum(r, u * net.c)


def expand_controls(net: Network, u) -> np.ndarray:
    """Per-cell metering vector from per-ramp rates (or per-cell)."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape == (net.n,):
        return u
    if u.shape != (len(net.ramp_cells),):
        raise ModelError(
            f"expected {len(net.ramp_cells)} metering rates, got {u.shape[0]}")
    full = np.zeros(net.n)
    full[list(net.ramp_cells)] = u
    return full


@dataclass(frozen=True)
class StepResult:
    state: NetworkState     # state at k+1
    sigma: np.ndarray       # flags used at k
    phi: np.ndarray         # outflows at k
    f: np.ndarray           # ramp releases at k
    exits: float            # veh leaving during step k


def step_detail(net: Network, state: NetworkState, u, lambda0: float,
                lam) -> StepResult:
    n = net.n
    u = expand_controls(net, u)
    if ((u < 0) | (u > 1)).any() or np.isnan(u).any():
        raise ModelError("metering rates must lie in [0, 1]")
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (n,))
    x, r = state.x, state.r
    sigma = congestion_flags(net, x, state.sigma)
    phi = flows(net, x, sigma)
    f = releases(net, r, u)
    inflow = np.zeros(n)
    inflow[1:] = net.beta[:-1] * phi[:-1]
    x_new = x + net.h * (inflow - phi) + f
    x_new[0] += lambda0
    r_new = r + lam - f
    if not (np.isfinite(x_new).all() and np.isfinite(r_new).all()):
        raise ModelError("non-finite state produced by step")
    if (x_new < 0).any() or (r_new < 0).any() or (phi < 0).any():
        raise ModelError(
            "negative density, queue or flow; check CFL and parameter bounds")
    sigma_new = congestion_flags(net, x_new, sigma)
    return StepResult(NetworkState(x_new, r_new, sigma_new), sigma, phi, f,
                      exit_flow(net, phi))


def step(net: Network, state: NetworkState, u, lambda0: float,
         lam) -> NetworkState:
    return step_detail(net, state, u, lambda0, lam).state


def simulate(scenario: Scenario, controls: np.ndarray,
             state: NetworkState | None = None) -> list[StepResult]:
    """Open-loop run; ``controls`` has one row per timestep."""
    net = scenario.network
    state = scenario.initial_state() if state is None else state
    out = []
    for k, u in enumerate(np.atleast_2d(controls)):
        res = step_detail(net, state, u, scenario.lambda0[k], scenario.lam[k])
        out.append(res)
        state = res.state
    return out


def validate(net: Network) -> list[str]:
    """List every violated network invariant; empty means valid."""
    errors = []
    if net.n < 1:
        errors.append("network must have at least one cell")
    if not (net.h > 0 and math.isfinite(net.h)):
        errors.append(f"h must be positive, got {net.h}")
    for i, cell in enumerate(net.cells, start=1):
        tag = f"cell {i}"
        for name in ("v", "w", "x_jam"):
            val = getattr(cell, name)
            if not val > 0:
                errors.append(f"{tag}: {name} must be > 0, got {val}")
        if not cell.x_lo > 0:
            errors.append(f"{tag}: x_lo must be > 0, got {cell.x_lo}")
        if cell.x_lo > cell.x_hi:
            errors.append(
                f"{tag}: x_lo={cell.x_lo} exceeds x_hi={cell.x_hi}")
        if not cell.x_hi < cell.x_jam:
            errors.append(
                f"{tag}: x_hi={cell.x_hi} must be below x_jam={cell.x_jam}")
        if not 0 <= cell.beta <= 1:
            errors.append(f"{tag}: beta={cell.beta} outside [0, 1]")
        if net.h * cell.v > 1:
            errors.append(f"{tag}: CFL violated, h*v = {net.h * cell.v:g} > 1")
        if net.h * cell.w > 1:
            errors.append(f"{tag}: CFL violated, h*w = {net.h * cell.w:g} > 1")
    for i, ramp in enumerate(net.ramps, start=1):
        if ramp.c < 0:
            errors.append(f"ramp {i}: c must be >= 0, got {ramp.c}")
        if not ramp.present and ramp.c != 0:
            errors.append(f"ramp {i}: c must be 0 when no ramp is present")
    return errors
