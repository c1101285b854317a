"""Ramp-metering controllers over a finite rollout horizon.

Both optimisation-based controllers take ramp releases ``f = min(r, u c)``
as decision variables (``0 <= f <= c``, ``f <= r``) and recover the
metering rate afterwards. Decision variables are densities and queues at
steps ``1..T`` and flows and releases at steps ``0..T-1``; the objective
is the vehicle count summed over steps ``1..T``.

The hysteretic formulation uses, per cell and step, binaries

* ``a``: ``a = 1 => x >= x_hi``, ``a = 0 => x <= x_hi - delta_c``
* ``b``: ``b = 1 => x <= x_lo - delta_c``, ``b = 0 => x >= x_lo``
* ``sigma``: set to ``a`` when ``a + b = 1``, held otherwise
* ``mu``: which argument of ``min(d, s / beta)`` is active
* ``nu``: downstream supply exhausted (density at or past jam)

Binaries whose value is forced by propagated density bounds are replaced
by constants.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import model
from .lp import LinearProgram, LpError, solve_lp
from .milp import OPTIMAL, Affine, ModelBuilder, solve_milp
from .model import Network, NetworkState, Scenario

KINDS = ("none", "rampc", "ehmpc", "heuristic")
_ALIASES = {"hc": "heuristic"}


class ControllerError(RuntimeError):
    """The controller could not produce a plan (solver failure)."""


@dataclass(frozen=True)
class RolloutProblem:
    network: Network
    state: NetworkState
    lambda0: np.ndarray     # (T,)
    lam: np.ndarray         # (T, N)
    T: int

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("rollout horizon must be >= 1")
        lam0 = _pad(np.asarray(self.lambda0, dtype=float).reshape(-1), self.T)
        lam = np.asarray(self.lam, dtype=float).reshape(-1, self.network.n)
        object.__setattr__(self, "lambda0", lam0)
        object.__setattr__(self, "lam", _pad(lam, self.T))

    @classmethod
    def from_scenario(cls, scenario: Scenario, state: NetworkState, k: int,
                      T: int) -> "RolloutProblem":
        return cls(scenario.network, state, scenario.lambda0[k:k + T],
                   scenario.lam[k:k + T], T)


def _pad(series: np.ndarray, T: int) -> np.ndarray:
    """Truncate or extend with the last value to length ``T``."""
    if len(series) == 0:
        raise ValueError("empty inflow series")
    if len(series) >= T:
        return series[:T].copy()
    reps = [series[-1:]] * (T - len(series))
    return np.concatenate([series] + reps)


@dataclass(frozen=True)
class ControllerConfig:
    kind: str = "none"
    T: int = 1
    memory: int = 1
    delta_c: float = 1e-3
    node_limit: int = 200_000
    time_limit: float | None = None
    engine: str = "highs"       # MILP engine: "highs" or "bnb"
    lp_method: str = "highs"    # LP backend: "highs" or "simplex"
    margin: float = 2.0         # heuristic: distance kept below x_hi
    tiebreak: bool = True       # rampc: smallest-queue point of the optimal face

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown controller kind {self.kind!r}")

    def validate(self, net: Network) -> list[str]:
        errors = []
        if self.T < 1:
            errors.append(f"horizon must be >= 1, got {self.T}")
        if not 1 <= self.memory <= max(self.T, 1):
            errors.append(f"memory must lie in [1, T={self.T}], got {self.memory}")
        band = float(np.min(net.x_hi - net.x_lo))
        if self.kind == "ehmpc" and not 0 < self.delta_c < band:
            errors.append(
                f"delta_c must lie in (0, {band:g}), got {self.delta_c}")
        if self.kind == "heuristic" and self.margin < 0:
            errors.append("heuristic margin must be >= 0")
        return errors


@dataclass(frozen=True)
class ControlPlan:
    u: np.ndarray   # (steps, n_ramps)

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.u, dtype=float))
        if ((u < 0) | (u > 1)).any():
            raise ValueError("metering rates must lie in [0, 1]")
        object.__setattr__(self, "u", u)

    def __len__(self):
        return self.u.shape[0]


@dataclass
class SolveReport:
    kind: str
    status: str = OPTIMAL
    objective: float = float("nan")
    best_bound: float = float("nan")
    nodes: int = 0
    wall_time: float = 0.0
    warning: bool = False
    message: str = ""
    planned: dict = field(default_factory=dict)


# -- bounds -----------------------------------------------------------------

def density_bounds(prob: RolloutProblem, f_lo=None, f_hi=None):
    """Interval bounds ``(L, U)`` on densities for steps ``0..T``.

    Step 1 uses the exact step-0 flows; later steps propagate intervals,
    and the upper bound is capped by the total number of vehicles that
    can have entered the mainline.
    """
    net, T, n = prob.network, prob.T, prob.network.n
    h, v, beta = net.h, net.v, net.beta
    st = prob.state
    r_hi = st.r[None, :] + np.vstack([np.zeros(n), np.cumsum(prob.lam, axis=0)])
    if f_lo is None:
        f_lo = np.zeros((T, n))
    if f_hi is None:
        f_hi = np.minimum(net.c[None, :], r_hi[:T])
    L = np.zeros((T + 1, n))
    U = np.zeros((T + 1, n))
    L[0] = U[0] = st.x
    sigma0 = model.congestion_flags(net, st.x, st.sigma)
    phi0 = model.flows(net, st.x, sigma0)
    base = st.x + h * (np.concatenate([[0.0], beta[:-1] * phi0[:-1]]) - phi0)
    base[0] += prob.lambda0[0]
    L[1] = base + f_lo[0]
    U[1] = base + f_hi[0]
    total = st.x.sum()
    for k in range(T):
        total += prob.lambda0[k] + f_hi[k].sum()
        if k == 0:
            continue
        inflow_hi = np.concatenate([[0.0], h * beta[:-1] * v[:-1] * U[k, :-1]])
        up = U[k] + inflow_hi + f_hi[k]
        up[-1] = U[k, -1] * (1 - h * v[-1]) + inflow_hi[-1] + f_hi[k, -1]
        up[0] += prob.lambda0[k]
        U[k + 1] = np.minimum(up, total)
        low = L[k] * (1 - h * v) + f_lo[k]
        low[0] += prob.lambda0[k]
        L[k + 1] = low
    return L, U


# -- formulations -------------------------------------------------------------

@dataclass
class Formulation:
    """A built rollout program and handles to its variables."""

    builder: ModelBuilder
    prob: RolloutProblem
    x: list          # x[k][i], k = 0..T (Affine)
    r: list          # r[k][i], k = 0..T
    phi: list        # phi[k][i], k = 0..T-1
    f: dict          # f[(k, i)] for ramp cells, k = 0..T-1
    sigma: list      # sigma[k][i], k = 0..T-1 (hysteretic only)
    binaries: dict = field(default_factory=dict)

    def extract(self, sol: np.ndarray) -> dict:
        prob, n = self.prob, self.prob.network.n
        val = lambda e: Affine.of(e).value(sol)  # noqa: E731
        out = {
            "x": np.array([[val(e) for e in row] for row in self.x]),
            "r": np.array([[val(e) for e in row] for row in self.r]),
            "phi": np.array([[val(e) for e in row] for row in self.phi]),
            "f": np.zeros((prob.T, n)),
        }
        for (k, i), e in self.f.items():
            out["f"][k, i] = val(e)
        if self.sigma:
            out["sigma"] = np.array([[val(e) for e in row]
                                     for row in self.sigma])
        return out


def _skeleton(prob: RolloutProblem, bounded: bool, fixed_releases=None):
    """Variables and the linear dynamics shared by both formulations."""
    net, T, n = prob.network, prob.T, prob.network.n
    h, st = net.h, prob.state
    mb = ModelBuilder()
    f_lo = f_hi = None
    if fixed_releases is not None:
        f_lo = f_hi = np.asarray(fixed_releases, dtype=float).reshape(T, n)
    L, U = density_bounds(prob, f_lo, f_hi)
    lam_cum = np.vstack([np.zeros(n), np.cumsum(prob.lam, axis=0)])
    r_hi = st.r[None, :] + lam_cum

    x = [[Affine.of(v) for v in st.x]]
    r = [[Affine.of(v) for v in st.r]]
    for k in range(1, T + 1):
        # the interval bounds assume exact step-0 flows; only the exact
        # formulation may rely on them
        x.append([mb.var(L[k, i] if bounded else 0.0,
                         U[k, i] if bounded else np.inf, cost=1.0,
                         name=f"x{i + 1}({k})") for i in range(n)])
        r.append([mb.var(0.0, r_hi[k, i], cost=1.0, name=f"r{i + 1}({k})")
                  for i in range(n)])
    f = {}
    for k in range(T):
        for i in net.ramp_cells:
            lo, hi = 0.0, net.c[i]
            if fixed_releases is not None:
                lo = hi = f_lo[k, i]
            f[k, i] = mb.var(lo, hi, name=f"f{i + 1}({k})")
            mb.row(f[k, i] - r[k][i], hi=0.0)
    phi = [[mb.var(0.0, net.v[i] * U[k, i] if bounded else np.inf,
                   name=f"phi{i + 1}({k})") for i in range(n)]
           for k in range(T)]
    for k in range(T):
        for i in range(n):
            upstream = net.h * net.beta[i - 1] * phi[k][i - 1] if i else Affine()
            rel = f.get((k, i), 0.0)
            delta = upstream - h * phi[k][i] + rel
            if i == 0:
                delta = delta + prob.lambda0[k]
            mb.row(x[k + 1][i] - x[k][i] - delta, 0.0, 0.0)
            mb.row(r[k + 1][i] - r[k][i] + rel, prob.lam[k, i], prob.lam[k, i])
    return mb, x, r, phi, f, L, U


def build_rampc(prob: RolloutProblem, formulation: bool = False):
    """Convex relaxation: outflow bounded by demand and downstream supply."""
    net, n = prob.network, prob.network.n
    mb, x, r, phi, f, _, _ = _skeleton(prob, bounded=False)
    for k in range(prob.T):
        for i in range(n):
            mb.row(phi[k][i] - net.v[i] * x[k][i], hi=0.0)
            if i < n - 1 and net.beta[i] > 0:
                j = i + 1
                supply = net.w[j] * net.x_jam[j] - net.w[j] * x[k][j]
                if supply.is_const():
                    supply = Affine.of(max(0.0, supply.const))
                mb.row(net.beta[i] * phi[k][i] - supply, hi=0.0)
    form = Formulation(mb, prob, x, r, phi, f, [])
    return form if formulation else mb.build_lp()


def build_ehmpc(prob: RolloutProblem, delta_c: float = 1e-3,
                fixed_releases=None, formulation: bool = False):
    """Exact hysteretic dynamics as a mixed-integer program.

    ``fixed_releases`` (shape ``(T, N)``) pins every ramp release, which
    leaves a single feasible trajectory.
    """
    net, T, n = prob.network, prob.T, prob.network.n
    mb, x, r, phi, f, L, U = _skeleton(prob, bounded=True,
                                       fixed_releases=fixed_releases)
    st = prob.state
    sigma0 = model.congestion_flags(net, st.x, st.sigma)
    phi0 = model.flows(net, st.x, sigma0)
    binaries: dict[str, list] = {"a": [], "b": [], "sigma": [], "mu": [],
                                 "nu": []}

    def new_bin(kind, name):
        var = mb.var(binary=True, name=name)
        binaries[kind].append(var)
        return var

    # step-0 flows are data
    for i in range(n):
        mb.row(phi[0][i], phi0[i], phi0[i])

    sigma = [[Affine.of(int(s)) for s in sigma0]]
    for k in range(1, T):
        row = [Affine.of(0)]   # cell 1's flag gates no flow
        for i in range(1, n):
            row.append(_flag(mb, new_bin, net, i, k, x[k][i], L[k, i],
                             U[k, i], sigma[k - 1][i], delta_c))
        sigma.append(row)

    for k in range(1, T):
        for i in range(n):
            xi, p = x[k][i], phi[k][i]
            d = net.v[i] * xi
            mb.row(p - d, hi=0.0)
            if i == n - 1 or net.beta[i] == 0:
                mb.row(p - d, lo=0.0)
                continue
            j = i + 1
            sj = sigma[k][j]
            if sj.is_const() and sj.const == 0:
                mb.row(p - d, lo=0.0)
                continue
            mb.indicator(sj, 0, p - d, lo=0.0)
            w, jam, beta = net.w[j], net.x_jam[j], net.beta[i]
            over = beta * p + w * x[k][j]      # <= w * jam  <=>  beta p <= s
            # nu: downstream density at or past jam, supply <= 0
            if U[k, j] <= jam:
                nu = Affine.of(0)
            elif L[k, j] >= jam:
                nu = Affine.of(1)
            else:
                nu = new_bin("nu", f"nu{i + 1}({k})")
                mb.indicator(nu, 1, p, hi=0.0)
                mb.indicator(nu, 1, x[k][j], lo=jam)
            m_nu = beta * net.v[i] * U[k, i] + w * U[k, j] - w * jam
            if nu.is_const() and nu.const == 1:
                mb.indicator(sj, 1, p, hi=0.0)
            elif nu.is_const():
                mb.indicator(sj, 1, over, hi=w * jam)
            else:
                mb.indicator(sj, 1, over - m_nu * nu, hi=w * jam)
            # mu: which side of the min binds (lower bound on phi)
            s_min = w * (jam - U[k, j])
            s_max = w * (jam - L[k, j])
            if net.v[i] * U[k, i] * beta <= s_min:
                mb.row(p - d, lo=0.0)
            elif net.v[i] * L[k, i] * beta >= s_max:
                mb.row(over, lo=w * jam)
            else:
                mu = new_bin("mu", f"mu{i + 1}({k})")
                mb.indicator(mu, 1, p - d, lo=0.0)
                mb.indicator(mu, 0, over, lo=w * jam)

    form = Formulation(mb, prob, x, r, phi, f, sigma, binaries)
    return form if formulation else mb.build_mip()


def _flag(mb, new_bin, net, i, k, xi, lo, hi, prev, delta_c):
    """Congestion flag of cell ``i`` at step ``k`` as a binary or constant."""
    x_hi, x_lo = net.x_hi[i], net.x_lo[i]
    if hi - lo <= 1e-12:
        # density is pinned: use the plant's own thresholds
        if lo >= x_hi:
            return Affine.of(1)
        if lo <= x_lo:
            return Affine.of(0)
        return prev
    if lo >= x_hi:
        a = Affine.of(1)
    elif hi <= x_hi - delta_c:
        a = Affine.of(0)
    else:
        a = new_bin("a", f"a{i + 1}({k})")
        mb.indicator(a, 1, xi, lo=x_hi)
        mb.indicator(a, 0, xi, hi=x_hi - delta_c)
    if hi <= x_lo - delta_c:
        b = Affine.of(1)
    elif lo >= x_lo:
        b = Affine.of(0)
    else:
        b = new_bin("b", f"b{i + 1}({k})")
        mb.indicator(b, 1, xi, hi=x_lo - delta_c)
        mb.indicator(b, 0, xi, lo=x_lo)
    if a.is_const() and a.const == 1:
        return a
    if b.is_const() and b.const == 1:
        return Affine.of(0)
    if a.is_const() and b.is_const():
        return prev
    # z = a + b (a and b exclude each other); z = 1 -> sigma = a, else hold
    mb.row(a + b, hi=1.0)
    s = new_bin("sigma", f"sigma{i + 1}({k})")
    mb.row(s - a, lo=0.0)
    mb.row(s + b, hi=1.0)
    mb.row(s - prev - a - b, hi=0.0)
    mb.row(prev - s - a - b, hi=0.0)
    return s


# -- heuristic ------------------------------------------------------------------

def target_densities(net: Network, sigma, margin: float = 2.0):
    """Target densities and whether each cell must first decongest.

    The last cell aims just below its congestion threshold; each upstream
    cell aims at the density whose demand feeds its downstream target,
    capped below its own threshold when its flag gates an upstream flow.
    A congested cell keeps its critical density as target when the
    hysteresis band offers no gain over it.
    """
    n = net.n
    crit = net.w * net.x_jam / (net.v + net.w)
    target = np.empty(n)
    must_decongest = np.zeros(n, dtype=bool)
    for i in range(n - 1, -1, -1):
        gated = i >= 1   # cell 1's flag gates nothing
        cap = net.x_hi[i] - margin if gated else net.x_jam[i]
        if gated and sigma[i] == 1:
            if crit[i] >= net.x_hi[i]:
                cap = crit[i]
            else:
                must_decongest[i] = True
        if i == n - 1 or net.beta[i] == 0:
            target[i] = cap
        else:
            need = net.v[i + 1] * target[i + 1] / (net.beta[i] * net.v[i])
            target[i] = min(need, cap)
    return target, must_decongest


def heuristic_control(net: Network, state: NetworkState, lam, lambda0: float,
                      margin: float = 2.0) -> np.ndarray:
    """One-step metering rule, returns one rate per onramp.

    Ramps at or upstream of a congested cell that should be decongested
    are closed. Other ramps release just enough to bring their cell to
    its target at the next step, as predicted by the model.
    """
    sigma = model.congestion_flags(net, state.x, state.sigma)
    target, must_decongest = target_densities(net, sigma, margin)
    blocked = np.flatnonzero(must_decongest)
    last_blocked = blocked.max() if blocked.size else -1
    closed = model.step(net, state, np.zeros(net.n), lambda0, lam)
    u = []
    for i in net.ramp_cells:
        if i <= last_blocked:
            u.append(0.0)
            continue
        avail = min(state.r[i], net.c[i])
        release = min(max(target[i] - closed.x[i], 0.0), avail)
        if release >= state.r[i] or net.c[i] <= 0:
            u.append(1.0)   # the whole queue fits, no need to meter
        else:
            u.append(min(1.0, release / net.c[i]))
    return np.array(u)


# -- dispatch -----------------------------------------------------------------

def recover_rates(net: Network, planned: dict, steps: int) -> np.ndarray:
    """Metering rates from planned releases; 1 where the ramp is idle."""
    rows = []
    for k in range(steps):
        u = []
        for i in net.ramp_cells:
            c, q = net.c[i], planned["r"][k, i]
            rate = planned["f"][k, i] / c if c > 0 and q > 0 else 1.0
            u.append(min(1.0, max(0.0, rate)))
        rows.append(u)
    return np.array(rows).reshape(steps, len(net.ramp_cells))


def _prefer_release(lp: LinearProgram, form: Formulation, best: float,
                    method: str) -> np.ndarray:
    """Among optimal LP points, the one with the smallest total queue.

    The relaxed model often cannot tell a queued vehicle from one held in
    the mainline, so the optimal face is wide; this picks a reproducible
    point on it instead of whatever vertex the solver lands on.
    """
    queue = np.zeros(lp.n_vars)
    for row in form.r[1:]:
        for e in row:
            for j, v in Affine.of(e).terms.items():
                queue[j] += v
    slack = 1e-7 * (1.0 + abs(best))
    second = LinearProgram(queue, np.vstack([lp.A, lp.c]),
                           np.append(lp.row_lo, -np.inf),
                           np.append(lp.row_hi, best + slack),
                           lp.var_lo, lp.var_hi)
    res = solve_lp(second, method=method)
    if not res.optimal:
        raise ControllerError(f"RAMPC tie-break LP {res.status}")
    return res.x


def plan(cfg: ControllerConfig, prob: RolloutProblem) -> tuple[ControlPlan, SolveReport]:
    net = prob.network
    steps = min(cfg.memory, prob.T)
    report = SolveReport(kind=cfg.kind)
    start = time.perf_counter()
    if cfg.kind == "none":
        u = np.ones((steps, len(net.ramp_cells)))
    elif cfg.kind == "heuristic":
        rows, state = [], prob.state
        for k in range(steps):
            uk = heuristic_control(net, state, prob.lam[k], prob.lambda0[k],
                                   cfg.margin)
            rows.append(uk)
            state = model.step(net, state, uk, prob.lambda0[k], prob.lam[k])
        u = np.array(rows).reshape(steps, len(net.ramp_cells))
    elif cfg.kind == "rampc":
        form = build_rampc(prob, formulation=True)
        try:
            lp = form.builder.build_lp()
            res = solve_lp(lp, method=cfg.lp_method)
        except LpError as exc:
            raise ControllerError(f"RAMPC solve failed: {exc}") from exc
        report.status = res.status
        report.nodes = res.iterations
        if not res.optimal:
            raise ControllerError(f"RAMPC LP {res.status}")
        report.objective = report.best_bound = res.objective
        x_opt = res.x
        if cfg.tiebreak:
            x_opt = _prefer_release(lp, form, res.objective, cfg.lp_method)
        report.planned = form.extract(x_opt)
        u = recover_rates(net, report.planned, steps)
    else:
        form = build_ehmpc(prob, cfg.delta_c, formulation=True)
        try:
            res = solve_milp(form.builder.build_mip(), node_limit=cfg.node_limit,
                             time_limit=cfg.time_limit, engine=cfg.engine,
                             lp_method=cfg.lp_method if cfg.engine == "bnb" else "highs")
        except LpError as exc:
            raise ControllerError(f"EHMPC solve failed: {exc}") from exc
        report.status = res.status
        report.nodes = res.nodes
        report.best_bound = res.best_bound
        if res.x is None:
            raise ControllerError(f"EHMPC MILP {res.status}")
        if res.status != OPTIMAL:
            report.warning = True
            report.message = f"{res.status}: applying incumbent"
            warnings.warn(f"EHMPC stopped at {res.status}; using incumbent",
                          RuntimeWarning, stacklevel=2)
        report.objective = res.objective
        report.planned = form.extract(res.x)
        u = recover_rates(net, report.planned, steps)
    report.wall_time = time.perf_counter() - start
    return ControlPlan(u), report

