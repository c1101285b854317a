"""Mixed-integer programs over binary variables.

Indicator constraints ("if binary ``b`` equals ``value`` then
``lo <= a @ x <= hi``") are turned into big-M rows whose coefficient is
the activity range implied by the variable bounds, so every variable an
indicator touches needs finite bounds.

:func:`solve_milp` runs either the in-house branch and bound
(``engine="bnb"``) or HiGHS (``engine="highs"``). Both finish with a
polishing LP that fixes the binaries at their rounded values.
"""

from __future__ import annotations

import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, milp

from .lp import LinearProgram, LpError, solve_lp

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
NODE_LIMIT = "node-limit"
TIME_LIMIT = "time-limit"


class MilpError(ValueError):
    """Malformed mixed-integer program."""


@dataclass(frozen=True)
class Indicator:
    binary: int
    value: int
    coefs: dict[int, float]
    lo: float = -np.inf
    hi: float = np.inf


@dataclass
class MixedIntegerProgram:
    base: LinearProgram
    binaries: list[int]
    indicators: list[Indicator] = field(default_factory=list)

    def __post_init__(self):
        self.binaries = sorted(set(int(b) for b in self.binaries))
        n = self.base.n_vars
        if any(b < 0 or b >= n for b in self.binaries):
            raise MilpError("binary index out of range")
        declared = set(self.binaries)
        for ind in self.indicators:
            if ind.binary not in declared:
                raise MilpError(
                    f"indicator references non-binary variable {ind.binary}")
            if ind.value not in (0, 1):
                raise MilpError("indicator value must be 0 or 1")
            if any(j < 0 or j >= n for j in ind.coefs):
                raise MilpError("indicator coefficient index out of range")

    def relaxation(self) -> LinearProgram:
        """Big-M LP relaxation with binaries boxed to [0, 1]."""
        base = self.base
        lo, hi = base.var_lo.copy(), base.var_hi.copy()
        b = np.array(self.binaries, dtype=int)
        lo[b] = np.maximum(lo[b], 0.0)
        hi[b] = np.minimum(hi[b], 1.0)
        rows, rlo, rhi = [], [], []
        for ind in self.indicators:
            for row, row_lo, row_hi in _big_m_rows(ind, lo, hi, base.n_vars):
                rows.append(row)
                rlo.append(row_lo)
                rhi.append(row_hi)
        A = np.vstack([base.A] + rows) if rows else base.A
        return LinearProgram(base.c, A,
                             np.concatenate([base.row_lo, rlo]),
                             np.concatenate([base.row_hi, rhi]), lo, hi)


def _big_m_rows(ind: Indicator, lo, hi, n):
    a = np.zeros(n)
    for j, v in ind.coefs.items():
        a[j] += v
    nz = np.flatnonzero(a)
    plus = np.where(a[nz] > 0, hi[nz], lo[nz])
    minus = np.where(a[nz] > 0, lo[nz], hi[nz])
    act_max = float(a[nz] @ plus) if nz.size else 0.0
    act_min = float(a[nz] @ minus) if nz.size else 0.0
    b = ind.binary
    if np.isfinite(ind.hi):
        if not np.isfinite(act_max):
            raise MilpError("indicator touches a variable without finite bounds")
        big_m = act_max - ind.hi
        if big_m > 0:
            row = a.copy()
            if ind.value == 1:  # a.x <= hi + M (1 - b)
                row[b] += big_m
                yield row, -np.inf, ind.hi + big_m
            else:               # a.x <= hi + M b
                row[b] -= big_m
                yield row, -np.inf, ind.hi
    if np.isfinite(ind.lo):
        if not np.isfinite(act_min):
            raise MilpError("indicator touches a variable without finite bounds")
        big_m = ind.lo - act_min
        if big_m > 0:
            row = a.copy()
            if ind.value == 1:  # a.x >= lo - M (1 - b)
                row[b] -= big_m
                yield row, ind.lo - big_m, np.inf
            else:               # a.x >= lo - M b
                row[b] += big_m
                yield row, ind.lo, np.inf


@dataclass
class MilpSolution:
    status: str
    x: np.ndarray | None
    objective: float
    best_bound: float
    nodes: int
    wall_time: float = 0.0
    node_objectives: list[float] = field(default_factory=list)
    # (binary lower bounds, binary upper bounds) per traced node
    node_boxes: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def has_solution(self) -> bool:
        return self.x is not None


def default_threads() -> int:
    try:
        return max(0, int(os.environ.get("CAPDROP_THREADS", "0")))
    except ValueError:
        return 0


def solve_milp(mip: MixedIntegerProgram, node_limit: int = 200_000,
               time_limit: float | None = None, tol: float = 1e-6,
               gap: float = 1e-6, engine: str = "bnb",
               lp_method: str = "simplex", threads: int | None = None,
               trace: bool = False) -> MilpSolution:
    """Minimize a mixed-integer program.

    ``tol`` is the integrality tolerance and ``gap`` the relative
    optimality gap. ``threads`` > 1 evaluates branch-and-bound nodes
    concurrently (defaults to ``CAPDROP_THREADS``; 0 or 1 is serial).
    """
    start = time.perf_counter()
    relax = mip.relaxation()
    if engine == "highs":
        sol = _solve_highs(mip, relax, node_limit, time_limit, gap)
    elif engine == "bnb":
        threads = default_threads() if threads is None else threads
        sol = _BranchAndBound(mip, relax, node_limit, time_limit, tol, gap,
                              lp_method, threads, trace).run()
    else:
        raise ValueError(f"unknown MILP engine {engine!r}")
    if sol.x is not None:
        sol = _polish(mip, relax, sol, lp_method if engine == "bnb" else "highs")
    sol.wall_time = time.perf_counter() - start
    return sol


def _polish(mip, relax, sol, lp_method):
    b = np.array(mip.binaries, dtype=int)
    fixed = np.round(sol.x[b])
    lo, hi = relax.var_lo.copy(), relax.var_hi.copy()
    lo[b] = hi[b] = fixed
    try:
        res = solve_lp(relax.with_bounds(lo, hi), method=lp_method)
    except LpError:
        return sol
    if res.optimal and res.objective <= sol.objective + 1e-6 * max(1.0, abs(sol.objective)):
        sol.x = res.x
        sol.objective = res.objective
        if sol.status == OPTIMAL:
            sol.best_bound = min(sol.best_bound, sol.objective)
    return sol


@dataclass(order=True)
class _Node:
    bound: float
    seq: int
    lo: np.ndarray = field(compare=False)
    hi: np.ndarray = field(compare=False)


class _BranchAndBound:
    RESTART_EVERY = 1000

    def __init__(self, mip, relax, node_limit, time_limit, tol, gap,
                 lp_method, threads, trace):
        self.mip = mip
        self.relax = relax
        self.bins = np.array(mip.binaries, dtype=int)
        self.node_limit = node_limit
        self.time_limit = time_limit
        self.tol = tol
        self.gap = gap
        self.lp_method = lp_method
        self.threads = threads
        self.trace = trace
        self.lock = threading.Lock()
        self.best_x = None
        self.best_obj = np.inf
        self.node_objs: list[float] = []
        self.node_boxes: list = []

    def _cutoff(self) -> float:
        if not np.isfinite(self.best_obj):
            return np.inf
        return self.best_obj - self.gap * max(1.0, abs(self.best_obj))

    def _evaluate(self, node: _Node):
        res = solve_lp(self.relax.with_bounds(node.lo, node.hi),
                       method=self.lp_method)
        return node, res

    def _offer(self, x, obj):
        with self.lock:  # incumbent only ever improves
            if obj < self.best_obj:
                self.best_obj = obj
                self.best_x = x

    def run(self) -> MilpSolution:
        start = time.perf_counter()
        seq = 0
        stack = [_Node(-np.inf, seq, self.relax.var_lo.copy(),
                       self.relax.var_hi.copy())]
        nodes = 0
        status = OPTIMAL
        batch = max(1, self.threads)
        pool = ThreadPoolExecutor(batch) if batch > 1 else None
        try:
            while stack:
                if nodes >= self.node_limit:
                    status = NODE_LIMIT
                    break
                if self.time_limit is not None and \
                        time.perf_counter() - start > self.time_limit:
                    status = TIME_LIMIT
                    break
                if nodes and nodes % self.RESTART_EVERY < batch:
                    # best-first restart: dive next from the best open bound
                    stack.sort(key=lambda nd: (-nd.bound, -nd.seq))
                todo = []
                while stack and len(todo) < batch:
                    nd = stack.pop()
                    if nd.bound < self._cutoff():
                        todo.append(nd)
                if not todo:
                    continue
                results = (pool.map(self._evaluate, todo) if pool
                           else map(self._evaluate, todo))
                for node, res in results:
                    nodes += 1
                    if not res.optimal:
                        continue
                    if self.trace:
                        self.node_objs.append(res.objective)
                        self.node_boxes.append((node.lo[self.bins].copy(),
                                                node.hi[self.bins].copy()))
                    if res.objective >= self._cutoff():
                        continue
                    xb = res.x[self.bins]
                    frac = np.abs(xb - np.round(xb))
                    if frac.max(initial=0.0) <= self.tol:
                        self._offer(res.x, res.objective)
                        continue
                    k = int(np.argmax(np.minimum(xb - np.floor(xb),
                                                 np.ceil(xb) - xb)))
                    j = self.bins[k]
                    down_hi = node.hi.copy()
                    down_hi[j] = 0.0
                    up_lo = node.lo.copy()
                    up_lo[j] = 1.0
                    down = _Node(res.objective, seq + 1, node.lo, down_hi)
                    up = _Node(res.objective, seq + 2, up_lo, node.hi)
                    seq += 2
                    # the child nearer the relaxed value is explored first
                    stack.extend([down, up] if xb[k] >= 0.5 else [up, down])
        finally:
            if pool:
                pool.shutdown()
        if status == OPTIMAL:
            if self.best_x is None:
                return MilpSolution(INFEASIBLE, None, np.inf, np.inf, nodes,
                                    node_objectives=self.node_objs,
                                    node_boxes=self.node_boxes)
            bound = self.best_obj
        else:
            open_bounds = [nd.bound for nd in stack]
            bound = min(open_bounds + [self.best_obj])
        return MilpSolution(status, self.best_x, self.best_obj, bound, nodes,
                            node_objectives=self.node_objs,
                            node_boxes=self.node_boxes)


def _solve_highs(mip, relax, node_limit, time_limit, gap) -> MilpSolution:
    integrality = np.zeros(relax.n_vars)
    integrality[mip.binaries] = 1
    options = {"node_limit": int(node_limit), "mip_rel_gap": gap}
    if time_limit is not None:
        options["time_limit"] = float(time_limit)
    cons = []
    if relax.n_rows:
        cons.append(LinearConstraint(sparse.csr_array(relax.A),
                                     relax.row_lo, relax.row_hi))
    res = milp(relax.c, integrality=integrality,
               bounds=Bounds(relax.var_lo, relax.var_hi),
               constraints=cons, options=options)
    nodes = int(getattr(res, "mip_node_count", 0) or 0)
    bound = getattr(res, "mip_dual_bound", None)
    bound = -np.inf if bound is None else float(bound)
    if res.status == 0:
        return MilpSolution(OPTIMAL, res.x, float(res.fun), bound, nodes)
    if res.status == 2:
        return MilpSolution(INFEASIBLE, None, np.inf, np.inf, nodes)
    if res.status == 1:
        status = TIME_LIMIT if "time" in res.message.lower() else NODE_LIMIT
        x = res.x
        obj = float(res.fun) if x is not None else np.inf
        return MilpSolution(status, x, obj, bound, nodes)
    raise LpError(f"HiGHS MILP failed: {res.message}")


class Affine:
    """Sparse affine expression ``sum(coef * var) + const``."""

    __slots__ = ("terms", "const")

    def __init__(self, terms=None, const=0.0):
        self.terms = dict(terms or {})
        self.const = float(const)

    @classmethod
    def of(cls, value) -> "Affine":
        return value if isinstance(value, Affine) else cls(const=value)

    def is_const(self) -> bool:
        return not self.terms

    def __add__(self, other):
        other = Affine.of(other)
        terms = dict(self.terms)
        for j, v in other.terms.items():
            terms[j] = terms.get(j, 0.0) + v
        return Affine(terms, self.const + other.const)

    __radd__ = __add__

    def __neg__(self):
        return Affine({j: -v for j, v in self.terms.items()}, -self.const)

    def __sub__(self, other):
        return self + (-Affine.of(other))

    def __rsub__(self, other):
        return Affine.of(other) - self

    def __mul__(self, k):
        k = float(k)
        return Affine({j: k * v for j, v in self.terms.items()}, k * self.const)

    __rmul__ = __mul__

    def value(self, x) -> float:
        return self.const + sum(v * x[j] for j, v in self.terms.items())

    def __repr__(self):
        return f"Affine({self.terms}, {self.const})"


class ModelBuilder:
    """Incremental construction of LPs and MIPs from affine expressions."""

    def __init__(self):
        self.lo: list[float] = []
        self.hi: list[float] = []
        self.cost: list[float] = []
        self.names: list[str] = []
        self.binaries: list[int] = []
        self.rows: list[tuple[dict, float, float]] = []
        self.indicators: list[Indicator] = []

    @property
    def n_vars(self) -> int:
        return len(self.lo)

    def var(self, lo=0.0, hi=np.inf, cost=0.0, binary=False, name="") -> Affine:
        j = len(self.lo)
        if binary:
            lo, hi = max(lo, 0.0), min(hi, 1.0)
            self.binaries.append(j)
        self.lo.append(float(lo))
        self.hi.append(float(hi))
        self.cost.append(float(cost))
        self.names.append(name)
        return Affine({j: 1.0})

    def add_cost(self, expr: Affine):
        for j, v in expr.terms.items():
            self.cost[j] += v

    def row(self, expr, lo=-np.inf, hi=np.inf):
        """Add ``lo <= expr <= hi``; constant rows are checked, not stored."""
        expr = Affine.of(expr)
        if expr.is_const():
            if expr.const < lo - 1e-9 or expr.const > hi + 1e-9:
                raise MilpError(f"constant row {expr.const} outside [{lo}, {hi}]")
            return
        self.rows.append((expr.terms, lo - expr.const, hi - expr.const))

    def indicator(self, binary, value: int, expr, lo=-np.inf, hi=np.inf):
        """``binary == value`` implies ``lo <= expr <= hi``."""
        binary = Affine.of(binary)
        expr = Affine.of(expr)
        if binary.is_const():
            if round(binary.const) == value:
                self.row(expr, lo, hi)
            return
        (j, coef), = binary.terms.items()
        if coef != 1.0 or binary.const != 0.0 or j not in self.binaries:
            raise MilpError("indicator condition must be a bare binary variable")
        if expr.is_const():
            if expr.const < lo - 1e-9 or expr.const > hi + 1e-9:
                # condition can never hold: pin the binary to the other value
                self.lo[j] = self.hi[j] = float(1 - value)
            return
        self.indicators.append(Indicator(j, value, dict(expr.terms),
                                         lo - expr.const, hi - expr.const))

    def _base(self) -> LinearProgram:
        n = self.n_vars
        A = np.zeros((len(self.rows), n))
        lo = np.empty(len(self.rows))
        hi = np.empty(len(self.rows))
        for i, (terms, rlo, rhi) in enumerate(self.rows):
            for j, v in terms.items():
                A[i, j] += v
            lo[i], hi[i] = rlo, rhi
        return LinearProgram(np.array(self.cost), A, lo, hi,
                             np.array(self.lo), np.array(self.hi))

    def build_lp(self) -> LinearProgram:
        return self._base()

    def build_mip(self) -> MixedIntegerProgram:
        return MixedIntegerProgram(self._base(), list(self.binaries),
                                   list(self.indicators))
