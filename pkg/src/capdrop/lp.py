"""Dense linear programs with row and variable bounds.

Two backends sit behind :func:`solve_lp`:

* ``"simplex"``: a bounded-variable primal simplex on a dense tableau,
  two phases, Bland's rule for both entering and leaving choices.
* ``"highs"``: scipy's HiGHS interface, for rollout-sized programs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


class LpError(RuntimeError):
    """Iteration limit or numerical failure inside the solver."""


@dataclass
class LinearProgram:
    """minimize ``c @ x`` s.t. ``row_lo <= A @ x <= row_hi``,
    ``var_lo <= x <= var_hi``. Infinite bounds are allowed."""

    c: np.ndarray
    A: np.ndarray
    row_lo: np.ndarray
    row_hi: np.ndarray
    var_lo: np.ndarray
    var_hi: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        m = self.A.shape[0]
        self.row_lo = _vec(self.row_lo, m, "row_lo")
        self.row_hi = _vec(self.row_hi, m, "row_hi")
        self.var_lo = _vec(self.var_lo, n, "var_lo")
        self.var_hi = _vec(self.var_hi, n, "var_hi")

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def with_bounds(self, var_lo, var_hi) -> "LinearProgram":
        return LinearProgram(self.c, self.A, self.row_lo, self.row_hi,
                             var_lo, var_hi)

    def violation(self, x: np.ndarray) -> float:
        """Largest bound or row violation at ``x``."""
        ax = self.A @ x
        parts = [self.var_lo - x, x - self.var_hi,
                 self.row_lo - ax, ax - self.row_hi]
        return float(max((p.max() if p.size else 0.0) for p in parts))


def _vec(v, size, name):
    arr = np.broadcast_to(np.asarray(v, dtype=float), (size,)).copy()
    if arr.shape != (size,):
        raise ValueError(f"{name} must have length {size}")
    return arr


@dataclass
class LpSolution:
    status: str
    x: np.ndarray | None
    objective: float
    iterations: int

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def solve_lp(lp: LinearProgram, tol: float = 1e-7, method: str = "simplex",
             max_iter: int | None = None) -> LpSolution:
    if (lp.var_lo > lp.var_hi + tol).any() or (lp.row_lo > lp.row_hi + tol).any():
        return LpSolution(INFEASIBLE, None, np.inf, 0)
    if method == "simplex":
        return _BoundedSimplex(lp, tol, max_iter).solve()
    if method == "highs":
        return _solve_highs(lp, tol)
    raise ValueError(f"unknown LP method {method!r}")


class _BoundedSimplex:
    """Tableau simplex over ``[A, -I, D] z = 0`` with bounds on ``z``.

    ``z = (x, s, a)``: structural variables, row activities and phase-one
    artificials. Nonbasic variables rest on a bound, or at zero if free.
    """

    PIVOT_TOL = 1e-9
    REFACTOR_EVERY = 50

    def __init__(self, lp: LinearProgram, tol: float, max_iter: int | None):
        self.lp = lp
        self.tol = tol
        m, n = lp.n_rows, lp.n_vars
        self.m, self.n = m, n
        self.max_iter = max_iter or 50 * (m + n) + 1000
        # equilibrate rows; big-M rows otherwise swamp the pivots
        scale = np.abs(lp.A).max(axis=1, initial=0.0)
        scale[scale == 0] = 1.0
        A = lp.A / scale[:, None]
        self.lo = np.concatenate([lp.var_lo, lp.row_lo / scale, np.zeros(m)])
        self.hi = np.concatenate([lp.var_hi, lp.row_hi / scale, np.full(m, np.inf)])
        z = np.where(np.isfinite(self.lo), self.lo,
                     np.where(np.isfinite(self.hi), self.hi, 0.0))
        res = A @ z[:n] - z[n:n + m]
        d = np.where(res > 0, -1.0, 1.0)
        z[n + m:] = np.abs(res)
        self.full = np.hstack([A, -np.eye(m), np.diag(d)])
        self.z = z
        self.basis = np.arange(n + m, n + 2 * m)
        self.is_basic = np.zeros(n + 2 * m, dtype=bool)
        self.is_basic[self.basis] = True
        self.tab = self.full * d[:, None]
        self.iterations = 0
        self._since_refactor = 0

    def solve(self) -> LpSolution:
        m, n = self.m, self.n
        cost1 = np.zeros(n + 2 * m)
        cost1[n + m:] = 1.0
        if not self._run(cost1):
            raise LpError("phase one reported unbounded")
        scale = 1.0 + float(np.abs(self.z[:n + m]).max(initial=0.0))
        if self.z[n + m:].max(initial=0.0) > self.tol * scale:
            return LpSolution(INFEASIBLE, None, np.inf, self.iterations)
        # retire artificials: pinned at zero, they cannot move again
        self.hi[n + m:] = 0.0
        self.z[n + m:] = np.where(self.is_basic[n + m:], self.z[n + m:], 0.0)
        cost2 = np.zeros(n + 2 * m)
        cost2[:n] = self.lp.c
        if not self._run(cost2):
            return LpSolution(UNBOUNDED, None, -np.inf, self.iterations)
        x = np.clip(self.z[:n], self.lp.var_lo, self.lp.var_hi)
        scale = 1.0 + float(np.abs(self.z[:n + m]).max(initial=0.0))
        if self.lp.violation(x) > 1e3 * self.tol * scale:
            raise LpError("returned point violates constraints; ill-conditioned basis")
        return LpSolution(OPTIMAL, x, float(self.lp.c @ x), self.iterations)

    def _refactor(self):
        B = self.full[:, self.basis]
        nonbasic = ~self.is_basic
        rhs = -self.full[:, nonbasic] @ self.z[nonbasic]
        try:
            self.tab = np.linalg.solve(B, self.full)
            self.z[self.basis] = np.linalg.solve(B, rhs)
        except np.linalg.LinAlgError as exc:
            raise LpError("singular basis") from exc
        self._since_refactor = 0

    def _run(self, cost: np.ndarray) -> bool:
        """Iterate to optimality; False if unbounded."""
        tol = self.tol
        lo, hi, z = self.lo, self.hi, self.z
        while True:
            if self.iterations >= self.max_iter:
                raise LpError(f"iteration limit {self.max_iter} reached")
            if self._since_refactor >= self.REFACTOR_EVERY:
                self._refactor()
            red = cost - cost[self.basis] @ self.tab
            can_up = (red < -tol) & (z < hi - tol)
            can_down = (red > tol) & (z > lo + tol)
            eligible = np.flatnonzero((can_up | can_down) & ~self.is_basic)
            if eligible.size == 0:
                return True
            j = int(eligible[0])
            direction = 1.0 if red[j] < 0 else -1.0
            alpha = self.tab[:, j] * direction
            zb = z[self.basis]
            lob, hib = lo[self.basis], hi[self.basis]
            ratios = np.full(self.m, np.inf)
            dec = alpha > self.PIVOT_TOL
            inc = alpha < -self.PIVOT_TOL
            ratios[dec] = (zb[dec] - lob[dec]) / alpha[dec]
            ratios[inc] = (hib[inc] - zb[inc]) / -alpha[inc]
            ratios = np.maximum(ratios, 0.0)
            theta_row = ratios.min() if self.m else np.inf
            theta_flip = hi[j] - lo[j]
            self.iterations += 1
            if min(theta_row, theta_flip) == np.inf:
                return False
            if theta_flip <= theta_row:
                z[j] = hi[j] if direction > 0 else lo[j]
                z[self.basis] = zb - theta_flip * alpha
                continue
            ties = np.flatnonzero(ratios <= theta_row + 1e-12)
            r = int(ties[np.argmin(self.basis[ties])])
            leaving = self.basis[r]
            z[j] += direction * theta_row
            z[self.basis] = zb - theta_row * alpha
            z[leaving] = lob[r] if alpha[r] > 0 else hib[r]
            self._pivot(r, j)
            self.is_basic[leaving] = False
            self.is_basic[j] = True
            self.basis[r] = j

    def _pivot(self, r: int, j: int):
        tab = self.tab
        row = tab[r] / tab[r, j]
        col = tab[:, j].copy()
        col[r] = 0.0
        tab -= np.outer(col, row)
        tab[r] = row
        self._since_refactor += 1


def _solve_highs(lp: LinearProgram, tol: float) -> LpSolution:
    A = lp.A
    lo_fin = np.isfinite(lp.row_lo)
    hi_fin = np.isfinite(lp.row_hi)
    eq = lo_fin & hi_fin & (lp.row_lo == lp.row_hi)
    ub_rows = hi_fin & ~eq
    lb_rows = lo_fin & ~eq
    A_ub = np.vstack([A[ub_rows], -A[lb_rows]])
    b_ub = np.concatenate([lp.row_hi[ub_rows], -lp.row_lo[lb_rows]])
    bounds = [(None if not np.isfinite(a) else a, None if not np.isfinite(b) else b)
              for a, b in zip(lp.var_lo, lp.var_hi)]
    res = linprog(lp.c, A_ub=A_ub if A_ub.size else None,
                  b_ub=b_ub if A_ub.size else None,
                  A_eq=A[eq] if eq.any() else None,
                  b_eq=lp.row_lo[eq] if eq.any() else None,
                  bounds=bounds, method="highs",
                  options={"primal_feasibility_tolerance": tol,
                           "dual_feasibility_tolerance": tol})
    nit = int(getattr(res, "nit", 0) or 0)
    if res.status == 0:
        x = np.clip(res.x, lp.var_lo, lp.var_hi)
        return LpSolution(OPTIMAL, x, float(lp.c @ x), nit)
    if res.status == 2:
        return LpSolution(INFEASIBLE, None, np.inf, nit)
    if res.status == 3:
        return LpSolution(UNBOUNDED, None, -np.inf, nit)
    raise LpError(f"HiGHS failed: {res.message}")
