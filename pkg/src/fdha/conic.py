# Second-order-cone program container and solve contract.
#
# Programs are built over real scalar variables (complex quantities are
# lowered to interleaved re/im pairs by the callers) and solved through the
# Clarabel interior-point backend. The container separates decision
# variables from lowering auxiliaries and tags constraint groups, so the
# assembled programs can be audited against the subproblem census of the
# underlying complexity analysis.
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

import clarabel

Row = tuple[np.ndarray, np.ndarray, float]  # (indices, coefficients, constant)


def row(idx, coef, const=0.0) -> Row:
    idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
    coef = np.atleast_1d(np.asarray(coef, dtype=float))
    if idx.shape != coef.shape:
        raise ValueError("index and coefficient arrays must match")
    return (idx, coef, float(const))


def const_row(value: float) -> Row:
    return (np.zeros(0, dtype=np.int64), np.zeros(0), float(value))


def psd_sqrt_factor(q: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Factor M with M^H M = Q for PSD Q; rejects indefinite input."""
    q = np.asarray(q)
    if not np.allclose(q, q.conj().T, atol=1e-9):
        raise ValueError("quadratic form must be Hermitian")
    vals, vecs = np.linalg.eigh(q)
    if vals.min(initial=0.0) < -tol:
        raise ValueError("quadratic form is not positive semidefinite")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)).conj().T


@dataclass
class SolveResult:
    status: str                 # optimal | infeasible | numerical-failure | iteration-limit
    x: np.ndarray | None
    objective: float | None    # value of the maximized objective
    gap: float
    iterations: int
    wall_time_s: float

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


class ConicProgram:
    """maximize c.x subject to linear equalities/inequalities and
    second-order cones ||A x + b|| <= c.x + d."""

    def __init__(self):
        self.n = 0
        self.n_decision = 0       # census: scalar decision variables, complex counted once
        self.objective_constant = 0.0
        self._obj_idx: list[np.ndarray] = []
        self._obj_coef: list[np.ndarray] = []
        self._eq: list[Row] = []
        self._ineq: list[Row] = []          # a.x <= b, stored as (idx, coef, rhs)
        self._soc: list[tuple[Row, list[Row]]] = []   # (head, tail rows)
        self.groups: list[tuple[str, bool]] = []      # (label, counts toward census)

    # -- variables ----------------------------------------------------------

    def add_vars(self, count: int, decision: bool = True,
                 decision_count: int | None = None) -> np.ndarray:
        """Allocate `count` real scalars. `decision_count` overrides how many
        count towards the census (complex pairs register as one)."""
        idx = np.arange(self.n, self.n + count, dtype=np.int64)
        self.n += count
        if decision:
            self.n_decision += count if decision_count is None else decision_count
        return idx

    def add_complex_vars(self, count: int, decision: bool = True) -> np.ndarray:
        """`count` complex scalars as interleaved (re, im) pairs."""
        return self.add_vars(2 * count, decision=decision,
                             decision_count=count if decision else None)

    # -- objective and constraints -------------------------------------------

    def add_objective_term(self, idx, coef):
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        coef = np.atleast_1d(np.asarray(coef, dtype=float))
        self._obj_idx.append(idx)
        self._obj_coef.append(coef)

    def new_group(self, label: str, census: bool = True) -> None:
        self.groups.append((label, census))

    def add_linear_le(self, idx, coef, rhs: float):
        self._ineq.append(row(idx, coef, rhs))

    def add_linear_ge(self, idx, coef, rhs: float):
        r = row(idx, coef, rhs)
        self._ineq.append((r[0], -r[1], -r[2]))

    def add_linear_eq(self, idx, coef, rhs: float):
        self._eq.append(row(idx, coef, rhs))

    def add_soc(self, head: Row, tail: list[Row]):
        """||tail(x)|| <= head(x); cone dimension is 1 + len(tail) >= 2."""
        if len(tail) < 1:
            raise ValueError("second-order cone needs at least one norm row")
        self._soc.append((head, list(tail)))

    def add_rotated(self, u: Row, v: Row, tail: list[Row]):
        """||tail(x)||^2 <= u(x) * v(x) with u, v >= 0, as a standard SOC
        ||[2 tail; u - v]|| <= u + v.

        The two product sides are rebalanced (u*a, v/a leaves the cone
        unchanged) so their coefficient magnitudes match; without this,
        epigraphs pairing tiny reciprocal-SINR variables with large channel
        rows defeat the solver's equilibration."""
        a = math.sqrt(self._row_scale_factor([v]) / self._row_scale_factor([u]))
        u = _row_scale(u, a)
        v = _row_scale(v, 1.0 / a)
        plus = _row_add(u, v)
        minus = _row_sub(u, v)
        rows = [_row_scale(r, 2.0) for r in tail]
        rows.append(minus)
        self.add_soc(plus, rows)

    def add_quadratic_epigraph(self, factor, affine: list[Row], target: Row,
                               const: float = 0.0):
        """Encode ||factor . y||^2 + const <= target(x) where y is the vector
        of affine expressions. factor=None means the identity; a matrix
        factor M stands for the PSD form Q = M^H M."""
        if factor is None:
            rows = list(affine)
        else:
            factor = np.asarray(factor)
            if factor.shape[1] != len(affine):
                raise ValueError("factor width must match affine vector length")
            rows = []
            for r_out in range(factor.shape[0]):
                combo = const_row(0.0)
                for c, y in zip(factor[r_out], affine):
                    if c != 0:
                        combo = _row_add(combo, _row_scale(y, c))
                rows.append(combo)
        # ||z||^2 <= s  <=>  ||[2z; s-1]|| <= s+1, with s = target - const
        s = (target[0], target[1], target[2] - const)
        self.add_rotated(s, const_row(1.0), rows)

    # -- census ---------------------------------------------------------------

    @property
    def census_variables(self) -> int:
        return self.n_decision

    @property
    def census_constraint_groups(self) -> int:
        return sum(1 for _, census in self.groups if census)

    # -- evaluation helpers ----------------------------------------------------

    def objective_value(self, x: np.ndarray) -> float:
        total = self.objective_constant
        for idx, coef in zip(self._obj_idx, self._obj_coef):
            total += float(coef @ x[idx])
        return total

    def max_violation(self, x: np.ndarray) -> float:
        """Largest absolute constraint violation at x (rows as given)."""
        return _rows_violation(self._eq, self._ineq, self._soc, x)

    # -- lowering and solve ------------------------------------------------------

    def _stack(self, rows: list[Row], negate: bool):
        """Triplets for (sign) * a_i . x, plus the constant column."""
        data, ri, ci, consts = [], [], [], []
        for r_i, (idx, coef, const) in enumerate(rows):
            ri.append(np.full(idx.shape, r_i, dtype=np.int64))
            ci.append(idx)
            data.append(-coef if negate else coef)
            consts.append(const)
        if rows:
            ri = np.concatenate(ri)
            ci = np.concatenate(ci)
            data = np.concatenate(data)
        return data, ri, ci, np.asarray(consts, dtype=float)

    @staticmethod
    def _row_scale_factor(rows: list[Row]) -> float:
        s = 0.0
        for idx, coef, const in rows:
            if coef.size:
                s = max(s, float(np.abs(coef).max()))
            s = max(s, abs(const))
        return s if s > 0 else 1.0

    def _equilibrated(self):
        """Per-row (per-cone) rescaled copies; same feasible set, row
        magnitudes near 1 so absolute residual checks are meaningful."""
        eq = [_row_scale(r, 1.0 / self._row_scale_factor([r])) for r in self._eq]
        ineq = [_row_scale(r, 1.0 / self._row_scale_factor([r])) for r in self._ineq]
        soc = []
        for head, tail in self._soc:
            s = 1.0 / self._row_scale_factor([head] + tail)
            soc.append((_row_scale(head, s), [_row_scale(r, s) for r in tail]))
        return eq, ineq, soc

    def solve(self, tol: float = 1e-8, max_iter: int = 200,
              feas_gate: float = 1e-7) -> SolveResult:
        """Solve the program; never raises on solver breakdown.

        feas_gate is the acceptance threshold on the equilibrated-row
        residuals of a claimed-optimal point; callers embedding solves in an
        outer loop may loosen it to the solver's practically achievable
        feasibility on their problem class."""
        t0 = time.perf_counter()
        q = np.zeros(self.n)
        for idx, coef in zip(self._obj_idx, self._obj_coef):
            np.subtract.at(q, idx, coef)        # minimize -c.x

        eq_rows, ineq_rows, soc_cones = self._equilibrated()
        blocks_data, blocks_ri, blocks_ci, b_parts, cones = [], [], [], [], []
        offset = 0

        def push(rows: list[Row], negate: bool):
            # equalities/inequalities: A x (<=|=) rhs  ->  s = rhs - A x
            # SOC rows: s = const + A x, encoded by negating the coefficients
            nonlocal offset
            data, ri, ci, consts = self._stack(rows, negate)
            blocks_data.append(data)
            blocks_ri.append(ri + offset)
            blocks_ci.append(ci)
            b_parts.append(consts)
            offset += len(rows)

        if eq_rows:
            push(eq_rows, negate=False)
            cones.append(clarabel.ZeroConeT(len(eq_rows)))
        if ineq_rows:
            push(ineq_rows, negate=False)
            cones.append(clarabel.NonnegativeConeT(len(ineq_rows)))
        for head, tail in soc_cones:
            push([head] + tail, negate=True)
            cones.append(clarabel.SecondOrderConeT(1 + len(tail)))

        if offset == 0:
            # Unconstrained: bounded only if the objective is zero.
            x = np.zeros(self.n)
            return SolveResult("optimal", x, self.objective_constant, 0.0, 0,
                               time.perf_counter() - t0)

        a_mat = sp.csc_matrix(
            (np.concatenate(blocks_data) if blocks_data else np.zeros(0),
             (np.concatenate(blocks_ri), np.concatenate(blocks_ci))),
            shape=(offset, self.n),
        )
        b = np.concatenate(b_parts)
        p_mat = sp.csc_matrix((self.n, self.n))

        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.max_iter = max_iter
        settings.tol_gap_abs = tol
        settings.tol_gap_rel = tol
        settings.tol_feas = min(tol, 1e-8)

        try:
            solver = clarabel.DefaultSolver(p_mat, q, a_mat, b, cones, settings)
            sol = solver.solve()
        except BaseException:
            return SolveResult("numerical-failure", None, None, np.inf, 0,
                               time.perf_counter() - t0)

        wall = time.perf_counter() - t0
        status = sol.status
        x = np.asarray(sol.x, dtype=float)
        gap = abs(float(sol.obj_val) - float(sol.obj_val_dual))
        iters = int(sol.iterations)

        ss = clarabel.SolverStatus
        if status in (ss.Solved, ss.AlmostSolved):
            if _rows_violation(eq_rows, ineq_rows, soc_cones, x) > feas_gate:
                return SolveResult("numerical-failure", x, None, gap, iters, wall)
            if status == ss.AlmostSolved and \
                    gap > 1e-5 * max(1.0, abs(float(sol.obj_val))):
                # Feasible but with a substantial remaining duality gap:
                # unusable as a subproblem optimum.
                return SolveResult("numerical-failure", x, None, gap, iters, wall)
            return SolveResult("optimal", x, self.objective_value(x), gap, iters, wall)
        if status in (ss.PrimalInfeasible, ss.AlmostPrimalInfeasible):
            return SolveResult("infeasible", None, None, gap, iters, wall)
        if status == ss.MaxIterations:
            return SolveResult("iteration-limit", x, None, gap, iters, wall)
        return SolveResult("numerical-failure", None, None, gap, iters, wall)

    # -- debug dump -----------------------------------------------------------

    def dump(self) -> str:
        """Plain-text sparse-triplet form for cross-checks with other solvers."""
        out = ["vars %d" % self.n, "census_vars %d" % self.n_decision]
        for idx, coef in zip(self._obj_idx, self._obj_coef):
            for i, c in zip(idx, coef):
                out.append("max %d %.17g" % (i, c))
        for kind, rows in (("eq", self._eq), ("le", self._ineq)):
            for idx, coef, const in rows:
                terms = " ".join("%d %.17g" % (i, c) for i, c in zip(idx, coef))
                out.append("%s %s rhs %.17g" % (kind, terms, const))
        for s, (head, tail) in enumerate(self._soc):
            for tag, (idx, coef, const) in [("head", head)] + [("row", r) for r in tail]:
                terms = " ".join("%d %.17g" % (i, c) for i, c in zip(idx, coef))
                out.append("soc%d %s %s const %.17g" % (s, tag, terms, const))
        return "\n".join(out) + "\n"


def _rows_violation(eq, ineq, soc, x: np.ndarray) -> float:
    worst = 0.0
    for idx, coef, rhs in eq:
        worst = max(worst, abs(float(coef @ x[idx]) - rhs))
    for idx, coef, rhs in ineq:
        worst = max(worst, float(coef @ x[idx]) - rhs)
    for head, tail in soc:
        hv = float(head[1] @ x[head[0]]) + head[2]
        norm = math.sqrt(sum((float(c @ x[i]) + b) ** 2 for i, c, b in tail))
        worst = max(worst, norm - hv)
    return worst


def _row_add(a: Row, b: Row) -> Row:
    return (np.concatenate([a[0], b[0]]), np.concatenate([a[1], b[1]]), a[2] + b[2])


def _row_sub(a: Row, b: Row) -> Row:
    return (np.concatenate([a[0], b[0]]), np.concatenate([a[1], -b[1]]), a[2] - b[2])


def _row_scale(a: Row, s: float) -> Row:
    return (a[0], s * a[1], s * a[2])
