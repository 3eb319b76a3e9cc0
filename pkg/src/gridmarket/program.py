"""Solver-agnostic convex program container and the conic backend adapter.

A program is plain data: a variable registry, affine equality and
inequality rows, convex quadratic rows ``||F x + g||^2 + a.x + c <= 0``
(the quadratic form is PSD by construction since it enters through its
factor F), second-order-cone rows ``||F x + g|| <= a.x + c``, and a linear
objective.  ``solve`` hands the assembled matrices to one conic backend
(cvxpy; solver chosen via the GRIDMARKET_SOLVER environment variable,
default CLARABEL) and then re-checks feasibility of the returned primal
itself rather than trusting the backend.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

FEASIBILITY_TOL = 1e-6
_DEFAULT_SOLVER = "CLARABEL"
_SUPPORTED_SOLVERS = ("CLARABEL", "SCS")


class ProgramError(ValueError):
    """Malformed program construction (unknown handle, bad dimensions)."""


class BackendError(RuntimeError):
    """The conic backend is unavailable or crashed."""


@dataclass(frozen=True)
class VarHandle:
    name: str
    dim: int
    offset: int


@dataclass
class Solution:
    status: str                      # optimal | infeasible | unbounded | numeric-failure
    primal: dict[str, np.ndarray] | None
    objective: float | None
    stats: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def __getitem__(self, key) -> np.ndarray:
        if self.primal is None:
            raise KeyError(f"no primal values (status={self.status})")
        return self.primal[key.name if isinstance(key, VarHandle) else key]


def _as_block(arr, dim: int, rows: int | None) -> np.ndarray:
    block = np.atleast_2d(np.asarray(arr, dtype=float))
    if block.shape[1] != dim:
        raise ProgramError(f"coefficient block has {block.shape[1]} columns, variable has {dim}")
    if rows is not None and block.shape[0] != rows:
        raise ProgramError(f"coefficient block has {block.shape[0]} rows, expected {rows}")
    return block


class ConvexProgram:
    def __init__(self, name: str = "program"):
        self.name = name
        self._vars: dict[str, VarHandle] = {}
        self._lb: list[np.ndarray] = []
        self._ub: list[np.ndarray] = []
        self._dim = 0
        self._eq: list[tuple[dict, np.ndarray]] = []
        self._ineq: list[tuple[dict, np.ndarray]] = []
        self._quad: list[tuple[dict, np.ndarray, dict, float]] = []
        self._soc: list[tuple[dict, np.ndarray, dict, float]] = []
        self._objective: tuple[dict, str, float] | None = None

    # -- builder -----------------------------------------------------------

    def add_variable(self, name: str, dim: int, lb=None, ub=None) -> VarHandle:
        if name in self._vars:
            raise ProgramError(f"variable {name!r} already registered")
        if dim < 1:
            raise ProgramError("variable dimension must be >= 1")
        handle = VarHandle(name, dim, self._dim)
        self._vars[name] = handle
        self._dim += dim
        lo = np.full(dim, -np.inf) if lb is None else np.broadcast_to(np.asarray(lb, float), (dim,)).copy()
        hi = np.full(dim, np.inf) if ub is None else np.broadcast_to(np.asarray(ub, float), (dim,)).copy()
        if np.any(lo > hi):
            raise ProgramError(f"variable {name!r} has lb > ub")
        self._lb.append(lo)
        self._ub.append(hi)
        return handle

    def _check_terms(self, terms: dict, rows: int | None = None) -> dict:
        checked = {}
        for handle, coeff in terms.items():
            known = self._vars.get(handle.name)
            if known is None or known != handle:
                raise ProgramError(f"unknown variable handle {handle!r}")
            checked[handle.name] = _as_block(coeff, handle.dim, rows)
            rows = checked[handle.name].shape[0] if rows is None else rows
        return checked

    def add_affine_eq(self, terms: dict, rhs) -> None:
        """sum_h A_h x_h = rhs (rhs scalar or vector; blocks row-aligned)."""
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        self._eq.append((self._check_terms(terms, rhs.shape[0]), rhs))

    def add_affine_ineq(self, terms: dict, rhs) -> None:
        """sum_h A_h x_h <= rhs."""
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        self._ineq.append((self._check_terms(terms, rhs.shape[0]), rhs))

    def add_convex_quad(self, factor_terms: dict, factor_offset=None,
                        linear_terms: dict | None = None, offset: float = 0.0) -> None:
        """||sum_h F_h x_h + g||^2 + sum_h a_h . x_h + offset <= 0."""
        factors = self._check_terms(factor_terms)
        k = next(iter(factors.values())).shape[0]
        g = np.zeros(k) if factor_offset is None else np.atleast_1d(np.asarray(factor_offset, float))
        if g.shape != (k,):
            raise ProgramError("factor offset length mismatch")
        lin = self._check_terms(linear_terms, 1) if linear_terms else {}
        self._quad.append((factors, g, lin, float(offset)))

    def add_soc(self, factor_terms: dict, factor_offset=None,
                linear_terms: dict | None = None, offset: float = 0.0) -> None:
        """||sum_h F_h x_h + g||_2 <= sum_h a_h . x_h + offset."""
        factors = self._check_terms(factor_terms)
        k = next(iter(factors.values())).shape[0]
        g = np.zeros(k) if factor_offset is None else np.atleast_1d(np.asarray(factor_offset, float))
        if g.shape != (k,):
            raise ProgramError("factor offset length mismatch")
        lin = self._check_terms(linear_terms, 1) if linear_terms else {}
        self._soc.append((factors, g, lin, float(offset)))

    def set_objective(self, terms: dict, sense: str = "min", constant: float = 0.0) -> None:
        if sense not in ("min", "max"):
            raise ProgramError(f"objective sense must be 'min' or 'max', got {sense!r}")
        self._objective = (self._check_terms(terms, 1), sense, float(constant))

    @property
    def n_scalars(self) -> int:
        return self._dim

    @property
    def n_eq_rows(self) -> int:
        return sum(rhs.shape[0] for _, rhs in self._eq)

    @property
    def n_ineq_rows(self) -> int:
        return sum(rhs.shape[0] for _, rhs in self._ineq)

    @property
    def n_quad_rows(self) -> int:
        return len(self._quad)

    @property
    def n_soc_rows(self) -> int:
        return len(self._soc)

    # -- assembly ----------------------------------------------------------

    def _dense_row(self, terms: dict, rows: int) -> np.ndarray:
        out = np.zeros((rows, self._dim))
        for name, block in terms.items():
            h = self._vars[name]
            out[:, h.offset:h.offset + h.dim] = block
        return out

    def _stacked(self, rows: list[tuple[dict, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
        if not rows:
            return np.zeros((0, self._dim)), np.zeros(0)
        mats, rhss = [], []
        for terms, rhs in rows:
            mats.append(self._dense_row(terms, rhs.shape[0]))
            rhss.append(rhs)
        A = np.vstack(mats)
        b = np.concatenate(rhss)
        # row hygiene: unit infinity-norm regardless of the p.u.^2 scales inside
        scale = np.max(np.abs(A), axis=1)
        scale[scale == 0.0] = 1.0
        return A / scale[:, None], b / scale

    def _bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if not self._vars:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(self._lb), np.concatenate(self._ub)

    def _objective_vector(self) -> tuple[np.ndarray, str, float]:
        if self._objective is None:
            return np.zeros(self._dim), "min", 0.0
        terms, sense, const = self._objective
        return self._dense_row(terms, 1)[0], sense, const

    def _quad_data(self, rows) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, float]]:
        out = []
        for factors, g, lin, c0 in rows:
            F = self._dense_row(factors, g.shape[0])
            a = self._dense_row(lin, 1)[0] if lin else np.zeros(self._dim)
            out.append((F, g, a, c0))
        return out

    def _cone_batch(self, rows):
        """Stack cone rows (padded to a common norm dimension) for one
        vectorized SOC handoff: returns (F_all, g_all, k_max, A_lin, c_lin)
        with column i of reshape(F_all x + g_all) holding row i's vector."""
        data = self._quad_data(rows)
        k_max = max(F.shape[0] for F, _, _, _ in data)
        F_all = np.zeros((k_max * len(data), self._dim))
        g_all = np.zeros(k_max * len(data))
        A_lin = np.zeros((len(data), self._dim))
        c_lin = np.zeros(len(data))
        for i, (F, g, a, c0) in enumerate(data):
            F_all[i * k_max:i * k_max + F.shape[0]] = F
            g_all[i * k_max:i * k_max + g.shape[0]] = g
            A_lin[i] = a
            c_lin[i] = c0
        return F_all, g_all, k_max, A_lin, c_lin

    # -- diagnostics -------------------------------------------------------

    def max_violation(self, primal: dict[str, np.ndarray]) -> float:
        """Worst constraint violation at a candidate point (own arithmetic)."""
        x = np.zeros(self._dim)
        for name, h in self._vars.items():
            x[h.offset:h.offset + h.dim] = primal[name]
        worst = 0.0
        lb, ub = self._bounds()
        finite = np.isfinite(lb)
        if finite.any():
            worst = max(worst, float(np.max(lb[finite] - x[finite])))
        finite = np.isfinite(ub)
        if finite.any():
            worst = max(worst, float(np.max(x[finite] - ub[finite])))
        A, b = self._stacked(self._eq)
        if A.shape[0]:
            worst = max(worst, float(np.max(np.abs(A @ x - b))))
        A, b = self._stacked(self._ineq)
        if A.shape[0]:
            worst = max(worst, float(np.max(A @ x - b)))
        for F, g, a, c0 in self._quad_data(self._quad):
            resid = F @ x + g
            worst = max(worst, float(resid @ resid + a @ x + c0))
        for F, g, a, c0 in self._quad_data(self._soc):
            resid = F @ x + g
            worst = max(worst, float(np.linalg.norm(resid) - (a @ x + c0)))
        return worst

    def to_text(self) -> str:
        """Human-readable dump (LP-file flavoured) for debugging."""
        lines = [f"\\ program {self.name}: {self._dim} scalars in {len(self._vars)} variables"]
        cvec, sense, const = self._objective_vector()
        lines.append("minimize" if sense == "min" else "maximize")
        lines.append("  " + self._linear_str(cvec, const))
        lines.append("subject to")
        A, b = self._stacked(self._eq)
        for i in range(A.shape[0]):
            lines.append(f"  e{i}: {self._linear_str(A[i], 0.0)} = {b[i]:.6g}")
        A, b = self._stacked(self._ineq)
        for i in range(A.shape[0]):
            lines.append(f"  i{i}: {self._linear_str(A[i], 0.0)} <= {b[i]:.6g}")
        for i, (F, g, a, c0) in enumerate(self._quad_data(self._quad)):
            lines.append(f"  q{i}: ||F x + g||^2 + {self._linear_str(a, c0)} <= 0  (F {F.shape[0]}x{F.shape[1]})")
        for i, (F, g, a, c0) in enumerate(self._quad_data(self._soc)):
            lines.append(f"  s{i}: ||F x + g|| <= {self._linear_str(a, c0)}  (F {F.shape[0]}x{F.shape[1]})")
        lines.append("bounds")
        lb, ub = self._bounds()
        for name, h in self._vars.items():
            for i in range(h.dim):
                lines.append(f"  {lb[h.offset + i]:.6g} <= {name}[{i}] <= {ub[h.offset + i]:.6g}")
        return "\n".join(lines)

    def _linear_str(self, coeffs: np.ndarray, const: float) -> str:
        parts = []
        for name, h in self._vars.items():
            for i in range(h.dim):
                c = coeffs[h.offset + i]
                if c != 0.0:
                    parts.append(f"{c:+.6g} {name}[{i}]")
        if const:
            parts.append(f"{const:+.6g}")
        return " ".join(parts) if parts else "0"

    # -- solving -----------------------------------------------------------

    def solve(self, solver: str | None = None) -> Solution:
        """Run the conic backend, then independently re-check the primal."""
        import cvxpy as cp

        solver = (solver or os.environ.get("GRIDMARKET_SOLVER") or _DEFAULT_SOLVER).upper()
        if solver not in _SUPPORTED_SOLVERS:
            raise BackendError(f"unsupported solver {solver!r} (choose from {_SUPPORTED_SOLVERS})")

        x = cp.Variable(self._dim)
        constraints = []
        lb, ub = self._bounds()
        finite = np.isfinite(lb)
        if finite.any():
            constraints.append(x[finite] >= lb[finite])
        finite = np.isfinite(ub)
        if finite.any():
            constraints.append(x[finite] <= ub[finite])
        A, b = self._stacked(self._eq)
        if A.shape[0]:
            constraints.append(A @ x == b)
        A, b = self._stacked(self._ineq)
        if A.shape[0]:
            constraints.append(A @ x <= b)
        # batch all cone rows into single vectorized SOC constraints; the
        # per-row loop form makes canonicalization the bottleneck at scale
        if self._quad:
            # ||z_i||^2 <= s_i  as  ||(2 z_i, s_i - 1)|| <= s_i + 1
            F_all, g_all, k_max, A_lin, c_lin = self._cone_batch(self._quad)
            z = cp.reshape(2.0 * (F_all @ x + g_all), (k_max, len(self._quad)), order="F")
            s = -(A_lin @ x + c_lin)
            constraints.append(cp.SOC(s + 1.0, cp.vstack([z, cp.reshape(s - 1.0, (1, len(self._quad)), order="F")]), axis=0))
        if self._soc:
            F_all, g_all, k_max, A_lin, c_lin = self._cone_batch(self._soc)
            z = cp.reshape(F_all @ x + g_all, (k_max, len(self._soc)), order="F")
            constraints.append(cp.SOC(A_lin @ x + c_lin, z, axis=0))

        cvec, sense, const = self._objective_vector()
        expr = cvec @ x + const
        problem = cp.Problem(cp.Minimize(expr) if sense == "min" else cp.Maximize(expr), constraints)
        # stop an order above the independent 1e-6 re-check; the default
        # 1e-8 targets can hit numerical breakdown in final refinement on
        # larger degenerate instances
        options = {"CLARABEL": {"tol_gap_abs": 1e-7, "tol_gap_rel": 1e-7,
                                "tol_feas": 1e-7},
                   "SCS": {"eps": 1e-7}}[solver]
        t0 = time.perf_counter()
        try:
            problem.solve(solver=getattr(cp, solver), **options)
        except cp.error.SolverError as exc:
            raise BackendError(f"solver {solver} failed: {exc}") from exc
        elapsed = time.perf_counter() - t0

        stats = {"solver": solver, "time_s": elapsed, "backend_status": problem.status}
        if problem.solver_stats is not None and problem.solver_stats.num_iters is not None:
            stats["iterations"] = int(problem.solver_stats.num_iters)

        if problem.status == cp.INFEASIBLE:
            return Solution("infeasible", None, None, stats)
        if problem.status == cp.UNBOUNDED:
            return Solution("unbounded", None, None, stats)
        if problem.status != cp.OPTIMAL or x.value is None:
            return Solution("numeric-failure", None, None, stats)

        primal = {name: np.array(x.value[h.offset:h.offset + h.dim])
                  for name, h in self._vars.items()}
        violation = self.max_violation(primal)
        stats["max_violation"] = violation
        if violation > FEASIBILITY_TOL:
            # primal travels only on optimal solutions; keep the evidence in stats
            return Solution("numeric-failure", None, None, stats)
        xfull = np.asarray(x.value, dtype=float)
        objective = float(cvec @ xfull + const)
        return Solution("optimal", primal, objective, stats)
