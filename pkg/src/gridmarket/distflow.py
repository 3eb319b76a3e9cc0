"""Exact branch-flow solver and the reference approximations.

The exact solver is a backward/forward sweep on the radial branch-flow
equations (squared-voltage / squared-current form):

    v_child = v_parent + 2 r P + 2 x Q - |z|^2 l
    P_j = p_j + sum_children (P_h - r_h l_h)     (Q analogous)
    l_j = (P_j^2 + Q_j^2) / v_child

Branch flows here are signed so that net load makes P negative; see
feeder.py for the indexing convention.  LinDist drops the loss term (l = 0), the
SOCP relaxation replaces the current equality with a cone inequality.
Everything downstream (CIA soundness, market admissibility) is audited
against the exact solver in this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .feeder import DemandProfile, FeederModel
from .matrices import NetworkMatrices, build_matrices

SWEEP_TOL = 1e-10
SWEEP_MAX_ITER = 200
ADMISSIBLE_TOL = 1e-4
MAX_CORNERS = 64


class PowerFlowError(RuntimeError):
    """No physical solution (load beyond deliverable power, collapse)."""


@dataclass
class PowerFlowSolution:
    v: np.ndarray          # squared voltage magnitude per node 1..N (p.u.^2)
    l: np.ndarray          # squared current per branch (p.u.^2)
    P: np.ndarray          # branch active flow (p.u., signed)
    Q: np.ndarray
    converged: bool
    iterations: int
    residual: float


@dataclass
class ViolationReport:
    """Limit violations of one or many exact power flows.

    Entries are recorded when a quantity lands outside the tol-padded
    bounds; ``worst_violation`` is the largest overshoot beyond the padded
    bounds (<= 0 exactly when no entry is recorded).  ``overshoot`` is the
    largest raw overshoot of the unpadded bounds.  A non-converged solve
    is reported via ``converged=False`` with infinite worst_violation.
    """

    voltage: list[tuple[int, float, float]] = field(default_factory=list)
    current: list[tuple[int, float, float]] = field(default_factory=list)
    worst_violation: float = -np.inf
    overshoot: float = -np.inf
    tol: float = ADMISSIBLE_TOL
    converged: bool = True
    n_checked: int = 1
    n_violating: int = 0

    @property
    def clean(self) -> bool:
        return self.converged and self.worst_violation <= 0.0


def sweep_children(feeder: FeederModel) -> list[list[int]]:
    return feeder.children()


def solve_distflow(feeder: FeederModel, p, q, tol: float = SWEEP_TOL,
                   max_iter: int = SWEEP_MAX_ITER) -> PowerFlowSolution:
    """Backward/forward sweep to the exact fixed point.

    ``p``/``q`` are net nodal injections (generation minus demand) in p.u.
    Convergence is max |delta v| < tol; a voltage collapsing toward zero
    aborts with converged=False.
    """
    n = feeder.n
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (n,) or q.shape != (n,):
        raise ValueError(f"injection vectors must have length {n}")
    order = list(feeder.order)
    kids = feeder.children()
    parent = feeder.parent
    r, x = feeder.r, feeder.x
    z2 = r**2 + x**2

    v = np.full(n, feeder.v0)
    l = np.zeros(n)
    P = np.zeros(n)
    Q = np.zeros(n)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        for j in reversed(order):
            acc_p = p[j - 1]
            acc_q = q[j - 1]
            for h in kids[j]:
                acc_p += P[h - 1] - r[h - 1] * l[h - 1]
                acc_q += Q[h - 1] - x[h - 1] * l[h - 1]
            P[j - 1] = acc_p
            Q[j - 1] = acc_q
        v_new = np.empty(n)
        for j in order:
            pv = feeder.v0 if parent[j - 1] == 0 else v_new[parent[j - 1] - 1]
            v_new[j - 1] = pv + 2 * r[j - 1] * P[j - 1] + 2 * x[j - 1] * Q[j - 1] - z2[j - 1] * l[j - 1]
        if not np.all(np.isfinite(v_new)) or np.any(v_new <= 1e-9):
            return PowerFlowSolution(v_new, l, P, Q, False, iterations, np.inf)
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        l = (P**2 + Q**2) / v
        if delta < tol:
            converged = True
            break
    residual = distflow_residual(feeder, p, q, v, l, P, Q)
    return PowerFlowSolution(v, l, P, Q, converged, iterations, residual)


def distflow_residual(feeder: FeederModel, p, q, v, l, P, Q) -> float:
    """Max absolute residual of the four branch-flow equation families."""
    n = feeder.n
    kids = feeder.children()
    parent = feeder.parent
    r, x = feeder.r, feeder.x
    z2 = r**2 + x**2
    worst = 0.0
    for j in range(1, n + 1):
        pv = feeder.v0 if parent[j - 1] == 0 else v[parent[j - 1] - 1]
        worst = max(worst, abs(v[j - 1] - pv - 2 * r[j - 1] * P[j - 1]
                               - 2 * x[j - 1] * Q[j - 1] + z2[j - 1] * l[j - 1]))
        acc_p, acc_q = p[j - 1], q[j - 1]
        for h in kids[j]:
            acc_p += P[h - 1] - r[h - 1] * l[h - 1]
            acc_q += Q[h - 1] - x[h - 1] * l[h - 1]
        worst = max(worst, abs(P[j - 1] - acc_p), abs(Q[j - 1] - acc_q))
        worst = max(worst, abs(l[j - 1] - (P[j - 1]**2 + Q[j - 1]**2) / v[j - 1]))
    return worst


def solve_two_node_exact(r: float, x: float, p: float, q: float, v0: float) -> float:
    """Closed-form squared voltage of the single-branch system.

    Substituting the current definition into the voltage-drop equation
    gives v^2 - (v0 + 2rp + 2xq) v + |z|^2 (p^2 + q^2) = 0; the physical
    (stable) solution is the larger root.
    """
    if v0 <= 0:
        raise ValueError("substation voltage must be positive")
    b = v0 + 2 * r * p + 2 * x * q
    disc = b * b - 4 * (r * r + x * x) * (p * p + q * q)
    if disc < 0:
        raise PowerFlowError(
            f"no physical solution: discriminant {disc:.3e} < 0 (load exceeds deliverable power)")
    return (b + np.sqrt(disc)) / 2.0


def solve_lindist(feeder: FeederModel, p, q, mats: NetworkMatrices | None = None) -> PowerFlowSolution:
    """Loss-free linear model: V = v0*1 + M_p p + M_q q, l = 0, P = Cp."""
    mats = mats if mats is not None else build_matrices(feeder)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    v = feeder.v0 + mats.M_p @ p + mats.M_q @ q
    return PowerFlowSolution(v=v, l=np.zeros(feeder.n), P=mats.C @ p, Q=mats.C @ q,
                             converged=True, iterations=0, residual=0.0)


def check_admissible(feeder: FeederModel, p, q, tol: float = ADMISSIBLE_TOL) -> ViolationReport:
    """Solve the exact flow and list every limit violation beyond tol."""
    sol = solve_distflow(feeder, p, q)
    report = ViolationReport(tol=tol)
    if not sol.converged:
        report.converged = False
        report.worst_violation = np.inf
        report.overshoot = np.inf
        report.n_violating = 1
        return report
    worst = -np.inf
    raw = -np.inf
    for j in range(feeder.n):
        lo_gap = feeder.v_min[j] - sol.v[j]
        hi_gap = sol.v[j] - feeder.v_max[j]
        raw = max(raw, lo_gap, hi_gap)
        worst = max(worst, lo_gap - tol, hi_gap - tol)
        if lo_gap > tol:
            report.voltage.append((j + 1, float(sol.v[j]), float(feeder.v_min[j])))
        elif hi_gap > tol:
            report.voltage.append((j + 1, float(sol.v[j]), float(feeder.v_max[j])))
        cur_gap = sol.l[j] - feeder.l_max[j]
        raw = max(raw, cur_gap)
        worst = max(worst, cur_gap - tol)
        if cur_gap > tol:
            report.current.append((j + 1, float(sol.l[j]), float(feeder.l_max[j])))
    report.worst_violation = float(worst)
    report.overshoot = float(raw)
    report.n_violating = int(bool(report.voltage or report.current))
    return report


def box_corners(lo: np.ndarray, hi: np.ndarray, cap: int = MAX_CORNERS) -> list[np.ndarray]:
    """Corner dispatches of the box, extreme (all-upper) patterns first.

    Iterates sign patterns by descending number of coordinates at the upper
    bound, capped at ``cap`` corners; zero-width coordinates are fixed.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    free = [i for i in range(lo.shape[0]) if hi[i] - lo[i] > 1e-12]
    corners: list[np.ndarray] = []
    for n_up in range(len(free), -1, -1):
        for up_positions in combinations(free, n_up):
            point = lo.copy()
            point[list(up_positions)] = hi[list(up_positions)]
            corners.append(point)
            if len(corners) >= cap:
                return corners
    return corners


def sample_box_admissibility(feeder: FeederModel, demand: DemandProfile,
                             box: tuple[np.ndarray, np.ndarray],
                             samples: int = 200, seed: int = 0,
                             tol: float = ADMISSIBLE_TOL) -> ViolationReport:
    """Audit a dispatch box against the exact model.

    ``box`` is (lo, hi) per node in p.u.; every evaluated dispatch d gives
    net injections p = d - demand.p_load, q = -demand.q_load.  Evaluates
    the box corners (extreme-first, capped at 64) plus ``samples`` uniform
    draws from a seeded generator, and aggregates the worst violations.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    if np.any(hi < lo - 1e-12):
        raise ValueError("box upper bound below lower bound")
    rng = np.random.default_rng(seed)
    points = box_corners(lo, hi)
    if samples > 0:
        width = np.maximum(hi - lo, 0.0)
        draws = lo + rng.random((samples, lo.shape[0])) * width
        points.extend(draws)
    merged = ViolationReport(tol=tol, n_checked=0)
    merged.worst_violation = -np.inf
    merged.overshoot = -np.inf
    worst_v: dict[int, tuple[int, float, float]] = {}
    worst_l: dict[int, tuple[int, float, float]] = {}
    for point in points:
        rep = check_admissible(feeder, point - demand.p_load, -demand.q_load, tol=tol)
        merged.n_checked += 1
        merged.converged = merged.converged and rep.converged
        merged.worst_violation = max(merged.worst_violation, rep.worst_violation)
        merged.overshoot = max(merged.overshoot, rep.overshoot)
        if not rep.clean:
            merged.n_violating += 1
        for node, value, bound in rep.voltage:
            cur = worst_v.get(node)
            if cur is None or abs(value - bound) > abs(cur[1] - cur[2]):
                worst_v[node] = (node, value, bound)
        for br, value, bound in rep.current:
            cur = worst_l.get(br)
            if cur is None or abs(value - bound) > abs(cur[1] - cur[2]):
                worst_l[br] = (br, value, bound)
    merged.voltage = [worst_v[k] for k in sorted(worst_v)]
    merged.current = [worst_l[k] for k in sorted(worst_l)]
    return merged


# ---------------------------------------------------------------------------
# SOCP relaxation (comparison instrument; an outer approximation)


@dataclass
class SocpResult:
    p_inj: np.ndarray       # claimed optimal injections above background (p.u.)
    v: np.ndarray           # relaxation's claimed squared voltages
    l: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    max_voltage: float
    objective: float
    status: str
    stats: dict


def solve_socp_relaxation(feeder: FeederModel, demand: DemandProfile, p_max: float,
                          per_node_cap: float | None = None,
                          mats: NetworkMatrices | None = None,
                          solver: str | None = None) -> SocpResult:
    """Maximize total injection under the cone-relaxed branch-flow model.

    The current-definition equality is relaxed to l * v >= P^2 + Q^2, so
    the optimum is an outer bound: the claimed injections need not be
    physically realizable.  ``p_max`` caps total injection;
    ``per_node_cap`` optionally caps each node instead of / in addition to
    the total.
    """
    from .program import ConvexProgram

    mats = mats if mats is not None else build_matrices(feeder)
    n = feeder.n
    prog = ConvexProgram("socp-relaxation")
    p = prog.add_variable("p", n, lb=0.0, ub=per_node_cap)
    P = prog.add_variable("P", n)
    Q = prog.add_variable("Q", n)
    l = prog.add_variable("l", n, lb=0.0, ub=feeder.l_max)
    v = prog.add_variable("v", n, lb=feeder.v_min, ub=feeder.v_max)

    q_fix = -demand.q_load
    # exact vector identities of the branch-flow model, loss term retained
    prog.add_affine_eq({P: np.eye(n), p: -mats.C, l: mats.D_R}, mats.C @ (-demand.p_load))
    prog.add_affine_eq({Q: np.eye(n), l: mats.D_X}, mats.C @ q_fix)
    prog.add_affine_eq({v: np.eye(n), p: -mats.M_p, l: mats.H},
                       feeder.v0 + mats.M_p @ (-demand.p_load) + mats.M_q @ q_fix)
    # rotated cone, child-end voltage: || (2P_j, 2Q_j, l_j - v_j) || <= l_j + v_j
    for j in range(n):
        e = np.zeros((1, n)); e[0, j] = 1.0
        prog.add_soc(
            {P: 2.0 * np.vstack([e, np.zeros((2, n))]),
             Q: 2.0 * np.vstack([np.zeros((1, n)), e, np.zeros((1, n))]),
             l: np.vstack([np.zeros((2, n)), e]),
             v: np.vstack([np.zeros((2, n)), -e])},
            linear_terms={l: e[0], v: e[0]})
    prog.add_affine_ineq({p: np.ones((1, n))}, p_max)
    prog.set_objective({p: np.ones(n)}, sense="max")
    sol = prog.solve(solver=solver)
    if not sol.optimal:
        return SocpResult(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n),
                          np.zeros(n), np.nan, np.nan, sol.status, sol.stats)
    return SocpResult(p_inj=sol["p"], v=sol["v"], l=sol["l"], P=sol["P"], Q=sol["Q"],
                      max_voltage=float(np.max(sol["v"])), objective=sol.objective,
                      status=sol.status, stats=sol.stats)
