"""Hosting-capacity comparison sweep: LinDist vs SOCP vs inner approximation.

For each injection cap the sweep asks each method for its claimed maximal
admissible injections, then evaluates the exact model at those injections.
An outer method (SOCP) claims voltages inside limits while the exact flow
exceeds them; the inner approximation never does.  The ``exact`` rows are
the reference curve: the cap spread uniformly over the injection nodes
and evaluated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cia import build_cia_constraints, compute_operating_point
from .distflow import solve_distflow, solve_socp_relaxation
from .feeder import DemandProfile, FeederModel
from .matrices import build_matrices
from .program import BackendError, ConvexProgram

METHODS = ("lindist", "socp", "cia", "exact")


@dataclass
class SweepRow:
    p_max_mw: float
    method: str
    claimed_injection_mw: float
    claimed_max_v: float
    true_max_v: float
    status: str


def _true_max_voltage(feeder: FeederModel, demand: DemandProfile, p_inj: np.ndarray) -> float:
    sol = solve_distflow(feeder, p_inj - demand.p_load, -demand.q_load)
    return float(np.max(sol.v)) if sol.converged else np.inf


def _lindist_claim(feeder, demand, mats, p_max_pu, solver):
    n = feeder.n
    prog = ConvexProgram("lindist-hosting")
    p_inj = prog.add_variable("p_inj", n, lb=0.0)
    v = prog.add_variable("v", n, lb=feeder.v_min, ub=feeder.v_max)
    rhs = feeder.v0 + mats.M_p @ (-demand.p_load) + mats.M_q @ (-demand.q_load)
    prog.add_affine_eq({v: np.eye(n), p_inj: -mats.M_p}, rhs)
    prog.add_affine_ineq({p_inj: np.ones((1, n))}, p_max_pu)
    prog.set_objective({p_inj: np.ones(n)}, sense="max")
    sol = prog.solve(solver=solver)
    if not sol.optimal:
        return None, np.nan, sol.status
    return sol["p_inj"], float(np.max(sol["v"])), "ok"


def _cia_claim(feeder, demand, mats, op, p_max_pu, solver):
    n = feeder.n
    prog = ConvexProgram("cia-hosting")
    p_inj = prog.add_variable("p_inj", n, lb=0.0)
    q_fix = -demand.q_load
    p = prog.add_variable("p", n)
    q = prog.add_variable("q", n, lb=q_fix, ub=q_fix)
    l_lb = prog.add_variable("l_lb", n)
    l_ub = prog.add_variable("l_ub", n, lb=0.0)
    t = prog.add_variable("t", n, lb=0.0)
    cia = build_cia_constraints(prog, mats, op, p, q, l_lb, l_ub, t)
    eye = np.eye(n)
    prog.add_affine_eq({p: eye, p_inj: -eye}, -demand.p_load)
    prog.add_affine_ineq({cia.V_lo: -eye}, -feeder.v_min)
    prog.add_affine_ineq({cia.V_up: eye}, feeder.v_max)
    prog.add_affine_ineq({l_ub: eye}, feeder.l_max)
    prog.add_affine_ineq({p_inj: np.ones((1, n))}, p_max_pu)
    prog.set_objective({p_inj: np.ones(n)}, sense="max")
    sol = prog.solve(solver=solver)
    if not sol.optimal:
        return None, np.nan, sol.status
    return sol["p_inj"], float(np.max(sol[cia.V_up])), "ok"


def hosting_sweep(feeder: FeederModel, demand: DemandProfile, p_max_grid_mw,
                  methods=METHODS, solver: str | None = None) -> list[SweepRow]:
    """One SweepRow per (cap, method); solver failures become row statuses."""
    mats = build_matrices(feeder)
    op = compute_operating_point(feeder, demand)
    base = feeder.base_mva
    rows: list[SweepRow] = []
    for p_max_mw in p_max_grid_mw:
        p_max_pu = p_max_mw / base
        for method in methods:
            try:
                if method == "lindist":
                    inj, claimed_v, status = _lindist_claim(feeder, demand, mats, p_max_pu, solver)
                elif method == "socp":
                    res = solve_socp_relaxation(feeder, demand, p_max_pu, mats=mats, solver=solver)
                    inj, claimed_v, status = (
                        (res.p_inj, res.max_voltage, "ok") if res.status == "optimal"
                        else (None, np.nan, res.status))
                elif method == "cia":
                    inj, claimed_v, status = _cia_claim(feeder, demand, mats, op, p_max_pu, solver)
                elif method == "exact":
                    inj = np.full(feeder.n, p_max_pu / feeder.n)
                    claimed_v, status = np.nan, "ok"
                else:
                    raise ValueError(f"unknown method {method!r}")
            except BackendError as exc:
                rows.append(SweepRow(p_max_mw, method, np.nan, np.nan, np.nan, f"error: {exc}"))
                continue
            if inj is None:
                rows.append(SweepRow(p_max_mw, method, np.nan, claimed_v, np.nan, status))
                continue
            true_v = _true_max_voltage(feeder, demand, inj)
            if method == "exact":
                claimed_v = true_v
            rows.append(SweepRow(p_max_mw, method, float(np.sum(inj)) * base,
                                 claimed_v, true_v, status))
    return rows
