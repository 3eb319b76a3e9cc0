"""Two-step grid-aware market mechanism.

Step 1 certifies whether the network can host every bid in full: it
minimizes total per-node curtailment slack subject to the inner
approximation, so zero slack is a feasibility certificate.  Step 2, run
when slack is needed, allocates capacity to aggregators by maximizing
price-weighted granted capacity under the same constraint system.  Nodal
clearing prices follow the lowest allocated bid at each node; the network
owner's revenue is the price-weighted sum of granted capacity.

Robust runs harden the nodal balance against bounded background-demand
forecast errors: the upper direction assumes demand undershoots by d_plus
(freeing injection that stresses the upper limits), the lower direction
assumes demand overshoots by d_minus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cia import OperatingPoint, build_cia_constraints, compute_operating_point
from .distflow import ViolationReport, check_admissible, sample_box_admissibility
from .feeder import AggregatorBid, DemandProfile, MarketScenario
from .matrices import NetworkMatrices, build_matrices
from .program import ConvexProgram

PRICE_THRESHOLD_MW = 1e-6
PRICE_TIE_TOL = 1e-9


class MarketError(RuntimeError):
    """Solver failure or structurally impossible market instance."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class FeasibilityResult:
    slack_pu: np.ndarray
    max_slack_mw: float
    feasible: bool
    direction: str
    robust: bool
    epsilon_mw: float
    stats: dict


@dataclass
class AllocationResult:
    aggregator_ids: list[str]
    allocation_mw: np.ndarray        # (M, N) cleared capacity per aggregator per node
    clearing_price: np.ndarray       # $/MW per node, NaN where undefined
    price_defined: np.ndarray        # bool per node
    dno_revenue: float
    nodal_fraction: np.ndarray       # NaN where nothing was bid
    aggregator_fraction: np.ndarray
    direction: str
    robust: bool
    objective: float
    tie_flagged_nodes: list[int]
    stats: dict

    def total_allocation_mw(self) -> np.ndarray:
        return self.allocation_mw.sum(axis=0)


@dataclass
class MarketOutcome:
    feasibility: FeasibilityResult
    allocation: AllocationResult | None

    @property
    def accepted_all(self) -> bool:
        return self.allocation is None


def _bid_matrix(scenario: MarketScenario) -> np.ndarray:
    """(M, N) upper or lower capacity offers in MW for the run direction."""
    rows = []
    for bid in scenario.bids:
        if scenario.direction == "upper":
            rows.append(bid.p_bid)
        else:
            rows.append(bid.p_bid_lower if bid.p_bid_lower is not None else np.zeros_like(bid.p_bid))
    return np.array(rows)


def _demand_shift(scenario: MarketScenario) -> np.ndarray:
    """Signed worst-case injection shift from demand uncertainty (p.u.)."""
    if not scenario.robust:
        return np.zeros(scenario.feeder.n)
    if scenario.direction == "upper":
        return scenario.demand.d_plus
    return -scenario.demand.d_minus


def _constraint_skeleton(scenario: MarketScenario, mats: NetworkMatrices,
                         op: OperatingPoint, name: str):
    """Program with decision vars, the CIA system and the network limits."""
    feeder = scenario.feeder
    n = feeder.n
    prog = ConvexProgram(name)
    q_fix = -scenario.demand.q_load
    p = prog.add_variable("p", n)
    q = prog.add_variable("q", n, lb=q_fix, ub=q_fix)
    l_lb = prog.add_variable("l_lb", n)
    l_ub = prog.add_variable("l_ub", n, lb=0.0)
    t = prog.add_variable("t", n, lb=0.0)
    cia = build_cia_constraints(prog, mats, op, p, q, l_lb, l_ub, t)
    eye = np.eye(n)
    prog.add_affine_ineq({cia.V_lo: -eye}, -feeder.v_min)   # v_min <= V-
    prog.add_affine_ineq({cia.V_up: eye}, feeder.v_max)     # V+ <= v_max
    prog.add_affine_ineq({l_ub: eye}, feeder.l_max)
    return prog, p, cia


def _require_admissible_background(scenario: MarketScenario) -> None:
    """The dispatch box always contains the zero-flexibility corner, so the
    (worst-cased, when robust) background demand must be admissible on its
    own; an allocation cannot repair it because aggregators may dispatch
    anywhere inside their granted range."""
    shift = _demand_shift(scenario)
    report = check_admissible(scenario.feeder, -scenario.demand.p_load + shift,
                              -scenario.demand.q_load)
    if not report.clean:
        raise MarketError(
            "background demand alone violates network limits; no allocation can "
            "certify the dispatch box",
            {"background_admissible": False,
             "worst_violation": report.worst_violation,
             "voltage": report.voltage, "current": report.current})


def step1_feasibility(scenario: MarketScenario, mats: NetworkMatrices | None = None,
                      op: OperatingPoint | None = None,
                      solver: str | None = None) -> FeasibilityResult:
    """Certify hosting of the aggregate bid; zero slack means no congestion."""
    feeder = scenario.feeder
    n = feeder.n
    _require_admissible_background(scenario)
    mats = mats if mats is not None else build_matrices(feeder)
    op = op if op is not None else compute_operating_point(feeder, scenario.demand)
    prog, p, _ = _constraint_skeleton(scenario, mats, op, "step1-feasibility")
    s = prog.add_variable("s", n, lb=0.0)
    total_bid_pu = _bid_matrix(scenario).sum(axis=0) / feeder.base_mva
    shift = _demand_shift(scenario)
    eye = np.eye(n)
    if scenario.direction == "upper":
        # p = sum_bids - P_L - s (+ d_plus when robust)
        prog.add_affine_eq({p: eye, s: eye}, total_bid_pu - scenario.demand.p_load + shift)
    else:
        # p = -sum_lower_bids - P_L + s (- d_minus when robust)
        prog.add_affine_eq({p: eye, s: -eye}, -total_bid_pu - scenario.demand.p_load + shift)
    prog.set_objective({s: np.ones(n)}, sense="min")
    sol = prog.solve(solver=solver)
    if sol.status in ("infeasible", "unbounded", "numeric-failure"):
        raise MarketError(
            f"step 1 solve failed with status {sol.status}; the background demand alone "
            "may violate network limits", {"status": sol.status, "stats": sol.stats})
    slack = np.clip(sol["s"], 0.0, None)
    max_slack_mw = float(np.max(slack)) * feeder.base_mva
    return FeasibilityResult(slack_pu=slack, max_slack_mw=max_slack_mw,
                             feasible=max_slack_mw <= scenario.epsilon_mw,
                             direction=scenario.direction, robust=scenario.robust,
                             epsilon_mw=scenario.epsilon_mw, stats=sol.stats)


def step2_allocate(scenario: MarketScenario, mats: NetworkMatrices | None = None,
                   op: OperatingPoint | None = None, solver: str | None = None,
                   price_rule: str = "min-allocated") -> AllocationResult:
    """Price-prioritized capacity allocation under the inner approximation."""
    feeder = scenario.feeder
    n = feeder.n
    m = len(scenario.bids)
    _require_admissible_background(scenario)
    mats = mats if mats is not None else build_matrices(feeder)
    op = op if op is not None else compute_operating_point(feeder, scenario.demand)
    prog, p, _ = _constraint_skeleton(scenario, mats, op, "step2-allocation")
    bids_mw = _bid_matrix(scenario)
    bids_pu = bids_mw / feeder.base_mva
    alloc = prog.add_variable("alloc", m * n, lb=0.0, ub=bids_pu.reshape(-1))
    shift = _demand_shift(scenario)
    eye = np.eye(n)
    sum_blocks = np.hstack([eye] * m)   # row i sums alloc over aggregators at node i
    if scenario.direction == "upper":
        prog.add_affine_eq({p: eye, alloc: -sum_blocks}, -scenario.demand.p_load + shift)
    else:
        prog.add_affine_eq({p: eye, alloc: sum_blocks}, -scenario.demand.p_load + shift)
    k_pu = np.vstack([bid.k for bid in scenario.bids]) * feeder.base_mva
    prog.set_objective({alloc: k_pu.reshape(-1)}, sense="max")
    sol = prog.solve(solver=solver)
    if not sol.optimal:
        diagnostics = {"status": sol.status, "stats": sol.stats}
        if sol.status == "infeasible":
            background = check_admissible(feeder, -scenario.demand.p_load + shift,
                                          -scenario.demand.q_load)
            diagnostics["background_admissible"] = background.clean
            hint = ("background demand alone violates network limits"
                    if not background.clean else
                    "limits are inconsistent with the inner approximation even at zero flexibility")
            raise MarketError(f"step 2 infeasible: {hint}", diagnostics)
        raise MarketError(f"step 2 solve failed with status {sol.status}", diagnostics)
    allocation_mw = np.clip(sol["alloc"].reshape(m, n) * feeder.base_mva, 0.0, bids_mw)
    prices, defined = clearing_prices(allocation_mw, scenario.bids, rule=price_rule)
    revenue = dno_revenue(allocation_mw, prices, defined)
    total_alloc = allocation_mw.sum(axis=0)
    total_bid = bids_mw.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        nodal_fraction = np.where(total_bid > 0, total_alloc / np.where(total_bid > 0, total_bid, 1.0), np.nan)
        agg_bid_tot = bids_mw.sum(axis=1)
        agg_fraction = np.where(agg_bid_tot > 0, allocation_mw.sum(axis=1) / np.where(agg_bid_tot > 0, agg_bid_tot, 1.0), np.nan)
    tie_flagged = _tie_flags(allocation_mw, bids_mw, scenario.bids)
    return AllocationResult(
        aggregator_ids=[bid.aggregator_id for bid in scenario.bids],
        allocation_mw=allocation_mw, clearing_price=prices, price_defined=defined,
        dno_revenue=revenue, nodal_fraction=nodal_fraction, aggregator_fraction=agg_fraction,
        direction=scenario.direction, robust=scenario.robust,
        objective=float(sol.objective), tie_flagged_nodes=tie_flagged, stats=sol.stats)


def clearing_prices(allocation_mw: np.ndarray, bids: list[AggregatorBid],
                    threshold_mw: float = PRICE_THRESHOLD_MW,
                    rule: str = "min-allocated") -> tuple[np.ndarray, np.ndarray]:
    """Uniform nodal price from the bid stack at each allocated node.

    The primary rule, ``min-allocated``, prices each node at the lowest
    bid that actually holds an allocation there.  The alternative
    ``first-rejected`` follows the classical uniform-price auction
    interpretation: the highest-priced fully rejected bid at the node sets
    the price when one exists (it marks the margin), falling back to the
    lowest allocated bid otherwise.  Nodes whose total allocation stays
    below the eligibility threshold get no price (NaN, defined=False).
    """
    if rule not in ("min-allocated", "first-rejected"):
        raise ValueError(f"unknown clearing rule {rule!r}")
    m, n = allocation_mw.shape
    prices = np.full(n, np.nan)
    defined = np.zeros(n, dtype=bool)
    for i in range(n):
        if allocation_mw[:, i].sum() <= threshold_mw:
            continue
        ks = [bids[j].k[i] for j in range(m) if allocation_mw[j, i] > threshold_mw]
        if not ks:
            continue
        price = min(ks)
        if rule == "first-rejected":
            rejected = [bids[j].k[i] for j in range(m)
                        if bids[j].p_bid[i] > 0 and allocation_mw[j, i] <= threshold_mw]
            if rejected:
                price = max(rejected)
        prices[i] = price
        defined[i] = True
    return prices, defined


def dno_revenue(allocation_mw: np.ndarray, prices: np.ndarray,
                defined: np.ndarray | None = None) -> float:
    """Total network-owner revenue: sum over nodes of price times granted MW."""
    defined = np.isfinite(prices) if defined is None else defined
    if not defined.any():
        return 0.0
    total = allocation_mw.sum(axis=0)
    return float(np.sum(prices[defined] * total[defined]))


def _tie_flags(allocation_mw: np.ndarray, bids_mw: np.ndarray,
               bids: list[AggregatorBid]) -> list[int]:
    """Nodes where equal prices plus slack capacity admit multiple optima."""
    m, n = allocation_mw.shape
    flagged = []
    for i in range(n):
        total_alloc = allocation_mw[:, i].sum()
        total_bid = bids_mw[:, i].sum()
        if not (PRICE_THRESHOLD_MW < total_alloc < total_bid - PRICE_THRESHOLD_MW):
            continue
        ks = sorted(bids[j].k[i] for j in range(m) if bids_mw[j, i] > 0)
        if any(b - a <= PRICE_TIE_TOL for a, b in zip(ks, ks[1:])):
            flagged.append(i + 1)
    return flagged


def run_market(scenario: MarketScenario, solver: str | None = None,
               price_rule: str = "min-allocated") -> MarketOutcome:
    """Full two-step flow: certify, and clear only under predicted congestion."""
    mats = build_matrices(scenario.feeder)
    op = compute_operating_point(scenario.feeder, scenario.demand)
    feasibility = step1_feasibility(scenario, mats=mats, op=op, solver=solver)
    if feasibility.feasible:
        return MarketOutcome(feasibility=feasibility, allocation=None)
    allocation = step2_allocate(scenario, mats=mats, op=op, solver=solver,
                                price_rule=price_rule)
    return MarketOutcome(feasibility=feasibility, allocation=allocation)


def allocation_box(scenario: MarketScenario, allocation_mw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dispatch box (p.u.) certified by a cleared allocation."""
    total_pu = np.asarray(allocation_mw, dtype=float).sum(axis=0) / scenario.feeder.base_mva
    zeros = np.zeros_like(total_pu)
    if scenario.direction == "upper":
        return zeros, total_pu
    return -total_pu, zeros


def full_bid_box(scenario: MarketScenario) -> tuple[np.ndarray, np.ndarray]:
    """Dispatch box spanned by the raw bids (pre-clearing)."""
    return allocation_box(scenario, _bid_matrix(scenario))


def audit_demand(scenario: MarketScenario) -> DemandProfile:
    """Demand profile the audit should stress: worst case when robust."""
    d = scenario.demand
    if not scenario.robust:
        return d
    if scenario.direction == "upper":
        return DemandProfile(d.p_load - d.d_plus, d.q_load.copy(),
                             np.zeros_like(d.d_plus), np.zeros_like(d.d_minus))
    return DemandProfile(d.p_load + d.d_minus, d.q_load.copy(),
                         np.zeros_like(d.d_plus), np.zeros_like(d.d_minus))


def audit_allocation(scenario: MarketScenario, allocation_mw: np.ndarray,
                     samples: int = 200, seed: int = 0,
                     tol: float = 1e-4) -> ViolationReport:
    """Exact-model audit of every dispatch inside the cleared box."""
    box = allocation_box(scenario, allocation_mw)
    return sample_box_admissibility(scenario.feeder, audit_demand(scenario), box,
                                    samples=samples, seed=seed, tol=tol)
