"""Grid-aware day-ahead flexibility market on radial distribution feeders.

Pipeline: load a feeder and aggregator bids, build the branch-flow
sensitivity matrices and the convex inner approximation around the
zero-flexibility operating point, certify or clear the market in two
steps, and audit every cleared allocation against the exact nonlinear
power flow.
"""

from .feeder import (AggregatorBid, DemandProfile, FeederError, FeederModel,
                     MarketScenario, load_bids, load_demand, load_feeder,
                     validate_radial)
from .matrices import NetworkMatrices, build_matrices, sign_split
from .distflow import (PowerFlowError, PowerFlowSolution, ViolationReport,
                       check_admissible, sample_box_admissibility,
                       solve_distflow, solve_lindist, solve_socp_relaxation,
                       solve_two_node_exact)
from .cia import (CiaBoundSystem, OperatingPoint, build_cia_constraints,
                  compute_operating_point, corner_deltas, taylor_current)
from .program import BackendError, ConvexProgram, ProgramError, Solution
from .market import (AllocationResult, FeasibilityResult, MarketError,
                     MarketOutcome, audit_allocation, clearing_prices,
                     dno_revenue, run_market, step1_feasibility, step2_allocate)

__version__ = "0.1.0"

__all__ = [
    "AggregatorBid", "AllocationResult", "BackendError", "CiaBoundSystem",
    "ConvexProgram", "DemandProfile", "FeasibilityResult", "FeederError",
    "FeederModel", "MarketError", "MarketOutcome", "MarketScenario",
    "NetworkMatrices", "OperatingPoint", "PowerFlowError", "PowerFlowSolution",
    "ProgramError", "Solution", "ViolationReport", "audit_allocation",
    "build_cia_constraints", "build_matrices", "check_admissible",
    "clearing_prices", "compute_operating_point", "corner_deltas",
    "dno_revenue", "load_bids", "load_demand", "load_feeder", "run_market",
    "sample_box_admissibility", "sign_split", "solve_distflow",
    "solve_lindist", "solve_socp_relaxation", "solve_two_node_exact",
    "step1_feasibility", "step2_allocate", "taylor_current", "validate_radial",
]
