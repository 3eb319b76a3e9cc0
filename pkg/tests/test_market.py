import numpy as np
import pytest

from gridmarket import (AggregatorBid, DemandProfile, FeederModel, MarketError,
                        MarketScenario, clearing_prices, dno_revenue, run_market,
                        step1_feasibility, step2_allocate)
from gridmarket.market import audit_allocation, full_bid_box
from gridmarket.scenarios import NODAL_PRICE_TABLE, three_node_scenario

from conftest import zero_demand


def capacity_capped_feeder():
    """Two-node feeder whose certified injection cap is exactly 1.0 MW.

    At zero demand the envelope system reduces to V+ = 1 + 0.2 p <= v_max,
    so v_max = 1.2 pins the nodal capacity at p = 1.0 (base 1 MVA).
    """
    return FeederModel.build([(0, 1, 0.1, 0.1)], v0=1.0, l_max=4.0,
                             base_mva=1.0, base_kv=4.16,
                             v_min=0.95**2, v_max=1.2)


def one_node_two_aggregators(k_hi=10.0, k_lo=5.0):
    feeder = capacity_capped_feeder()
    demand = zero_demand(1)
    bids = [AggregatorBid("hi", np.array([1.0]), np.array([k_hi])),
            AggregatorBid("lo", np.array([1.0]), np.array([k_lo]))]
    return MarketScenario(feeder=feeder, demand=demand, bids=bids)


def scale_bids(scenario: MarketScenario, factor: float) -> MarketScenario:
    bids = [AggregatorBid(b.aggregator_id, b.p_bid * factor, b.k.copy())
            for b in scenario.bids]
    return MarketScenario(feeder=scenario.feeder, demand=scenario.demand, bids=bids,
                          direction=scenario.direction,
                          epsilon_watts=scenario.epsilon_watts, robust=scenario.robust)


# -- step 1 ---------------------------------------------------------------------

def test_step1_zero_bids_feasible():
    scenario = one_node_two_aggregators()
    scenario = scale_bids(scenario, 0.0)
    res = step1_feasibility(scenario)
    assert res.feasible
    assert res.max_slack_mw <= 1e-6      # solver-level zero, far below epsilon


def test_step1_small_bids_feasible():
    scenario = scale_bids(three_node_scenario(), 0.01)
    res = step1_feasibility(scenario)
    assert res.feasible
    # ...and the full raw bid box is then exactly admissible
    report = audit_allocation(scenario, np.vstack([b.p_bid for b in scenario.bids]),
                              samples=100, seed=2)
    assert report.clean


def test_step1_congested_reports_slack():
    res = step1_feasibility(three_node_scenario())
    assert not res.feasible
    assert res.max_slack_mw > 0.1
    assert np.all(res.slack_pu >= 0.0)
    assert res.feasible == (res.max_slack_mw <= res.epsilon_mw)


def test_step1_infeasible_background_raises():
    feeder = FeederModel.build([(0, 1, 0.1, 0.1)], v0=1.0, l_max=4.0,
                               base_mva=1.0, base_kv=4.16)
    demand = DemandProfile(np.array([0.5]), np.zeros(1), np.zeros(1), np.zeros(1))
    bids = [AggregatorBid("a", np.array([0.1]), np.array([1.0]))]
    scenario = MarketScenario(feeder=feeder, demand=demand, bids=bids)
    with pytest.raises(MarketError, match="background"):
        step1_feasibility(scenario)


# -- step 2: hand-solvable LP ------------------------------------------------------

def test_step2_two_aggregator_priority():
    """One node, 1 MW capacity, bids 1 MW @ 10 and 1 MW @ 5 -> (1, 0)."""
    scenario = one_node_two_aggregators()
    res = step2_allocate(scenario)
    assert res.allocation_mw[0, 0] == pytest.approx(1.0, abs=1e-6)
    assert res.allocation_mw[1, 0] == pytest.approx(0.0, abs=1e-6)
    assert res.clearing_price[0] == pytest.approx(10.0)
    assert res.dno_revenue == pytest.approx(10.0, abs=1e-5)
    assert res.objective == pytest.approx(10.0, abs=1e-5)


def test_step2_price_order_flips_allocation():
    scenario = one_node_two_aggregators(k_hi=5.0, k_lo=10.0)
    res = step2_allocate(scenario)
    assert res.allocation_mw[0, 0] == pytest.approx(0.0, abs=1e-6)
    assert res.allocation_mw[1, 0] == pytest.approx(1.0, abs=1e-6)


def test_zero_slack_equivalence():
    scenario = scale_bids(three_node_scenario(), 0.01)
    step1 = step1_feasibility(scenario)
    assert step1.feasible
    res = step2_allocate(scenario)
    bids = np.vstack([b.p_bid for b in scenario.bids])
    assert np.abs(res.allocation_mw - bids).max() < 1e-6
    assert np.allclose(res.nodal_fraction[np.isfinite(res.nodal_fraction)], 1.0, atol=1e-5)


def test_step2_infeasible_background_diagnostics():
    feeder = FeederModel.build([(0, 1, 0.1, 0.1)], v0=1.0, l_max=4.0,
                               base_mva=1.0, base_kv=4.16)
    demand = DemandProfile(np.array([0.5]), np.zeros(1), np.zeros(1), np.zeros(1))
    bids = [AggregatorBid("a", np.array([0.1]), np.array([1.0]))]
    scenario = MarketScenario(feeder=feeder, demand=demand, bids=bids)
    with pytest.raises(MarketError) as err:
        step2_allocate(scenario)
    assert err.value.diagnostics.get("background_admissible") is False


def test_bid_monotonicity():
    base = three_node_scenario()
    res_base = step2_allocate(base)
    grown = scale_bids(base, 1.0)
    grown.bids[0].p_bid[0] *= 1.5
    res_grown = step2_allocate(grown)
    assert res_grown.objective >= res_base.objective - 1e-6


def test_price_scale_invariance():
    base = three_node_scenario()
    res1 = step2_allocate(base)
    alpha = 3.0
    scaled = MarketScenario(
        feeder=base.feeder, demand=base.demand,
        bids=[AggregatorBid(b.aggregator_id, b.p_bid.copy(), alpha * b.k)
              for b in base.bids],
        epsilon_watts=base.epsilon_watts)
    res2 = step2_allocate(scaled)
    assert res2.objective == pytest.approx(alpha * res1.objective, rel=1e-6)
    # the scaled problem's allocation achieves the unscaled optimum
    unscaled_value = sum(float(b.k @ res2.allocation_mw[i])
                         for i, b in enumerate(base.bids))
    assert unscaled_value == pytest.approx(res1.objective, rel=1e-6)


# -- clearing prices and revenue ---------------------------------------------------

def test_clearing_price_min_allocated_bid():
    """Node-5 column of the demo price schedule: all four allocated -> 1.3 clears."""
    column = [NODAL_PRICE_TABLE[m][4] for m in range(4)]
    assert column == [12.9, 3.60, 21.0, 1.3]
    bids = [AggregatorBid(f"a{m}", np.array([1.0]), np.array([column[m]]))
            for m in range(4)]
    allocation = np.full((4, 1), 0.25)
    prices, defined = clearing_prices(allocation, bids)
    assert defined[0]
    assert prices[0] == pytest.approx(1.3)


def test_clearing_price_single_aggregator():
    bids = [AggregatorBid("only", np.array([1.0]), np.array([7.5]))]
    prices, defined = clearing_prices(np.array([[0.4]]), bids)
    assert defined[0] and prices[0] == 7.5


def test_clearing_price_absent_when_unallocated():
    bids = [AggregatorBid("a", np.array([1.0, 1.0]), np.array([5.0, 6.0]))]
    prices, defined = clearing_prices(np.array([[0.5, 0.0]]), bids)
    assert defined[0] and not defined[1]
    assert np.isnan(prices[1])


def test_clearing_threshold_excludes_solver_dust():
    bids = [AggregatorBid("a", np.array([1.0]), np.array([9.0])),
            AggregatorBid("b", np.array([1.0]), np.array([2.0]))]
    allocation = np.array([[0.5], [5e-7]])     # b's share is solver noise
    prices, defined = clearing_prices(allocation, bids)
    assert prices[0] == 9.0


def test_clearing_rule_first_rejected():
    """Alternative interpretation: a fully rejected bid can set the price."""
    bids = [AggregatorBid("a", np.array([1.0]), np.array([9.0])),
            AggregatorBid("b", np.array([1.0]), np.array([6.0])),
            AggregatorBid("c", np.array([1.0]), np.array([2.0]))]
    allocation = np.array([[1.0], [0.4], [0.0]])      # c rejected at the margin
    primary, _ = clearing_prices(allocation, bids)
    assert primary[0] == 6.0                           # lowest allocated
    alt, _ = clearing_prices(allocation, bids, rule="first-rejected")
    assert alt[0] == 2.0                               # highest rejected
    # without any rejection the rules coincide
    full = np.array([[1.0], [1.0], [1.0]])
    assert clearing_prices(full, bids, rule="first-rejected")[0][0] == 2.0
    with pytest.raises(ValueError, match="unknown clearing rule"):
        clearing_prices(allocation, bids, rule="nope")


def test_dno_revenue_examples():
    prices = np.array([5.0])
    assert dno_revenue(np.array([[2.0], [1.0]]), prices) == pytest.approx(15.0)
    assert dno_revenue(np.zeros((2, 1)), np.array([np.nan])) == 0.0


def test_revenue_identity(det_nodal_outcome):
    res = det_nodal_outcome.allocation
    total = res.allocation_mw.sum(axis=0)
    expected = float(np.sum(res.clearing_price[res.price_defined]
                            * total[res.price_defined]))
    assert res.dno_revenue == expected


def test_clearing_price_bound(det_nodal_outcome):
    res = det_nodal_outcome.allocation
    table = np.vstack([NODAL_PRICE_TABLE[m] for m in range(4)]) * 1000.0
    # rebuild the per-node bid prices from the scenario construction
    from gridmarket.scenarios import ieee37_flexible_nodes, ieee37_scenario
    scenario = ieee37_scenario(nodal_pricing=True)
    flex = ieee37_flexible_nodes(scenario.feeder)
    for slot, node in enumerate(flex):
        i = node - 1
        if not res.price_defined[i]:
            continue
        allocated = [m for m in range(4) if res.allocation_mw[m, i] > 1e-6]
        assert allocated
        ks = table[allocated, slot]
        assert res.clearing_price[i] <= ks.min() + 1e-9
        assert any(abs(res.clearing_price[i] - k) < 1e-9 for k in ks)


def test_tie_flagging():
    feeder = capacity_capped_feeder()
    bids = [AggregatorBid("a", np.array([1.0]), np.array([10.0])),
            AggregatorBid("b", np.array([1.0]), np.array([10.0]))]
    scenario = MarketScenario(feeder=feeder, demand=zero_demand(1), bids=bids)
    res = step2_allocate(scenario)
    assert res.allocation_mw.sum() == pytest.approx(1.0, abs=1e-6)
    assert res.tie_flagged_nodes == [1]


def test_scenario_invariants():
    feeder = capacity_capped_feeder()
    demand = zero_demand(1)
    bid = AggregatorBid("a", np.array([0.5]), np.array([3.0]))
    with pytest.raises(Exception, match="at least one bid"):
        MarketScenario(feeder=feeder, demand=demand, bids=[])
    with pytest.raises(Exception, match="epsilon"):
        MarketScenario(feeder=feeder, demand=demand, bids=[bid], epsilon_watts=0.0)
    with pytest.raises(Exception, match="direction"):
        MarketScenario(feeder=feeder, demand=demand, bids=[bid], direction="sideways")


def test_zero_capacity_bid_contributes_nothing():
    """A node offered at zero MW earns nothing no matter the price."""
    feeder = capacity_capped_feeder()
    bids = [AggregatorBid("empty", np.array([0.0]), np.array([1e9])),
            AggregatorBid("real", np.array([0.8]), np.array([2.0]))]
    scenario = MarketScenario(feeder=feeder, demand=zero_demand(1), bids=bids)
    res = step2_allocate(scenario)
    assert res.allocation_mw[0, 0] == 0.0
    assert res.allocation_mw[1, 0] == pytest.approx(0.8, abs=1e-6)
    assert res.clearing_price[0] == pytest.approx(2.0)


# -- orchestration ------------------------------------------------------------------

def test_run_market_accept_branch():
    scenario = scale_bids(three_node_scenario(), 0.01)
    outcome = run_market(scenario)
    assert outcome.accepted_all
    assert outcome.allocation is None


def test_run_market_clearing_branch():
    outcome = run_market(three_node_scenario())
    assert not outcome.accepted_all
    assert outcome.allocation is not None
    assert outcome.allocation.allocation_mw.sum() > 0.0


def test_cleared_box_audits_clean():
    scenario = three_node_scenario()
    outcome = run_market(scenario)
    report = audit_allocation(scenario, outcome.allocation.allocation_mw,
                              samples=200, seed=0)
    assert report.clean


def test_inflated_cleared_box_fails_audit():
    scenario = three_node_scenario()
    outcome = run_market(scenario)
    report = audit_allocation(scenario, 4.0 * outcome.allocation.allocation_mw,
                              samples=200, seed=0)
    assert not report.clean


def test_robust_reduces_allocation_three_node():
    det = step2_allocate(three_node_scenario())
    rob_scenario = three_node_scenario()
    rob_scenario.robust = True
    rob = step2_allocate(rob_scenario)
    assert rob.objective <= det.objective + 1e-9
    assert rob.allocation_mw.sum() < det.allocation_mw.sum() + 1e-9
    report = audit_allocation(rob_scenario, rob.allocation_mw, samples=100, seed=3)
    assert report.clean


# -- lower direction ------------------------------------------------------------------

def lower_scenario(robust=False):
    feeder = FeederModel.build([(0, 1, 0.05, 0.05)], v0=1.0, l_max=4.0,
                               base_mva=1.0, base_kv=4.16)
    demand = DemandProfile(np.array([0.3]), np.array([0.1]),
                           np.array([0.05]), np.array([0.05]))
    bids = [AggregatorBid("dn", np.array([0.0]), np.array([6.0]),
                          p_bid_lower=np.array([2.0]))]
    return MarketScenario(feeder=feeder, demand=demand, bids=bids,
                          direction="lower", robust=robust)


def test_lower_direction_allocates_downward_capacity():
    res = step2_allocate(lower_scenario())
    granted = res.allocation_mw[0, 0]
    assert 0.0 < granted <= 2.0 + 1e-9
    # the certified downward box holds against the exact model
    scenario = lower_scenario()
    report = audit_allocation(scenario, res.allocation_mw, samples=150, seed=7)
    assert report.clean


def test_lower_direction_robust_is_tighter():
    det = step2_allocate(lower_scenario(robust=False))
    rob = step2_allocate(lower_scenario(robust=True))
    assert rob.allocation_mw.sum() <= det.allocation_mw.sum() + 1e-9
    report = audit_allocation(lower_scenario(robust=True), rob.allocation_mw,
                              samples=150, seed=8)
    assert report.clean


def test_lower_direction_without_lower_bids_grants_nothing():
    scenario = three_node_scenario()
    scenario.direction = "lower"
    res = step2_allocate(scenario)
    assert res.allocation_mw.sum() == pytest.approx(0.0, abs=1e-9)


def test_full_bid_box_directions():
    scenario = lower_scenario()
    lo, hi = full_bid_box(scenario)
    assert hi.tolist() == [0.0]
    assert lo[0] == pytest.approx(-2.0)
