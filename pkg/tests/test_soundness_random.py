"""Randomized end-to-end soundness battery.

Random radial feeders (including capacitive branches, which activate the
negative parts of the reactance and voltage sensitivity splits), random
background demand and random bid stacks; every market outcome's dispatch
box must audit clean against the exact nonlinear model.
"""

import numpy as np
import pytest

from gridmarket import (AggregatorBid, DemandProfile, FeederModel,
                        MarketScenario, build_matrices, run_market)
from gridmarket.market import audit_allocation, full_bid_box
from gridmarket.distflow import sample_box_admissibility
from gridmarket.market import audit_demand


def random_scenario(rng: np.random.Generator, robust: bool = False) -> MarketScenario:
    n = int(rng.integers(4, 10))
    parents = [int(rng.integers(0, j)) for j in range(1, n + 1)]
    r = rng.uniform(0.01, 0.06, n)
    x = rng.uniform(0.01, 0.06, n)
    # a couple of capacitive branches to exercise the sign splits
    flips = rng.random(n) < 0.3
    x = np.where(flips, -x, x)
    branches = [(parents[j - 1], j, r[j - 1], x[j - 1]) for j in range(1, n + 1)]
    feeder = FeederModel.build(branches, v0=1.0, l_max=rng.uniform(1.5, 4.0, n),
                               base_mva=1.0, base_kv=4.16)
    demand = DemandProfile(p_load=rng.uniform(0.0, 0.08, n),
                           q_load=rng.uniform(0.0, 0.04, n),
                           d_plus=rng.uniform(0.0, 0.01, n),
                           d_minus=rng.uniform(0.0, 0.01, n))
    bids = []
    for m in range(int(rng.integers(1, 4))):
        p_bid = np.where(rng.random(n) < 0.6, rng.uniform(0.0, 0.8, n), 0.0)
        k = rng.uniform(1.0, 20.0, n)
        bids.append(AggregatorBid(f"agg-{m}", p_bid, k))
    if not any(b.p_bid.sum() > 0 for b in bids):
        bids[0].p_bid[rng.integers(0, n)] = 0.5
    return MarketScenario(feeder=feeder, demand=demand, bids=bids, robust=robust)


@pytest.mark.parametrize("seed", range(10))
def test_random_market_boxes_audit_clean(seed):
    rng = np.random.default_rng(1000 + seed)
    scenario = random_scenario(rng, robust=bool(seed % 3 == 0))
    mats = build_matrices(scenario.feeder)
    splits_active = mats.D_X_minus.any() or mats.H_minus.any()
    outcome = run_market(scenario)
    if outcome.accepted_all:
        # a zero-slack certificate covers the whole raw bid stack
        report = sample_box_admissibility(scenario.feeder, audit_demand(scenario),
                                          full_bid_box(scenario), samples=120, seed=seed)
    else:
        report = audit_allocation(scenario, outcome.allocation.allocation_mw,
                                  samples=120, seed=seed)
    assert report.clean, (
        f"seed {seed}: worst violation {report.worst_violation:.3e} "
        f"(accepted_all={outcome.accepted_all}, sign splits active={splits_active})")


@pytest.mark.parametrize("seed", range(4))
def test_random_lower_direction_boxes_audit_clean(seed):
    rng = np.random.default_rng(2000 + seed)
    scenario = random_scenario(rng, robust=bool(seed % 2))
    scenario.direction = "lower"
    for bid in scenario.bids:
        bid.p_bid_lower = np.where(rng.random(scenario.feeder.n) < 0.5,
                                   rng.uniform(0.0, 0.6, scenario.feeder.n), 0.0)
    outcome = run_market(scenario)
    if outcome.accepted_all:
        report = sample_box_admissibility(scenario.feeder, audit_demand(scenario),
                                          full_bid_box(scenario), samples=120, seed=seed)
    else:
        report = audit_allocation(scenario, outcome.allocation.allocation_mw,
                                  samples=120, seed=seed)
    assert report.clean, f"seed {seed}: worst {report.worst_violation:.3e}"


def test_sign_splits_do_activate():
    """At least some of the random battery exercises the negative parts."""
    activated = 0
    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        scenario = random_scenario(rng)
        mats = build_matrices(scenario.feeder)
        if mats.D_X_minus.any() and mats.H_minus.any():
            activated += 1
    assert activated >= 3


def test_full_pipeline_at_123_nodes():
    """Largest design-point feeder size: dense matrices, one full market."""
    rng = np.random.default_rng(0)
    n = 123
    parents = [int(rng.integers(max(0, j - 4), j)) for j in range(1, n + 1)]
    branches = [(parents[j - 1], j, rng.uniform(0.001, 0.004), rng.uniform(0.001, 0.004))
                for j in range(1, n + 1)]
    feeder = FeederModel.build(branches, v0=1.0, l_max=6.0, base_mva=2.5, base_kv=4.8)
    demand = DemandProfile(rng.uniform(0, 0.004, n), rng.uniform(0, 0.002, n),
                           np.zeros(n), np.zeros(n))
    bids = [AggregatorBid(f"a{m}", np.where(rng.random(n) < 0.3, rng.uniform(0, 0.4, n), 0.0),
                          rng.uniform(1, 20, n)) for m in range(4)]
    scenario = MarketScenario(feeder=feeder, demand=demand, bids=bids)
    outcome = run_market(scenario)
    assert not outcome.accepted_all
    report = audit_allocation(scenario, outcome.allocation.allocation_mw,
                              samples=100, seed=0)
    assert report.clean
