"""Ready-made market scenarios for tests, demos and the CLI examples.

All bid data here is synthetic.  The 37-node scenario stresses a
four-aggregator market on the balanced IEEE 37-node equivalent: nodal
capacity prices follow a commercial demand-charge schedule quoted on a
$/kW basis (stored as $/MW, i.e. scaled by 1000) so cleared revenue lands
at a realistic magnitude, and capacity offers are sized so the aggregate
bid congests the feeder (around a megawatt of step-1 slack) while
background demand alone stays comfortably admissible.
"""

from __future__ import annotations

import numpy as np

from . import ieee37
from .feeder import (AggregatorBid, DemandProfile, FeederModel, MarketScenario,
                     demand_from_dict, feeder_from_dict)

# nodal-level aggregator capacity price schedule (per flexible node)
NODAL_PRICE_TABLE = [
    [9.8, 10.9, 1.2, 2.5, 12.9, 13.5, 13.4, 4.1],
    [4.6, 6.1, 5.6, 1.6, 3.60, 7.0, 4.6, 2.6],
    [29.1, 9.0, 6.8, 14.0, 21.0, 2.7, 0.9, 15.6],
    [13.2, 1.6, 11.4, 12.7, 1.3, 4.8, 2.5, 12.7],
]

# background-demand uncertainty bounds at the flexible nodes (MW)
UNCERTAINTY_MW = [0.2, 0.1, 0.02, 0.1, 0.2, 0.03, 0.02, 0.03]

# feeder-level prices per aggregator for the single-price case (same basis)
FEEDER_LEVEL_PRICES = [18.0, 9.5, 9.0, 4.0]

PRICE_BASIS = 1000.0   # schedule quoted in $/kW, stored as $/MW

# flexible nodes of the reconstruction (feeder names, head to tail)
FLEXIBLE_NODE_NAMES = [701, 702, 713, 704, 730, 709, 734, 738]

# synthetic per-aggregator capacity offers at those nodes (MW)
CAPACITY_MW = [
    [0.50, 0.45, 0.40, 0.35, 0.40, 0.35, 0.30, 0.30],
    [0.45, 0.40, 0.35, 0.30, 0.35, 0.30, 0.25, 0.25],
    [0.40, 0.35, 0.30, 0.30, 0.30, 0.25, 0.25, 0.20],
    [0.35, 0.30, 0.30, 0.25, 0.25, 0.25, 0.20, 0.20],
]


def two_node_feeder(r: float = 0.1, x: float = 0.1, v0: float = 1.0,
                    l_max: float = 4.0, base_mva: float = 1.0) -> FeederModel:
    return FeederModel.build([(0, 1, r, x)], v0=v0, l_max=l_max,
                             base_mva=base_mva, base_kv=4.16)


def three_node_scenario(epsilon_watts: float = 10.0) -> MarketScenario:
    """Path feeder 0-1-2 with two competing aggregators at both nodes."""
    feeder = FeederModel.build([(0, 1, 0.02, 0.02), (1, 2, 0.03, 0.025)],
                               v0=1.0, l_max=[2.0, 1.5], base_mva=1.0, base_kv=4.16)
    demand = DemandProfile(p_load=np.array([0.05, 0.08]), q_load=np.array([0.02, 0.03]),
                           d_plus=np.array([0.01, 0.01]), d_minus=np.array([0.01, 0.01]))
    bids = [
        AggregatorBid("agg-a", p_bid=np.array([0.9, 1.2]), k=np.array([12.0, 9.0])),
        AggregatorBid("agg-b", p_bid=np.array([0.7, 1.0]), k=np.array([7.0, 11.0])),
    ]
    return MarketScenario(feeder=feeder, demand=demand, bids=bids,
                          epsilon_watts=epsilon_watts)


def eight_node_scenario(epsilon_watts: float = 10.0) -> MarketScenario:
    """Small mixed tree: trunk 0-1-2-3 with laterals, three aggregators."""
    branches = [
        (0, 1, 0.015, 0.02), (1, 2, 0.02, 0.02), (2, 3, 0.025, 0.02),
        (1, 4, 0.03, 0.02), (2, 5, 0.03, 0.025), (3, 6, 0.04, 0.03),
        (3, 7, 0.035, 0.03), (5, 8, 0.04, 0.035),
    ]
    feeder = FeederModel.build(branches, v0=1.0,
                               l_max=[3.0, 2.5, 2.0, 1.0, 1.0, 0.8, 0.8, 0.6],
                               base_mva=1.0, base_kv=4.16)
    rng = np.random.default_rng(8)
    p_load = rng.uniform(0.02, 0.08, size=8)
    q_load = 0.4 * p_load
    demand = DemandProfile(p_load=p_load, q_load=q_load,
                           d_plus=np.full(8, 0.01), d_minus=np.full(8, 0.01))
    zeros = np.zeros(8)
    bids = []
    offers = {
        "agg-1": {1: (0.6, 14.0), 3: (0.8, 11.0), 6: (0.7, 9.0), 8: (0.5, 13.0)},
        "agg-2": {2: (0.5, 8.0), 3: (0.6, 12.0), 7: (0.6, 6.0), 8: (0.4, 10.0)},
        "agg-3": {1: (0.4, 10.0), 4: (0.5, 7.0), 6: (0.6, 12.5), 7: (0.5, 9.5)},
    }
    for agg_id, nodal in offers.items():
        p_bid = zeros.copy()
        k = zeros.copy()
        for node, (cap, price) in nodal.items():
            p_bid[node - 1] = cap
            k[node - 1] = price
        bids.append(AggregatorBid(agg_id, p_bid, k))
    return MarketScenario(feeder=feeder, demand=demand, bids=bids,
                          epsilon_watts=epsilon_watts)


def ieee37_feeder(base_mva: float = 2.5, load_scale: float = 1.0) -> tuple[FeederModel, DemandProfile]:
    doc = ieee37.feeder_dict(base_mva=base_mva, load_scale=load_scale)
    feeder = feeder_from_dict(doc)
    return feeder, demand_from_dict(doc, feeder)


def ieee37_voltage_limited(ampacity_scale: float = 8.0) -> tuple[FeederModel, DemandProfile]:
    """Synthetic variant with ample thermal headroom so voltage binds first.

    With nameplate cable ratings the trunk ampacity caps hosting capacity
    before any voltage limit is reached; scaling the ratings up exposes the
    voltage-congestion regime the approximation-comparison sweeps study.
    """
    doc = ieee37.feeder_dict()
    for branch in doc["branches"]:
        branch["l_max_pu2"] *= ampacity_scale
    feeder = feeder_from_dict(doc)
    return feeder, demand_from_dict(doc, feeder)


def ieee37_flexible_nodes(feeder: FeederModel) -> list[int]:
    """Internal ids of the eight flexible nodes, ordered head to tail."""
    names = list(feeder.names or [])
    return [names.index(str(nm)) + 1 for nm in FLEXIBLE_NODE_NAMES]


def ieee37_scenario(nodal_pricing: bool = True, robust: bool = False,
                    epsilon_watts: float = 10.0, base_mva: float = 2.5,
                    load_scale: float = 1.0) -> MarketScenario:
    """Reconstructed four-aggregator market on the 37-node equivalent.

    ``nodal_pricing`` picks the per-node price schedule; otherwise each
    aggregator prices every node the same (single-price case).
    """
    feeder, demand = ieee37_feeder(base_mva=base_mva, load_scale=load_scale)
    flex = ieee37_flexible_nodes(feeder)
    n = feeder.n
    d_plus = np.zeros(n)
    for slot, node in enumerate(flex):
        d_plus[node - 1] = UNCERTAINTY_MW[slot] / feeder.base_mva
    demand = DemandProfile(p_load=demand.p_load, q_load=demand.q_load,
                           d_plus=d_plus, d_minus=d_plus.copy())
    bids = []
    for m in range(4):
        p_bid = np.zeros(n)
        k = np.zeros(n)
        for slot, node in enumerate(flex):
            p_bid[node - 1] = CAPACITY_MW[m][slot]
            price = NODAL_PRICE_TABLE[m][slot] if nodal_pricing else FEEDER_LEVEL_PRICES[m]
            k[node - 1] = price * PRICE_BASIS
        bids.append(AggregatorBid(f"agg-{m + 1}", p_bid, k))
    return MarketScenario(feeder=feeder, demand=demand, bids=bids,
                          epsilon_watts=epsilon_watts, robust=robust)
