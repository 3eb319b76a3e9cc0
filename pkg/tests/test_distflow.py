import numpy as np
import pytest

from gridmarket import (DemandProfile, FeederModel, PowerFlowError,
                        check_admissible, sample_box_admissibility,
                        solve_distflow, solve_lindist, solve_socp_relaxation,
                        solve_two_node_exact)
from gridmarket.distflow import box_corners

from conftest import zero_demand

# closed-form root of v^2 - 0.9 v + 0.005 = 0 (high-voltage branch)
TWO_NODE_V1 = (0.9 + np.sqrt(0.79)) / 2.0


def residual_oracle(feeder, p, q, sol) -> float:
    """Direct substitution into the four branch-flow equations."""
    worst = 0.0
    kids = [[] for _ in range(feeder.n + 1)]
    for parent, child, _, _ in feeder.branches:
        kids[parent].append(child)
    for j in range(1, feeder.n + 1):
        r, x = feeder.r[j - 1], feeder.x[j - 1]
        parent = int(feeder.parent[j - 1])
        v_par = feeder.v0 if parent == 0 else sol.v[parent - 1]
        worst = max(worst, abs(sol.v[j - 1] - v_par - 2 * r * sol.P[j - 1]
                               - 2 * x * sol.Q[j - 1] + (r * r + x * x) * sol.l[j - 1]))
        acc_p = p[j - 1] + sum(sol.P[h - 1] - feeder.r[h - 1] * sol.l[h - 1] for h in kids[j])
        acc_q = q[j - 1] + sum(sol.Q[h - 1] - feeder.x[h - 1] * sol.l[h - 1] for h in kids[j])
        worst = max(worst, abs(sol.P[j - 1] - acc_p), abs(sol.Q[j - 1] - acc_q))
        worst = max(worst, abs(sol.l[j - 1] - (sol.P[j - 1] ** 2 + sol.Q[j - 1] ** 2) / sol.v[j - 1]))
    return worst


def test_two_node_worked_case(two_node):
    sol = solve_distflow(two_node, np.array([-0.5]), np.array([0.0]))
    assert sol.converged
    assert sol.v[0] == pytest.approx(TWO_NODE_V1, abs=1e-10)
    assert sol.v[0] == pytest.approx(0.894410, abs=5e-7)
    assert sol.residual < 1e-8


def test_no_load_fixed_point(path3, ieee37):
    for feeder in (path3, ieee37[0]):
        n = feeder.n
        sol = solve_distflow(feeder, np.zeros(n), np.zeros(n))
        assert sol.converged
        assert np.allclose(sol.v, feeder.v0, atol=1e-14)
        assert not sol.l.any() and not sol.P.any() and not sol.Q.any()


def test_path3_residual_oracle(path3):
    p = np.array([-0.1, -0.15])
    q = np.array([-0.04, -0.05])
    sol = solve_distflow(path3, p, q)
    assert sol.converged
    assert residual_oracle(path3, p, q, sol) < 1e-8


def test_fixed_point_property_random(path3, star3):
    rng = np.random.default_rng(21)
    for feeder in (path3, star3):
        for _ in range(10):
            p = rng.uniform(-0.4, 0.4, feeder.n)
            q = rng.uniform(-0.2, 0.2, feeder.n)
            sol = solve_distflow(feeder, p, q)
            assert sol.converged
            assert residual_oracle(feeder, p, q, sol) < 1e-8


def test_two_node_exact_matches_sweep(two_node):
    rng = np.random.default_rng(4)
    for _ in range(20):
        p, q = rng.uniform(-0.6, 0.6, 2)
        exact = solve_two_node_exact(0.1, 0.1, p, q, 1.0)
        sol = solve_distflow(two_node, np.array([p]), np.array([q]))
        assert sol.converged
        assert abs(sol.v[0] - exact) < 1e-10


def test_two_node_exact_trivia():
    assert solve_two_node_exact(0.1, 0.1, 0.0, 0.0, 1.0) == pytest.approx(1.0)
    assert solve_two_node_exact(0.1, 0.1, -0.5, 0.0, 1.0) == pytest.approx(TWO_NODE_V1, abs=1e-15)


def test_two_node_no_solution():
    with pytest.raises(PowerFlowError, match="discriminant"):
        solve_two_node_exact(0.1, 0.1, -10.0, 0.0, 1.0)


def test_tangency_point(two_node, path3):
    """Linear and exact models coincide at zero injection with zero demand."""
    for feeder in (two_node, path3):
        zero = np.zeros(feeder.n)
        lin = solve_lindist(feeder, zero, zero)
        exact = solve_distflow(feeder, zero, zero)
        assert np.allclose(lin.v, feeder.v0, atol=1e-14)
        assert np.abs(lin.v - exact.v).max() < 1e-12


def test_lindist_two_node_overestimates(two_node):
    sol = solve_lindist(two_node, np.array([-0.5]), np.array([0.0]))
    assert sol.v[0] == pytest.approx(0.9, abs=1e-15)
    assert sol.v[0] > TWO_NODE_V1    # linear model overestimates under load
    assert sol.converged and sol.l[0] == 0.0


# -- admissibility -------------------------------------------------------------

def test_check_admissible_benign(two_node):
    report = check_admissible(two_node, np.zeros(1), np.zeros(1))
    assert report.clean
    assert not report.voltage and not report.current


def test_check_admissible_voltage_violation():
    feeder = FeederModel.build([(0, 1, 0.1, 0.1)], v0=1.0, l_max=4.0,
                               base_mva=1.0, base_kv=4.16,
                               v_min=0.95**2, v_max=1.05**2)
    report = check_admissible(feeder, np.array([-0.5]), np.array([0.0]))
    assert not report.clean
    (node, value, bound), = report.voltage
    assert node == 1
    assert value == pytest.approx(TWO_NODE_V1, abs=1e-9)
    assert bound == pytest.approx(0.9025)


def test_check_admissible_current_violation():
    feeder = FeederModel.build([(0, 1, 0.1, 0.1)], v0=1.0, l_max=0.2,
                               base_mva=1.0, base_kv=4.16)
    report = check_admissible(feeder, np.array([-0.5]), np.array([0.0]))
    l_exact = 0.25 / TWO_NODE_V1
    (branch, value, bound), = report.current
    assert branch == 1 and bound == pytest.approx(0.2)
    assert value == pytest.approx(l_exact, abs=1e-9)


def test_sampling_determinism(two_node):
    demand = DemandProfile(np.array([0.1]), np.array([0.03]), np.zeros(1), np.zeros(1))
    box = (np.zeros(1), np.array([0.6]))
    rep1 = sample_box_admissibility(two_node, demand, box, samples=50, seed=42)
    rep2 = sample_box_admissibility(two_node, demand, box, samples=50, seed=42)
    assert rep1.worst_violation == rep2.worst_violation
    assert rep1.overshoot == rep2.overshoot
    assert rep1.voltage == rep2.voltage and rep1.current == rep2.current
    rep3 = sample_box_admissibility(two_node, demand, box, samples=50, seed=43)
    assert rep3.n_checked == rep1.n_checked   # same layout, different draws


def test_empty_box_is_background_check(two_node):
    demand = DemandProfile(np.array([0.2]), np.array([0.05]), np.zeros(1), np.zeros(1))
    box = (np.zeros(1), np.zeros(1))
    rep = sample_box_admissibility(two_node, demand, box, samples=10, seed=0)
    single = check_admissible(two_node, -demand.p_load, -demand.q_load)
    assert rep.worst_violation == pytest.approx(single.worst_violation, abs=1e-15)
    assert rep.clean == single.clean


def test_inflated_box_shows_violations(two_node):
    """The audit has teeth: doubling an at-the-limit box must trip it."""
    demand = zero_demand(1)
    # exact upper hosting limit via the closed form, then double it
    limit = None
    for p in np.arange(0.0, 2.0, 1e-3):
        if solve_two_node_exact(0.1, 0.1, p, 0.0, 1.0) > two_node.v_max[0]:
            limit = p
            break
    assert limit is not None
    rep = sample_box_admissibility(two_node, demand, (np.zeros(1), np.array([2 * limit])),
                                   samples=50, seed=0)
    assert not rep.clean
    assert rep.voltage


def test_box_corners_order_and_cap():
    lo = np.zeros(3)
    hi = np.array([1.0, 2.0, 0.0])        # third coordinate has zero width
    corners = box_corners(lo, hi)
    assert len(corners) == 4               # 2 free coordinates
    assert corners[0].tolist() == [1.0, 2.0, 0.0]    # all-upper first
    assert corners[-1].tolist() == [0.0, 0.0, 0.0]
    lo8, hi8 = np.zeros(8), np.ones(8)
    capped = box_corners(lo8, hi8)
    assert len(capped) == 64
    assert capped[0].tolist() == [1.0] * 8


# -- SOCP relaxation -------------------------------------------------------------

def test_socp_two_node_not_exact():
    """Relaxation claims more injection than the AC model can host."""
    feeder = FeederModel.build([(0, 1, 0.1, 0.1)], v0=1.0, l_max=4.0,
                               base_mva=1.0, base_kv=4.16)
    demand = zero_demand(1)
    res = solve_socp_relaxation(feeder, demand, p_max=10.0)
    assert res.status == "optimal"
    assert np.max(res.v) <= feeder.v_max[0] + 1e-6      # claimed feasible
    true_v = solve_two_node_exact(0.1, 0.1, float(res.p_inj[0]), 0.0, 1.0)
    assert true_v > feeder.v_max[0] + 1e-6              # physically not


def test_socp_zero_cap(two_node):
    demand = zero_demand(1)
    res = solve_socp_relaxation(two_node, demand, p_max=0.0)
    assert res.status == "optimal"
    assert abs(res.p_inj[0]) < 1e-7


def test_socp_outer_bound_two_node(two_node):
    """Relaxation objective dominates the grid-search exact capacity."""
    demand = zero_demand(1)
    exact = 0.0
    for p in np.arange(0.0, 3.0, 1e-3):
        v = solve_two_node_exact(0.1, 0.1, p, 0.0, 1.0)
        if v > two_node.v_max[0] or p * p / v > two_node.l_max[0]:
            break
        exact = p
    res = solve_socp_relaxation(two_node, demand, p_max=10.0)
    assert res.objective >= exact - 1e-6


def test_socp_sweep_monotone(ieee37):
    feeder, demand = ieee37
    caps_mw = [0.0, 1.0, 2.5, 5.0, 10.0]
    claimed = []
    for cap in caps_mw:
        res = solve_socp_relaxation(feeder, demand, cap / feeder.base_mva)
        assert res.status == "optimal"
        claimed.append(res.max_voltage)
    assert all(b >= a - 1e-7 for a, b in zip(claimed, claimed[1:]))
