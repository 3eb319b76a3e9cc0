"""Command-line surface for the market pipeline.

Exit codes: 0 success, 1 input error, 2 solver failure, 3 admissibility
audit violation (a soundness bug; must never happen).  All written files
are deterministic given inputs and seed; nothing is ever written back to
the input files.  GRIDMARKET_SOLVER selects the conic backend.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import scenarios
from .compare import METHODS, hosting_sweep
from .feeder import (FeederError, MarketScenario, bids_to_dict, feeder_to_dict,
                     load_bids, load_demand, load_feeder)
from .market import (AllocationResult, FeasibilityResult, MarketError,
                     audit_allocation, run_market, step1_feasibility, step2_allocate)
from .matrices import build_matrices
from .cia import compute_operating_point
from .program import BackendError
from .serialize import dump_csv, dump_json, round12

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_SOLVER = 2
EXIT_AUDIT = 3


def _fail(code: int, errors: list[str]) -> None:
    click.echo(json.dumps({"errors": errors}, sort_keys=True))
    sys.exit(code)


def _load_scenario(feeder_path, bids_path, demand_path, direction, robust,
                   epsilon_watts) -> MarketScenario:
    feeder = load_feeder(feeder_path)
    demand = load_demand(demand_path if demand_path else feeder_path, feeder)
    bids = load_bids(bids_path, feeder)
    return MarketScenario(feeder=feeder, demand=demand, bids=bids,
                          direction=direction, robust=robust,
                          epsilon_watts=epsilon_watts)


def common_options(fn):
    fn = click.option("--feeder", "feeder_path", required=True,
                      type=click.Path(exists=True), help="Feeder file (JSON or CSV).")(fn)
    fn = click.option("--bids", "bids_path", required=True,
                      type=click.Path(exists=True), help="Aggregator bids file.")(fn)
    fn = click.option("--demand", "demand_path", default=None,
                      type=click.Path(exists=True),
                      help="Separate demand file (defaults to the feeder file).")(fn)
    fn = click.option("--direction", type=click.Choice(["upper", "lower"]),
                      default="upper", show_default=True)(fn)
    fn = click.option("--robust", is_flag=True, help="Harden against demand uncertainty.")(fn)
    fn = click.option("--epsilon-watts", type=float, default=10.0, show_default=True,
                      help="Slack tolerance deciding the accept-all branch.")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), default=".", show_default=True)(fn)
    fn = click.option("--format", "report_format", type=click.Choice(["json", "csv"]),
                      default="json", show_default=True, help="Stdout summary format.")(fn)
    fn = click.option("--solver", default=None, help="Conic backend override.")(fn)
    fn = click.option("--price-rule", type=click.Choice(["min-allocated", "first-rejected"]),
                      default="min-allocated", show_default=True,
                      help="Clearing price interpretation.")(fn)
    return fn


@click.group()
def main():
    """Grid-aware flexibility market clearing on radial feeders."""


def _feasibility_doc(res: FeasibilityResult, base_mva: float) -> dict:
    return {
        "direction": res.direction, "robust": res.robust,
        "feasible": res.feasible, "max_slack_mw": res.max_slack_mw,
        "epsilon_mw": res.epsilon_mw,
        "slack_mw": res.slack_pu * base_mva,
    }


def _allocation_doc(res: AllocationResult) -> dict:
    return {
        "direction": res.direction, "robust": res.robust,
        "aggregators": res.aggregator_ids,
        "allocation_mw": res.allocation_mw,
        "clearing_price_per_mw": res.clearing_price,
        "price_defined": [bool(b) for b in res.price_defined],
        "dno_revenue": res.dno_revenue,
        "nodal_fraction": res.nodal_fraction,
        "aggregator_fraction": res.aggregator_fraction,
        "objective": res.objective,
        "tie_flagged_nodes": res.tie_flagged_nodes,
    }


def _write_allocation_files(res: AllocationResult, scenario: MarketScenario, out: Path) -> None:
    dump_json(_allocation_doc(res), out / "allocation.json")
    names = scenario.feeder.names or tuple(str(j) for j in range(1, scenario.feeder.n + 1))
    dump_csv(out / "prices.csv",
             ["node", "name", "clearing_price_per_mw", "defined"],
             [[j + 1, names[j], res.clearing_price[j], str(bool(res.price_defined[j])).lower()]
              for j in range(scenario.feeder.n)])
    header = ["node", "name"] + list(res.aggregator_ids) + ["total_mw"]
    rows = []
    for j in range(scenario.feeder.n):
        rows.append([j + 1, names[j]] + [res.allocation_mw[m, j] for m in range(len(res.aggregator_ids))]
                    + [res.allocation_mw[:, j].sum()])
    dump_csv(out / "allocation.csv", header, rows)


def _audit_doc(report, samples: int, seed: int) -> dict:
    return {
        "samples": samples, "seed": seed, "tol": report.tol,
        "n_checked": report.n_checked, "n_violating": report.n_violating,
        "clean": report.clean, "converged": report.converged,
        "worst_violation": report.worst_violation, "overshoot": report.overshoot,
        "voltage_violations": [{"node": n, "v_pu2": v, "bound_pu2": b}
                               for n, v, b in report.voltage],
        "current_violations": [{"branch": n, "l_pu2": v, "bound_pu2": b}
                               for n, v, b in report.current],
    }


def _summary(payload: dict, report_format: str) -> None:
    if report_format == "json":
        click.echo(json.dumps(payload, sort_keys=True))
    else:
        click.echo(",".join(f"{k}={v}" for k, v in sorted(payload.items())))


def _maybe_dumps(feeder, demand, out: Path, dump_matrices: bool, dump_cia: bool) -> None:
    if dump_matrices:
        mats = build_matrices(feeder)
        mdir = out / "matrices"
        mdir.mkdir(parents=True, exist_ok=True)
        for name in ("B", "A", "C", "D_R", "D_X", "M_p", "M_q", "H",
                     "D_X_plus", "D_X_minus", "H_plus", "H_minus"):
            mat = getattr(mats, name)
            dump_csv(mdir / f"{name}.csv", [f"c{c}" for c in range(mat.shape[1])],
                     [list(row) for row in mat])
    if dump_cia:
        op = compute_operating_point(feeder, demand)
        eigs = np.linalg.eigvalsh(op.H_e)
        dump_csv(out / "cia_branches.csv",
                 ["branch", "P0", "Q0", "v0_child", "l0", "J_P", "J_Q", "J_v",
                  "eig1", "eig2", "eig3"],
                 [[j + 1, op.P0[j], op.Q0[j], op.v0j[j], op.l0[j],
                   op.J[j, 0], op.J[j, 1], op.J[j, 2],
                   eigs[j, 0], eigs[j, 1], eigs[j, 2]] for j in range(len(op.l0))])


@main.command()
@common_options
def validate(feeder_path, bids_path, demand_path, direction, robust,
             epsilon_watts, out_dir, report_format, solver, price_rule):
    """Load and validate all inputs; exit 0 iff everything is consistent."""
    try:
        scenario = _load_scenario(feeder_path, bids_path, demand_path,
                                  direction, robust, epsilon_watts)
    except FeederError as exc:
        _fail(EXIT_INPUT, [str(exc)])
        return
    _summary({"valid": True, "nodes": scenario.feeder.n,
              "aggregators": len(scenario.bids),
              "flexible_nodes": len(scenario.flexible_nodes())}, report_format)


@main.command()
@common_options
@click.option("--dump-matrices", is_flag=True, help="Write one CSV per model matrix.")
@click.option("--dump-cia", is_flag=True, help="Write per-branch Taylor data CSV.")
def step1(feeder_path, bids_path, demand_path, direction, robust, epsilon_watts,
          out_dir, report_format, solver, price_rule, dump_matrices, dump_cia):
    """Feasibility certificate: can the feeder host every bid in full?"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        scenario = _load_scenario(feeder_path, bids_path, demand_path,
                                  direction, robust, epsilon_watts)
    except FeederError as exc:
        _fail(EXIT_INPUT, [str(exc)])
        return
    try:
        res = step1_feasibility(scenario, solver=solver)
        _maybe_dumps(scenario.feeder, scenario.demand, out, dump_matrices, dump_cia)
    except (MarketError, BackendError) as exc:
        _fail(EXIT_SOLVER, [str(exc)])
        return
    dump_json(_feasibility_doc(res, scenario.feeder.base_mva), out / "feasibility.json")
    _summary({"feasible": res.feasible, "max_slack_mw": round12(res.max_slack_mw)},
             report_format)


@main.command()
@common_options
def clear(feeder_path, bids_path, demand_path, direction, robust, epsilon_watts,
          out_dir, report_format, solver, price_rule):
    """Run the allocation step standalone (regardless of the certificate)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        scenario = _load_scenario(feeder_path, bids_path, demand_path,
                                  direction, robust, epsilon_watts)
    except FeederError as exc:
        _fail(EXIT_INPUT, [str(exc)])
        return
    try:
        res = step2_allocate(scenario, solver=solver, price_rule=price_rule)
    except (MarketError, BackendError) as exc:
        _fail(EXIT_SOLVER, [str(exc)])
        return
    _write_allocation_files(res, scenario, out)
    _summary({"dno_revenue": round12(res.dno_revenue),
              "total_allocation_mw": round12(float(res.allocation_mw.sum()))},
             report_format)


@main.command()
@common_options
@click.option("--audit-samples", type=click.IntRange(min=0), default=200, show_default=True,
              help="Exact-model samples of the cleared box (0 disables the audit).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--dump-matrices", is_flag=True)
@click.option("--dump-cia", is_flag=True)
def run(feeder_path, bids_path, demand_path, direction, robust, epsilon_watts,
        out_dir, report_format, solver, price_rule, audit_samples, seed,
        dump_matrices, dump_cia):
    """Full two-step market flow plus the post-clearing admissibility audit."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        scenario = _load_scenario(feeder_path, bids_path, demand_path,
                                  direction, robust, epsilon_watts)
    except FeederError as exc:
        _fail(EXIT_INPUT, [str(exc)])
        return
    try:
        outcome = run_market(scenario, solver=solver, price_rule=price_rule)
        _maybe_dumps(scenario.feeder, scenario.demand, out, dump_matrices, dump_cia)
    except (MarketError, BackendError) as exc:
        _fail(EXIT_SOLVER, [str(exc)])
        return
    dump_json(_feasibility_doc(outcome.feasibility, scenario.feeder.base_mva),
              out / "feasibility.json")
    if outcome.accepted_all:
        click.echo(f"ACCEPTED ALL (max slack {outcome.feasibility.max_slack_mw:.3f} MW"
                   f" <= {outcome.feasibility.epsilon_mw:.6f} MW)")
        allocation_mw = np.vstack([b.p_bid if direction == "upper"
                                   else (b.p_bid_lower if b.p_bid_lower is not None
                                         else np.zeros_like(b.p_bid))
                                   for b in scenario.bids])
    else:
        res = outcome.allocation
        _write_allocation_files(res, scenario, out)
        click.echo(f"CLEARED (max slack {outcome.feasibility.max_slack_mw:.3f} MW,"
                   f" revenue ${res.dno_revenue:.2f},"
                   f" total {res.allocation_mw.sum():.3f} MW)")
        allocation_mw = res.allocation_mw
    if audit_samples > 0:
        report = audit_allocation(scenario, allocation_mw, samples=audit_samples, seed=seed)
        dump_json(_audit_doc(report, audit_samples, seed), out / "audit.json")
        if not report.clean:
            click.echo(f"AUDIT VIOLATION: worst {report.worst_violation:.3e} beyond tolerance")
            sys.exit(EXIT_AUDIT)
        click.echo(f"audit clean ({report.n_checked} dispatches)")
    sys.exit(EXIT_OK)


@main.command()
@click.option("--feeder", "feeder_path", required=True, type=click.Path(exists=True))
@click.option("--demand", "demand_path", default=None, type=click.Path(exists=True))
@click.option("--p-max-grid", required=True,
              help="Comma-separated total-injection caps in MW, e.g. '0,1,2,5,10'.")
@click.option("--methods", default=",".join(METHODS), show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default=".", show_default=True)
@click.option("--solver", default=None)
def compare(feeder_path, demand_path, p_max_grid, methods, out_dir, solver):
    """Hosting-capacity sweep CSV: claimed vs exact voltage per method."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        feeder = load_feeder(feeder_path)
        demand = load_demand(demand_path if demand_path else feeder_path, feeder)
        grid = [float(tok) for tok in p_max_grid.split(",") if tok.strip() != ""]
        method_list = tuple(m.strip() for m in methods.split(",") if m.strip())
        unknown = set(method_list) - set(METHODS)
        if unknown:
            raise FeederError(f"unknown methods: {sorted(unknown)}")
    except (FeederError, ValueError) as exc:
        _fail(EXIT_INPUT, [str(exc)])
        return
    try:
        rows = hosting_sweep(feeder, demand, grid, methods=method_list, solver=solver)
    except BackendError as exc:
        _fail(EXIT_SOLVER, [str(exc)])
        return
    dump_csv(out / "compare.csv",
             ["p_max_mw", "method", "claimed_injection_mw", "claimed_max_v_pu2",
              "true_max_v_pu2", "status"],
             [[r.p_max_mw, r.method, r.claimed_injection_mw, r.claimed_max_v,
               r.true_max_v, r.status] for r in rows])
    click.echo(f"wrote {len(rows)} sweep rows to {out / 'compare.csv'}")


@main.command("make-scenario")
@click.option("--name", type=click.Choice(["two-node", "three-node", "eight-node",
                                           "ieee37", "ieee37-feeder-prices"]),
              required=True)
@click.option("--out", "out_dir", type=click.Path(), default=".", show_default=True)
def make_scenario(name, out_dir):
    """Write the packaged example scenarios as feeder.json + bids.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if name == "two-node":
        feeder = scenarios.two_node_feeder()
        dump_json(feeder_to_dict(feeder), out / "feeder.json")
        click.echo(f"wrote {out / 'feeder.json'} (no bids for the two-node instrument)")
        return
    if name == "three-node":
        scenario = scenarios.three_node_scenario()
    elif name == "eight-node":
        scenario = scenarios.eight_node_scenario()
    elif name == "ieee37":
        scenario = scenarios.ieee37_scenario(nodal_pricing=True)
    else:
        scenario = scenarios.ieee37_scenario(nodal_pricing=False)
    dump_json(feeder_to_dict(scenario.feeder, scenario.demand), out / "feeder.json")
    dump_json(bids_to_dict(scenario.bids), out / "bids.json")
    click.echo(f"wrote {out / 'feeder.json'} and {out / 'bids.json'}")


if __name__ == "__main__":
    main()
