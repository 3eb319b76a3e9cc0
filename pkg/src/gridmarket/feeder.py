"""Feeder, demand and bid data model.

All physics is kept in per-unit internally: power on ``base_mva``, ``v``
is squared voltage magnitude (p.u.^2), ``l`` squared current magnitude
(p.u.^2).  MW and $/MW appear only at the I/O boundary.

Branches are indexed by their child node: node ``j`` (1..N) owns the
branch connecting it to ``parent[j]``.  Index 0 is always the substation,
which carries no demand and no bids and holds the fixed voltage ``v0``.
"""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ANSI_V_MIN = 0.95**2
ANSI_V_MAX = 1.05**2


class FeederError(ValueError):
    """Raised for malformed or physically invalid input data."""


def power_to_pu(value_mw, base_mva: float):
    return np.asarray(value_mw, dtype=float) / base_mva


def power_from_pu(value_pu, base_mva: float):
    return np.asarray(value_pu, dtype=float) * base_mva


def price_to_pu(k_per_mw, base_mva: float):
    """$/MW -> $/p.u.; a price per unit power scales with the power base."""
    return np.asarray(k_per_mw, dtype=float) * base_mva


def price_from_pu(k_per_pu, base_mva: float):
    return np.asarray(k_per_pu, dtype=float) / base_mva


def radial_order(n: int, edges) -> tuple[list[int], dict[int, int]]:
    """BFS the undirected edge list and return (topological order, parent map).

    ``edges`` are (a, b) pairs over nodes 0..n; orientation in the input is
    ignored and re-derived from the tree rooted at node 0.  Raises
    FeederError when the graph is not a tree rooted at 0 (wrong edge count,
    cycle, disconnected node, out-of-range endpoint).
    """
    if len(edges) != n:
        raise FeederError(f"not radial: {len(edges)} branches for {n} nodes (need exactly {n})")
    adj: dict[int, list[int]] = {i: [] for i in range(n + 1)}
    for a, b in edges:
        if not (0 <= a <= n and 0 <= b <= n):
            raise FeederError(f"branch endpoint out of range: ({a},{b})")
        if a == b:
            raise FeederError(f"not radial: self-loop at node {a}")
        adj[a].append(b)
        adj[b].append(a)
    parent: dict[int, int] = {}
    order: list[int] = []
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in sorted(adj[u]):
            if v == parent.get(u):
                continue
            if v in seen:
                raise FeederError("not radial: cycle detected")
            seen.add(v)
            parent[v] = u
            order.append(v)
            queue.append(v)
    if len(seen) != n + 1:
        missing = sorted(set(range(n + 1)) - seen)
        raise FeederError(f"not radial: disconnected node(s) {missing}")
    return order, parent


@dataclass
class FeederModel:
    """Radial feeder in per-unit, branch j = (parent[j-1] -> j).

    Arrays of length N are indexed by child node minus one.  ``v0``,
    ``v_min``, ``v_max`` are squared voltage magnitudes (p.u.^2); ``l_max``
    is squared current (p.u.^2).
    """

    n: int
    parent: np.ndarray
    r: np.ndarray
    x: np.ndarray
    l_max: np.ndarray
    v0: float
    v_min: np.ndarray
    v_max: np.ndarray
    base_mva: float
    base_kv: float
    names: tuple[str, ...] | None = None
    order: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=int)
        for attr in ("r", "x", "l_max", "v_min", "v_max"):
            setattr(self, attr, np.asarray(getattr(self, attr), dtype=float))
        n = self.n
        if n < 1:
            raise FeederError("feeder needs at least one non-substation node")
        for attr in ("parent", "r", "x", "l_max", "v_min", "v_max"):
            if getattr(self, attr).shape != (n,):
                raise FeederError(f"{attr} must have length N={n}")
        if self.base_mva <= 0 or self.base_kv <= 0:
            raise FeederError("per-unit bases must be positive")
        if np.any(self.r < 0):
            raise FeederError("branch resistance must be nonnegative")
        if np.any((self.r == 0) & (self.x == 0)):
            raise FeederError("branch impedance must be nonzero")
        if np.any(self.l_max <= 0):
            raise FeederError("branch current limit l_max must be positive (no default)")
        if np.any(self.v_min >= self.v_max):
            raise FeederError("v_min must be strictly below v_max at every node")
        if not (self.v_min.min() <= self.v0 <= self.v_max.max()):
            raise FeederError("substation voltage v0 outside the feeder voltage band")
        edges = [(int(self.parent[j - 1]), j) for j in range(1, n + 1)]
        order, par = radial_order(n, edges)
        if any(par[j] != int(self.parent[j - 1]) for j in range(1, n + 1)):
            raise FeederError("branch orientation inconsistent with tree rooted at 0")
        self.order = tuple(order)
        for attr in ("parent", "r", "x", "l_max", "v_min", "v_max"):
            getattr(self, attr).setflags(write=False)

    @classmethod
    def build(cls, branches, v0, l_max, base_mva, base_kv,
              v_min=None, v_max=None, names=None) -> "FeederModel":
        """Build from raw (from, to, r, x) tuples in either orientation.

        ``l_max`` maps branch position in ``branches`` to its limit (scalar
        or sequence aligned with ``branches``).
        """
        n = len(branches)
        edges = [(int(a), int(b)) for a, b, _, _ in branches]
        order, parent_map = radial_order(n, edges)
        parent = np.zeros(n, dtype=int)
        r = np.zeros(n)
        x = np.zeros(n)
        lm = np.zeros(n)
        l_max_arr = np.broadcast_to(np.asarray(l_max, dtype=float), (n,))
        for pos, (a, b, rb, xb) in enumerate(branches):
            a, b = int(a), int(b)
            child = b if parent_map.get(b) == a else a
            if parent_map.get(child) not in (a, b) or child == 0:
                raise FeederError(f"branch ({a},{b}) does not fit the tree rooted at 0")
            parent[child - 1] = a if child == b else b
            r[child - 1] = rb
            x[child - 1] = xb
            lm[child - 1] = l_max_arr[pos]
        vmin = np.full(n, ANSI_V_MIN) if v_min is None else np.broadcast_to(np.asarray(v_min, float), (n,)).copy()
        vmax = np.full(n, ANSI_V_MAX) if v_max is None else np.broadcast_to(np.asarray(v_max, float), (n,)).copy()
        return cls(n=n, parent=parent, r=r, x=x, l_max=lm, v0=float(v0),
                   v_min=vmin, v_max=vmax, base_mva=float(base_mva),
                   base_kv=float(base_kv), names=names)

    @property
    def branches(self) -> list[tuple[int, int, float, float]]:
        """(from, to, r, x) per branch, parent -> child orientation."""
        return [(int(self.parent[j - 1]), j, float(self.r[j - 1]), float(self.x[j - 1]))
                for j in range(1, self.n + 1)]

    def children(self) -> list[list[int]]:
        """children[j] = child nodes of node j, for j in 0..N."""
        out: list[list[int]] = [[] for _ in range(self.n + 1)]
        for j in range(1, self.n + 1):
            out[int(self.parent[j - 1])].append(j)
        return out

    def depth(self) -> np.ndarray:
        """Hop count from the substation per node 1..N."""
        d = np.zeros(self.n, dtype=int)
        for j in self.order:
            p = int(self.parent[j - 1])
            d[j - 1] = 1 if p == 0 else d[p - 1] + 1
        return d


def validate_radial(feeder: FeederModel) -> list[int]:
    """Topological order of nodes 1..N, every parent before its children."""
    edges = [(int(feeder.parent[j - 1]), j) for j in range(1, feeder.n + 1)]
    order, _ = radial_order(feeder.n, edges)
    return order


@dataclass
class DemandProfile:
    """Uncontrollable background demand and its robust bounds, per-unit.

    ``d_plus`` bounds the worst-case demand under-shoot (the stressing case
    when certifying upward flexibility); ``d_minus`` the worst-case
    over-shoot (stresses the downward direction).  Both are nonnegative.
    """

    p_load: np.ndarray
    q_load: np.ndarray
    d_plus: np.ndarray
    d_minus: np.ndarray

    def __post_init__(self):
        for attr in ("p_load", "q_load", "d_plus", "d_minus"):
            setattr(self, attr, np.asarray(getattr(self, attr), dtype=float))
        n = self.p_load.shape[0]
        for attr in ("q_load", "d_plus", "d_minus"):
            if getattr(self, attr).shape != (n,):
                raise FeederError(f"demand field {attr} must have length {n}")
        if np.any(self.d_plus < 0) or np.any(self.d_minus < 0):
            raise FeederError("uncertainty bounds must be nonnegative")

    @classmethod
    def zeros(cls, n: int) -> "DemandProfile":
        z = np.zeros(n)
        return cls(z.copy(), z.copy(), z.copy(), z.copy())


@dataclass
class AggregatorBid:
    """One Aggregator's nodal capacity offer: MW capacities and $/MW prices.

    ``p_bid_lower`` is the optional downward-flexibility capacity (MW,
    magnitude of extra consumption); None means the aggregator offers no
    lower range.
    """

    aggregator_id: str
    p_bid: np.ndarray
    k: np.ndarray
    p_bid_lower: np.ndarray | None = None

    def __post_init__(self):
        self.p_bid = np.asarray(self.p_bid, dtype=float)
        self.k = np.asarray(self.k, dtype=float)
        if self.k.shape != self.p_bid.shape:
            raise FeederError("bid capacity and price vectors must have equal length")
        if np.any(self.p_bid < 0):
            raise FeederError(f"negative capacity in bid '{self.aggregator_id}'")
        if np.any(self.k < 0):
            raise FeederError(f"negative price in bid '{self.aggregator_id}'")
        if self.p_bid_lower is not None:
            self.p_bid_lower = np.asarray(self.p_bid_lower, dtype=float)
            if self.p_bid_lower.shape != self.p_bid.shape:
                raise FeederError("lower-range capacity vector length mismatch")
            if np.any(self.p_bid_lower < 0):
                raise FeederError(f"negative lower-range capacity in bid '{self.aggregator_id}'")


@dataclass
class MarketScenario:
    """Everything one market run needs: grid, demand, bids, knobs."""

    feeder: FeederModel
    demand: DemandProfile
    bids: list[AggregatorBid]
    direction: str = "upper"
    epsilon_watts: float = 10.0
    robust: bool = False

    def __post_init__(self):
        if not self.bids:
            raise FeederError("a market scenario needs at least one bid")
        if self.direction not in ("upper", "lower"):
            raise FeederError(f"direction must be 'upper' or 'lower', got {self.direction!r}")
        if self.epsilon_watts <= 0:
            raise FeederError("epsilon must be positive")
        n = self.feeder.n
        for bid in self.bids:
            if bid.p_bid.shape != (n,):
                raise FeederError(f"bid '{bid.aggregator_id}' has {bid.p_bid.shape[0]} nodes, feeder has {n}")

    @property
    def epsilon_mw(self) -> float:
        return self.epsilon_watts * 1e-6

    def flexible_nodes(self) -> list[int]:
        """Nodes (1..N) where any aggregator offers positive capacity."""
        total = np.sum([b.p_bid for b in self.bids], axis=0)
        return [j + 1 for j in range(self.feeder.n) if total[j] > 0]


# ---------------------------------------------------------------------------
# file loading


def _detect_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("json", "csv"):
            raise FeederError(f"unknown format {fmt!r}")
        return fmt
    suffix = path.suffix.lower().lstrip(".")
    if suffix in ("json", "csv"):
        return suffix
    raise FeederError(f"cannot infer format of {path} (use .json or .csv)")


def _feeder_dict_from_csv(path: Path) -> dict:
    """Re-assemble the JSON-shaped dict from the CSV mirror (kind column)."""
    doc: dict = {"nodes": [], "branches": []}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kind = (row.get("kind") or "").strip()
            get = lambda key: row.get(key) if row.get(key) not in (None, "") else None
            if kind == "base":
                doc["base_mva"] = float(row["base_mva"])
                doc["base_kv"] = float(row["base_kv"])
                doc["v0_pu2"] = float(row["v0_pu2"])
            elif kind == "node":
                node = {"id": int(row["id"])}
                for key in ("v_min_pu2", "v_max_pu2", "p_load_mw", "q_load_mvar",
                            "d_plus_mw", "d_minus_mw"):
                    if get(key) is not None:
                        node[key] = float(row[key])
                doc["nodes"].append(node)
            elif kind == "branch":
                branch = {"from": int(row["from"]), "to": int(row["to"]),
                          "r_pu": float(row["r_pu"]), "x_pu": float(row["x_pu"])}
                if get("l_max_pu2") is not None:
                    branch["l_max_pu2"] = float(row["l_max_pu2"])
                doc["branches"].append(branch)
            elif kind:
                raise FeederError(f"unknown row kind {kind!r} in {path}")
    return doc


def _load_feeder_doc(path: Path, fmt: str | None) -> dict:
    fmt = _detect_format(path, fmt)
    if fmt == "json":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FeederError(f"malformed JSON in {path}: {exc}") from exc
    else:
        doc = _feeder_dict_from_csv(path)
    if not isinstance(doc, dict) or "branches" not in doc:
        raise FeederError(f"{path} is not a feeder file (no branches)")
    return doc


def load_feeder(path, fmt: str | None = None) -> FeederModel:
    """Load and validate a feeder file (JSON schema or its CSV mirror).

    Node ids must be contiguous 1..N with node 0 the (implicit) substation.
    Voltage limits default to ANSI [0.95^2, 1.05^2]; branch current limits
    are mandatory.
    """
    return feeder_from_dict(_load_feeder_doc(Path(path), fmt))


def feeder_from_dict(doc: dict) -> FeederModel:
    """Validate a feeder document already parsed into the JSON schema shape."""
    for key in ("base_mva", "base_kv", "v0_pu2"):
        if key not in doc:
            raise FeederError(f"feeder file missing {key!r}")
    nodes = doc.get("nodes", [])
    ids = sorted(int(nd["id"]) for nd in nodes)
    n = len(ids)
    if ids != list(range(1, n + 1)):
        raise FeederError("node ids must be exactly 1..N (0 is the implicit substation)")
    v_min = np.full(n, ANSI_V_MIN)
    v_max = np.full(n, ANSI_V_MAX)
    names: list[str] = [""] * n
    for nd in nodes:
        j = int(nd["id"]) - 1
        v_min[j] = float(nd.get("v_min_pu2", ANSI_V_MIN))
        v_max[j] = float(nd.get("v_max_pu2", ANSI_V_MAX))
        names[j] = str(nd.get("name", nd["id"]))
    branches = []
    l_max = []
    for br in doc["branches"]:
        if "l_max_pu2" not in br:
            raise FeederError(f"branch ({br.get('from')},{br.get('to')}) missing l_max_pu2 (no safe default)")
        branches.append((int(br["from"]), int(br["to"]), float(br["r_pu"]), float(br["x_pu"])))
        l_max.append(float(br["l_max_pu2"]))
    return FeederModel.build(branches, v0=float(doc["v0_pu2"]), l_max=l_max,
                             base_mva=float(doc["base_mva"]), base_kv=float(doc["base_kv"]),
                             v_min=v_min, v_max=v_max, names=tuple(names))


def load_demand(path, feeder: FeederModel, fmt: str | None = None) -> DemandProfile:
    """Extract the demand profile from a feeder file or a nodes-only file."""
    path = Path(path)
    doc = _feeder_dict_from_csv(path) if _detect_format(path, fmt) == "csv" else None
    if doc is None:
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FeederError(f"malformed JSON in {path}: {exc}") from exc
    return demand_from_dict(doc, feeder)


def demand_from_dict(doc: dict, feeder: FeederModel) -> DemandProfile:
    """Demand profile from node records (MW/Mvar fields, converted to p.u.)."""
    nodes = doc.get("nodes", [])
    n = feeder.n
    p = np.zeros(n)
    q = np.zeros(n)
    dp = np.zeros(n)
    dm = np.zeros(n)
    for nd in nodes:
        j = int(nd["id"])
        if not 1 <= j <= n:
            raise FeederError(f"demand row references unknown node {j}")
        p[j - 1] = float(nd.get("p_load_mw", 0.0))
        q[j - 1] = float(nd.get("q_load_mvar", 0.0))
        dp[j - 1] = float(nd.get("d_plus_mw", 0.0))
        dm[j - 1] = float(nd.get("d_minus_mw", 0.0))
    base = feeder.base_mva
    return DemandProfile(power_to_pu(p, base), power_to_pu(q, base),
                         power_to_pu(dp, base), power_to_pu(dm, base))


def load_bids(path, feeder: FeederModel, fmt: str | None = None) -> list[AggregatorBid]:
    """Load aggregator bids (JSON schema or CSV mirror); capacities stay in MW."""
    path = Path(path)
    fmt = _detect_format(path, fmt)
    n = feeder.n
    entries: dict[str, dict[str, np.ndarray]] = {}

    def slot(agg_id: str) -> dict[str, np.ndarray]:
        return entries.setdefault(agg_id, {
            "p": np.zeros(n), "k": np.zeros(n), "lo": np.zeros(n), "has_lo": np.zeros(n, dtype=bool),
        })

    if fmt == "json":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FeederError(f"malformed JSON in {path}: {exc}") from exc
        for agg in doc.get("aggregators", []):
            rec = slot(str(agg["id"]))
            for nd in agg.get("nodal", []):
                j = int(nd["node"])
                if not 1 <= j <= n:
                    raise FeederError(f"bid references unknown node {j} (feeder has 1..{n})")
                rec["p"][j - 1] = float(nd["p_bid_mw"])
                rec["k"][j - 1] = float(nd["k_per_mw"])
                if "p_bid_lower_mw" in nd:
                    rec["lo"][j - 1] = float(nd["p_bid_lower_mw"])
                    rec["has_lo"][j - 1] = True
    else:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rec = slot(str(row["aggregator"]))
                j = int(row["node"])
                if not 1 <= j <= n:
                    raise FeederError(f"bid references unknown node {j} (feeder has 1..{n})")
                rec["p"][j - 1] = float(row["p_bid_mw"])
                rec["k"][j - 1] = float(row["k_per_mw"])
                if row.get("p_bid_lower_mw") not in (None, ""):
                    rec["lo"][j - 1] = float(row["p_bid_lower_mw"])
                    rec["has_lo"][j - 1] = True
    if not entries:
        raise FeederError(f"no aggregator bids found in {path}")
    bids = []
    for agg_id, rec in entries.items():
        lower = rec["lo"] if rec["has_lo"].any() else None
        bids.append(AggregatorBid(agg_id, rec["p"], rec["k"], p_bid_lower=lower))
    return bids


def feeder_to_dict(feeder: FeederModel, demand: DemandProfile | None = None) -> dict:
    """Inverse of feeder_from_dict/demand_from_dict (for scenario export)."""
    base = feeder.base_mva
    nodes = []
    for j in range(1, feeder.n + 1):
        node = {"id": j,
                "v_min_pu2": float(feeder.v_min[j - 1]),
                "v_max_pu2": float(feeder.v_max[j - 1])}
        if feeder.names:
            node["name"] = feeder.names[j - 1]
        if demand is not None:
            node["p_load_mw"] = float(demand.p_load[j - 1] * base)
            node["q_load_mvar"] = float(demand.q_load[j - 1] * base)
            node["d_plus_mw"] = float(demand.d_plus[j - 1] * base)
            node["d_minus_mw"] = float(demand.d_minus[j - 1] * base)
        nodes.append(node)
    branches = [{"from": int(feeder.parent[j - 1]), "to": j,
                 "r_pu": float(feeder.r[j - 1]), "x_pu": float(feeder.x[j - 1]),
                 "l_max_pu2": float(feeder.l_max[j - 1])}
                for j in range(1, feeder.n + 1)]
    return {"base_mva": feeder.base_mva, "base_kv": feeder.base_kv,
            "v0_pu2": feeder.v0, "nodes": nodes, "branches": branches}


def bids_to_dict(bids: list[AggregatorBid]) -> dict:
    """Bids in the JSON schema shape (only nodes with any offer listed)."""
    aggregators = []
    for bid in bids:
        nodal = []
        for j in range(bid.p_bid.shape[0]):
            has_lower = bid.p_bid_lower is not None and bid.p_bid_lower[j] > 0
            if bid.p_bid[j] > 0 or bid.k[j] > 0 or has_lower:
                entry = {"node": j + 1, "p_bid_mw": float(bid.p_bid[j]),
                         "k_per_mw": float(bid.k[j])}
                if bid.p_bid_lower is not None:
                    entry["p_bid_lower_mw"] = float(bid.p_bid_lower[j])
                nodal.append(entry)
        aggregators.append({"id": bid.aggregator_id, "nodal": nodal})
    return {"aggregators": aggregators}
