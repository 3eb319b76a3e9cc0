"""Balanced single-phase equivalent of the IEEE 37-node test feeder.

The published feeder is a 4.8 kV underground delta system.  This module
reduces each three-phase line configuration to its positive-sequence
impedance z1 = mean(diagonal) - mean(off-diagonal) of the phase impedance
matrix, sums spot loads across phases (all treated as constant PQ), and
renumbers nodes 1..36 in breadth-first order from the substation (799).
Branch ampacity limits are nominal cable ratings; the 709-775 transformer
is modelled as an impedance branch at its nameplate.
"""

from __future__ import annotations

from collections import deque

import numpy as np

# phase impedance matrices, ohms per mile (r, x) per entry
CONFIG_Z = {
    721: [[(0.2926, 0.1973), (0.0673, -0.0368), (0.0337, -0.0417)],
          [(0.0673, -0.0368), (0.2646, 0.1900), (0.0673, -0.0368)],
          [(0.0337, -0.0417), (0.0673, -0.0368), (0.2926, 0.1973)]],
    722: [[(0.4751, 0.2973), (0.1629, -0.0326), (0.1234, -0.0607)],
          [(0.1629, -0.0326), (0.4488, 0.2678), (0.1629, -0.0326)],
          [(0.1234, -0.0607), (0.1629, -0.0326), (0.4751, 0.2973)]],
    723: [[(1.2936, 0.6713), (0.4871, 0.2111), (0.4585, 0.1521)],
          [(0.4871, 0.2111), (1.3022, 0.6326), (0.4871, 0.2111)],
          [(0.4585, 0.1521), (0.4871, 0.2111), (1.2936, 0.6713)]],
    724: [[(2.0952, 0.7758), (0.5204, 0.2738), (0.4926, 0.2123)],
          [(0.5204, 0.2738), (2.1068, 0.7398), (0.5204, 0.2738)],
          [(0.4926, 0.2123), (0.5204, 0.2738), (2.0952, 0.7758)]],
}

# (from, to, length_ft, config); 799 is the substation bus
SEGMENTS = [
    (799, 701, 1850, 721),
    (701, 702, 960, 722),
    (702, 705, 400, 724),
    (702, 713, 360, 723),
    (702, 703, 1320, 722),
    (703, 727, 240, 724),
    (703, 730, 600, 723),
    (704, 714, 80, 724),
    (704, 720, 800, 723),
    (705, 742, 320, 724),
    (705, 712, 240, 724),
    (706, 725, 280, 724),
    (707, 724, 760, 724),
    (707, 722, 120, 724),
    (708, 733, 320, 723),
    (708, 732, 320, 724),
    (709, 731, 600, 723),
    (709, 708, 320, 723),
    (710, 735, 200, 724),
    (710, 736, 1280, 724),
    (711, 741, 400, 723),
    (711, 740, 200, 724),
    (713, 704, 520, 723),
    (714, 718, 520, 724),
    (720, 707, 920, 724),
    (720, 706, 600, 723),
    (727, 744, 280, 723),
    (730, 709, 200, 723),
    (733, 734, 560, 723),
    (734, 737, 640, 723),
    (734, 710, 520, 724),
    (737, 738, 400, 723),
    (738, 711, 400, 723),
    (744, 728, 200, 724),
    (744, 729, 280, 724),
]

# spot loads summed over phases: node -> (kW, kvar); feeder total 2457 kW / 1201 kvar
SPOT_LOADS = {
    701: (630, 315), 712: (85, 40), 713: (85, 40), 714: (38, 18),
    718: (85, 40), 720: (85, 40), 722: (161, 80), 724: (42, 21),
    725: (42, 21), 727: (42, 21), 728: (126, 63), 729: (42, 21),
    730: (85, 40), 731: (85, 40), 732: (42, 21), 733: (85, 40),
    734: (42, 21), 735: (85, 40), 736: (42, 21), 737: (140, 70),
    738: (126, 62), 740: (85, 40), 741: (42, 21), 742: (93, 44),
    744: (42, 21),
}

# nominal cable ampacity per configuration (amps per phase)
AMPACITY_A = {721: 580.0, 722: 405.0, 723: 230.0, 724: 135.0}

# XFM-1 between 709 and 775: 500 kVA, 4.8/0.48 kV, nameplate impedance (%)
XFM = {"from": 709, "to": 775, "kva": 500.0, "r_pct": 1.81, "x_pct": 2.72}

BASE_KV = 4.8
FEET_PER_MILE = 5280.0


def positive_sequence_ohm_per_mile(config: int) -> complex:
    """z1 = average self impedance minus average mutual impedance."""
    Z = CONFIG_Z[config]
    diag = sum(complex(*Z[i][i]) for i in range(3)) / 3.0
    off = sum(complex(*Z[i][j]) for i in range(3) for j in range(3) if i != j) / 6.0
    return diag - off


def node_numbering() -> dict[int, int]:
    """BFS renumbering from 799 (-> 0); neighbors visited in sorted order."""
    adj: dict[int, list[int]] = {}
    for a, b, _, _ in SEGMENTS + [(XFM["from"], XFM["to"], 0, 0)]:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    mapping = {799: 0}
    queue = deque([799])
    while queue:
        u = queue.popleft()
        for v in sorted(adj[u]):
            if v not in mapping:
                mapping[v] = len(mapping)
                queue.append(v)
    return mapping


def feeder_dict(base_mva: float = 2.5, v0_pu2: float = 1.0,
                v_min_pu2: float = 0.95**2, v_max_pu2: float = 1.05**2,
                load_scale: float = 1.0) -> dict:
    """The feeder-file document (JSON schema) for the balanced equivalent."""
    z_base = BASE_KV**2 / base_mva
    i_base_a = base_mva * 1e3 / (np.sqrt(3.0) * BASE_KV)
    mapping = node_numbering()
    inverse = {v: k for k, v in mapping.items()}

    branches = []
    for a, b, length_ft, config in SEGMENTS:
        z1 = positive_sequence_ohm_per_mile(config) * (length_ft / FEET_PER_MILE)
        l_max = (AMPACITY_A[config] / i_base_a) ** 2
        branches.append({
            "from": mapping[a], "to": mapping[b],
            "r_pu": z1.real / z_base, "x_pu": z1.imag / z_base,
            "l_max_pu2": l_max,
        })
    # transformer branch: nameplate % impedance rebased to the feeder base
    rebase = base_mva / (XFM["kva"] / 1000.0)
    s_rated_pu = (XFM["kva"] / 1000.0) / base_mva
    branches.append({
        "from": mapping[XFM["from"]], "to": mapping[XFM["to"]],
        "r_pu": XFM["r_pct"] / 100.0 * rebase, "x_pu": XFM["x_pct"] / 100.0 * rebase,
        "l_max_pu2": (s_rated_pu / 0.9) ** 2,
    })

    nodes = []
    for idx in range(1, len(mapping)):
        name = inverse[idx]
        kw, kvar = SPOT_LOADS.get(name, (0.0, 0.0))
        nodes.append({
            "id": idx, "name": str(name),
            "v_min_pu2": v_min_pu2, "v_max_pu2": v_max_pu2,
            "p_load_mw": kw / 1000.0 * load_scale,
            "q_load_mvar": kvar / 1000.0 * load_scale,
            "d_plus_mw": 0.0, "d_minus_mw": 0.0,
        })
    return {"base_mva": base_mva, "base_kv": BASE_KV, "v0_pu2": v0_pu2,
            "nodes": nodes, "branches": branches}
