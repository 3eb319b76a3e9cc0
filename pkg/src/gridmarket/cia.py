"""Convex inner approximation of the branch-flow feasible set.

Each branch carries second-order Taylor data of the squared current
l(P, Q, v) = (P^2 + Q^2)/v around the nominal operating point.  The
quadratic-over-linear form has Jacobian

    J = [2P/v, 2Q/v, -(P^2+Q^2)/v^2]

and positive semidefinite Hessian

    H_e = [[2/v, 0, -2P/v^2], [0, 2/v, -2Q/v^2],
           [-2P/v^2, -2Q/v^2, 2(P^2+Q^2)/v^3]]

(rank <= 2: the third row is -(P/v) row1 - (Q/v) row2).  The bound system
couples proxy current bounds (l_lb, l_ub) with worst-case envelopes
P/Q/V +- through sign-split sensitivity matrices; every point satisfying
it is admissible for the exact nonlinear model.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .distflow import PowerFlowError, solve_distflow
from .feeder import DemandProfile, FeederModel
from .matrices import NetworkMatrices, sign_split
from .program import ConvexProgram, VarHandle

PSD_CLIP = 1e-10

CORNER_PATTERNS = tuple(product((0, 1), repeat=3))  # 0 -> delta_plus, 1 -> delta_minus


def current_value(P: float, Q: float, v: float) -> float:
    return (P * P + Q * Q) / v


def current_jacobian(P: float, Q: float, v: float) -> np.ndarray:
    return np.array([2 * P / v, 2 * Q / v, -(P * P + Q * Q) / (v * v)])


def current_hessian(P: float, Q: float, v: float) -> np.ndarray:
    v2 = v * v
    v3 = v2 * v
    return np.array([
        [2 / v, 0.0, -2 * P / v2],
        [0.0, 2 / v, -2 * Q / v2],
        [-2 * P / v2, -2 * Q / v2, 2 * (P * P + Q * Q) / v3],
    ])


def taylor_current(x0, delta) -> float:
    """Second-order estimate of l at x0 + delta, x0 = (P0, Q0, v0)."""
    P0, Q0, v0 = (float(c) for c in x0)
    delta = np.asarray(delta, dtype=float)
    J = current_jacobian(P0, Q0, v0)
    H = current_hessian(P0, Q0, v0)
    return current_value(P0, Q0, v0) + float(J @ delta) + 0.5 * float(delta @ H @ delta)


def corner_deltas(delta_plus, delta_minus) -> np.ndarray:
    """All 8 per-coordinate selections of delta+/delta-, shape (8, 3)."""
    dp = np.asarray(delta_plus, dtype=float)
    dm = np.asarray(delta_minus, dtype=float)
    corners = np.empty((len(CORNER_PATTERNS), 3))
    for row, pattern in enumerate(CORNER_PATTERNS):
        for coord, pick in enumerate(pattern):
            corners[row, coord] = dm[coord] if pick else dp[coord]
    return corners


def psd_factor(H: np.ndarray, clip: float = PSD_CLIP) -> np.ndarray:
    """Factor E with E.T @ E = H; eigenvalues in [-clip, 0) are zeroed."""
    w, U = np.linalg.eigh(H)
    if w.min() < -clip:
        raise ValueError(f"matrix is not PSD: min eigenvalue {w.min():.3e}")
    w = np.clip(w, 0.0, None)
    return np.diag(np.sqrt(w)) @ U.T


@dataclass
class OperatingPoint:
    """Per-branch linearization data at the zero-flexibility power flow."""

    P0: np.ndarray
    Q0: np.ndarray
    v0j: np.ndarray          # child-end squared voltage per branch
    l0: np.ndarray
    J: np.ndarray            # (N, 3)
    J_plus: np.ndarray
    J_minus: np.ndarray
    H_e: np.ndarray          # (N, 3, 3)
    v0: float                # substation squared voltage

    def __post_init__(self):
        if np.any(self.v0j <= 0):
            raise ValueError("operating point has nonpositive voltage")
        if np.any(self.l0 < 0):
            raise ValueError("operating point has negative squared current")
        if np.any(self.J[:, 2] > 1e-15):
            raise ValueError("third Jacobian component must be nonpositive")
        eigs = np.linalg.eigvalsh(self.H_e)
        if eigs.min() < -PSD_CLIP:
            raise ValueError(f"branch Hessian not PSD: min eigenvalue {eigs.min():.3e}")

    @property
    def x0(self) -> np.ndarray:
        """(N, 3) stacked nominal points."""
        return np.stack([self.P0, self.Q0, self.v0j], axis=1)


def compute_operating_point(feeder: FeederModel, demand: DemandProfile) -> OperatingPoint:
    """Exact power flow at zero flexibility (p = -P_L, q = -Q_L)."""
    sol = solve_distflow(feeder, -demand.p_load, -demand.q_load)
    if not sol.converged:
        raise PowerFlowError("background demand power flow did not converge")
    n = feeder.n
    J = np.zeros((n, 3))
    H = np.zeros((n, 3, 3))
    for j in range(n):
        J[j] = current_jacobian(sol.P[j], sol.Q[j], sol.v[j])
        H[j] = current_hessian(sol.P[j], sol.Q[j], sol.v[j])
    J_plus, J_minus = sign_split(J)
    return OperatingPoint(P0=sol.P.copy(), Q0=sol.Q.copy(), v0j=sol.v.copy(),
                          l0=sol.l.copy(), J=J, J_plus=J_plus, J_minus=J_minus,
                          H_e=H, v0=feeder.v0)


@dataclass
class CiaBoundSystem:
    """Handles of the envelope variables plus bookkeeping of emitted rows."""

    P_up: VarHandle
    P_lo: VarHandle
    Q_up: VarHandle
    Q_lo: VarHandle
    V_up: VarHandle
    V_lo: VarHandle
    corner_patterns: tuple
    n_eq_rows: int
    n_ineq_rows: int
    n_quad_rows: int


def build_cia_constraints(prog: ConvexProgram, mats: NetworkMatrices, op: OperatingPoint,
                          p: VarHandle, q: VarHandle, l_lb: VarHandle, l_ub: VarHandle,
                          t: VarHandle) -> CiaBoundSystem:
    """Emit the full inner-approximation bound system into ``prog``.

    Registers envelope variables P/Q/V up+down and adds, per branch:
    the six affine envelope definitions, the affine lower-current
    equality, four linear epigraph rows covering both +/- pairings of
    the absolute linear term, the eight PSD-corner quadratic epigraph
    rows, and the l_ub linkage row.
    """
    n = mats.n
    for handle in (p, q, l_lb, l_ub, t):
        if handle.dim != n:
            raise ValueError(f"decision variable {handle.name!r} must have dimension {n}")
    eye = np.eye(n)
    P_up = prog.add_variable("cia_P_up", n)
    P_lo = prog.add_variable("cia_P_lo", n)
    Q_up = prog.add_variable("cia_Q_up", n)
    Q_lo = prog.add_variable("cia_Q_lo", n)
    V_up = prog.add_variable("cia_V_up", n)
    V_lo = prog.add_variable("cia_V_lo", n)
    v0_vec = np.full(n, op.v0)

    # envelope definitions: upper bounds see the favourable current bound
    prog.add_affine_eq({P_up: eye, p: -mats.C, l_lb: mats.D_R}, np.zeros(n))
    prog.add_affine_eq({P_lo: eye, p: -mats.C, l_ub: mats.D_R}, np.zeros(n))
    prog.add_affine_eq({Q_up: eye, q: -mats.C, l_lb: mats.D_X_plus, l_ub: mats.D_X_minus}, np.zeros(n))
    prog.add_affine_eq({Q_lo: eye, q: -mats.C, l_ub: mats.D_X_plus, l_lb: mats.D_X_minus}, np.zeros(n))
    prog.add_affine_eq({V_up: eye, p: -mats.M_p, q: -mats.M_q,
                        l_lb: mats.H_plus, l_ub: mats.H_minus}, v0_vec)
    prog.add_affine_eq({V_lo: eye, p: -mats.M_p, q: -mats.M_q,
                        l_ub: mats.H_plus, l_lb: mats.H_minus}, v0_vec)

    jp, jm = op.J_plus, op.J_minus
    x0 = op.x0
    j_dot_x0 = np.einsum("ij,ij->i", op.J, x0)

    def diag3(vecs: np.ndarray, col: int) -> np.ndarray:
        return np.diag(vecs[:, col])

    up_terms = lambda coeff: {P_up: diag3(coeff, 0), Q_up: diag3(coeff, 1), V_up: diag3(coeff, 2)}
    lo_terms = lambda coeff: {P_lo: diag3(coeff, 0), Q_lo: diag3(coeff, 1), V_lo: diag3(coeff, 2)}

    def merged(a: dict, b: dict, extra: dict) -> dict:
        out = dict(extra)
        for src in (a, b):
            for handle, block in src.items():
                out[handle] = out.get(handle, 0) + block
        return out

    # linear lower bound on the squared current: the worst case of the
    # first-order term over the envelope box.  The affine form may go
    # negative far from the operating point; that only widens the
    # envelopes (a looser but still valid lower bound), so it is kept
    # unclamped -- forcing l_lb >= 0 here would implicitly cap the
    # dispatch box at whatever keeps this expression nonnegative.
    prog.add_affine_eq(merged(up_terms(-jm), lo_terms(-jp), {l_lb: eye}), op.l0 - j_dot_x0)

    # |2 (J+ . d+ + J- . d-)| and the symmetric pairing, both under t
    for sign in (2.0, -2.0):
        prog.add_affine_ineq(merged(up_terms(sign * jp), lo_terms(sign * jm), {t: -eye}),
                             sign * j_dot_x0)
        prog.add_affine_ineq(merged(up_terms(sign * jm), lo_terms(sign * jp), {t: -eye}),
                             sign * j_dot_x0)

    # PSD corner rows: delta_c' H delta_c <= t for all 8 corner selections
    up_handles = (P_up, Q_up, V_up)
    lo_handles = (P_lo, Q_lo, V_lo)
    n_quad = 0
    for j in range(n):
        E = psd_factor(op.H_e[j])
        row_j = np.zeros((1, n)); row_j[0, j] = 1.0
        for pattern in CORNER_PATTERNS:
            factors: dict[VarHandle, np.ndarray] = {}
            for coord, pick in enumerate(pattern):
                handle = lo_handles[coord] if pick else up_handles[coord]
                block = np.zeros((3, n))
                block[:, j] = E[:, coord]
                factors[handle] = factors.get(handle, 0) + block
            prog.add_convex_quad(factors, factor_offset=-E @ x0[j],
                                 linear_terms={t: -row_j[0]}, offset=0.0)
            n_quad += 1

    # linkage: l_ub >= l0 + t
    prog.add_affine_ineq({t: eye, l_ub: -eye}, -op.l0)

    return CiaBoundSystem(P_up=P_up, P_lo=P_lo, Q_up=Q_up, Q_lo=Q_lo,
                          V_up=V_up, V_lo=V_lo, corner_patterns=CORNER_PATTERNS,
                          n_eq_rows=7 * n, n_ineq_rows=5 * n, n_quad_rows=n_quad)
