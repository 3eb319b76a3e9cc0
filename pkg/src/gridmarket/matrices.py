"""Topology and sensitivity matrices of the vectorized branch-flow model.

With branch j indexed by its child node, the model reads

    V = v0*1 + M_p p + M_q q - H l
    P = C p - D_R l,   Q = C q - D_X l

where C[b, k] = 1 iff node k lies in the subtree hanging off branch b.
All matrices are dense; feeders at the intended scale stay well below the
point where sparsity would pay off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feeder import FeederModel


@dataclass
class NetworkMatrices:
    n: int
    B: np.ndarray        # (N+1, N) unsigned node-branch incidence
    A: np.ndarray        # (N, N) branch-to-child-branch adjacency
    C: np.ndarray        # (N, N) inverse of (I - A): subtree reachability
    D_R: np.ndarray
    D_X: np.ndarray
    M_p: np.ndarray
    M_q: np.ndarray
    H: np.ndarray
    D_X_plus: np.ndarray
    D_X_minus: np.ndarray
    H_plus: np.ndarray
    H_minus: np.ndarray


def sign_split(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise (nonnegative, nonpositive) parts; they sum back exactly."""
    M = np.asarray(M, dtype=float)
    plus = np.where(M > 0, M, 0.0)
    return plus, M - plus


def build_matrices(feeder: FeederModel, order=None) -> NetworkMatrices:
    """Assemble all model matrices for a validated radial feeder.

    (I - A)^{-1} is accumulated by back-substitution over the topological
    order (children folded into parents), never by general inversion.
    """
    n = feeder.n
    order = list(feeder.order if order is None else order)
    B = np.zeros((n + 1, n))
    for j in range(1, n + 1):
        B[int(feeder.parent[j - 1]), j - 1] = 1.0
        B[j, j - 1] = 1.0
    A = B[1:, :] - np.eye(n)

    C = np.zeros((n, n))
    kids = feeder.children()
    for j in reversed(order):
        C[j - 1, j - 1] = 1.0
        for h in kids[j]:
            C[j - 1] += C[h - 1]

    R = np.diag(feeder.r)
    X = np.diag(feeder.x)
    Z2 = np.diag(feeder.r**2 + feeder.x**2)
    D_R = C @ A @ R
    D_X = C @ A @ X
    M_p = 2.0 * C.T @ R @ C
    M_q = 2.0 * C.T @ X @ C
    H = C.T @ (2.0 * (R @ D_R + X @ D_X) + Z2)
    D_X_plus, D_X_minus = sign_split(D_X)
    H_plus, H_minus = sign_split(H)
    return NetworkMatrices(n=n, B=B, A=A, C=C, D_R=D_R, D_X=D_X,
                           M_p=M_p, M_q=M_q, H=H,
                           D_X_plus=D_X_plus, D_X_minus=D_X_minus,
                           H_plus=H_plus, H_minus=H_minus)
