"""Discrete-time LQ synthesis.

The Riccati solution is computed by the structure-preserving doubling
iteration, i.e. the value iteration ``P <- Q + A'P(I + G P)^{-1}A`` with
``G = B R^{-1} B'`` accelerated so that step ``k`` covers ``2^k`` horizons.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class RiccatiError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LqWeights:
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if not np.allclose(Q, Q.T) or not np.allclose(R, R.T):
            raise ValueError("LQ weights must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-12 * max(1.0, np.abs(Q).max()):
            raise ValueError("Q must be positive semidefinite")
        if R.size and np.linalg.eigvalsh(R).min() <= 0:
            raise ValueError("R must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @classmethod
    def diagonal(cls, q, r):
        return cls(np.diag(np.atleast_1d(q)), np.diag(np.atleast_1d(r)))


def riccati_residual(A, B, w, P):
    S = w.R + B.T @ P @ B
    return A.T @ P @ A + w.Q - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A) - P


def dare_solve(A, B, w, max_doublings=100, tol=1e-13):
    """Stabilizing solution of ``A'PA + Q - A'PB(R + B'PB)^{-1}B'PA = P``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n = A.shape[0]
    if A.shape != (n, n) or w.Q.shape != (n, n) or w.R.shape[0] != B.shape[1]:
        raise ValueError("inconsistent dimensions in dare_solve")
    I = np.eye(n)
    Ak = A.copy()
    Gk = B @ np.linalg.solve(w.R, B.T)
    Hk = w.Q.copy()
    for _ in range(max_doublings):
        W = I + Gk @ Hk
        WA = np.linalg.solve(W, Ak)
        WG = np.linalg.solve(W, Gk)
        H_next = Hk + Ak.T @ Hk @ WA
        G_next = Gk + Ak @ WG @ Ak.T
        Ak = Ak @ WA
        H_next = 0.5 * (H_next + H_next.T)
        G_next = 0.5 * (G_next + G_next.T)
        if not np.all(np.isfinite(H_next)) or np.abs(H_next).max() > 1e300:
            raise RiccatiError("Riccati iteration diverged: (A, B) not stabilizable")
        step = np.linalg.norm(H_next - Hk)
        Hk, Gk = H_next, G_next
        if step <= tol * max(1.0, np.linalg.norm(Hk)) and np.linalg.norm(Ak) < 1e-8:
            break
    else:
        raise RiccatiError("Riccati iteration did not converge")
    P = Hk
    res = np.linalg.norm(riccati_residual(A, B, w, P))
    if res > 1e-9 * max(1.0, np.linalg.norm(P)):
        raise RiccatiError(f"Riccati residual {res:.3e} too large")
    return P


def value_iteration(A, B, w, steps=10_000):
    """Plain Riccati recursion from ``P = 0``; slow but obviously correct."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    P = np.zeros_like(A)
    for _ in range(steps):
        S = w.R + B.T @ P @ B
        P = A.T @ P @ A + w.Q - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A)
        P = 0.5 * (P + P.T)
    return P


def spectral_radius(M):
    M = np.atleast_2d(M)
    return float(np.max(np.abs(np.linalg.eigvals(M)))) if M.size else 0.0


def lq_gain(A, B, w, P=None):
    """LQ gain with the sign convention ``u = K x`` so that ``A + B K`` is Schur."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    if P is None:
        P = dare_solve(A, B, w)
    K = -np.linalg.solve(w.R + B.T @ P @ B, B.T @ P @ A)
    rho = spectral_radius(A + B @ K)
    if rho >= 1.0:
        raise RiccatiError(f"LQ closed loop not Schur (spectral radius {rho:.6f})")
    return K
