"""Independent reference implementations used to check the package."""
from itertools import combinations

import numpy as np


def active_set_oracle(H, g, A, b, Aeq=None, beq=None):
    """Brute force: solve the KKT system for every active set and keep the best KKT point."""
    n = H.shape[0]
    Aeq = np.zeros((0, n)) if Aeq is None else Aeq
    beq = np.zeros(0) if beq is None else beq
    best = None
    for k in range(min(len(b), n - len(beq)) + 1):
        for act in combinations(range(len(b)), k):
            C = np.vstack([Aeq, A[list(act)]])
            d = np.concatenate([beq, b[list(act)]])
            m = C.shape[0]
            K = np.block([[H, C.T], [C, np.zeros((m, m))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-g, d]))
            except np.linalg.LinAlgError:
                continue
            z, mult = sol[:n], sol[n:]
            if np.any(A @ z > b + 1e-9) or np.any(mult[len(beq):] < -1e-9):
                continue
            f = 0.5 * z @ H @ z + g @ z
            if best is None or f < best[1]:
                best = (z, f)
    return best


def random_qp(rng, n=5, mi=3, me=0):
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    g = rng.normal(size=n)
    A = rng.normal(size=(mi, n))
    b = rng.normal(size=mi) + 0.5
    Aeq = rng.normal(size=(me, n)) if me else None
    beq = rng.normal(size=me) if me else None
    return H, g, A, b, Aeq, beq


def riccati_recursion(A, B, Q, R, steps=10_000):
    """Value iteration P_{k+1} = Q + A'P_kA - A'P_kB(R+B'P_kB)^-1 B'P_kA from P_0 = 0."""
    P = np.zeros_like(A)
    for _ in range(steps):
        P = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.inv(R + B.T @ P @ B) @ B.T @ P @ A
    return P


def zonotope_vertices(center, G):
    """All 2^e sign combinations ``center + G s``."""
    e = G.shape[1]
    signs = np.array(np.meshgrid(*[[-1.0, 1.0]] * e)).reshape(e, -1).T
    return center + signs @ G.T
