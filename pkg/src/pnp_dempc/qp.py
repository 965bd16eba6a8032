"""Dense convex QP solver (Mehrotra predictor-corrector interior point).

Solves ``min 1/2 z'Hz + g'z  s.t.  Aeq z = beq,  Ain z <= bin``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.linalg.lapack import dpstrf
from scipy.optimize import linprog

KKT_TOL = 1e-7


class QpError(RuntimeError):
    pass


class Infeasible(QpError):
    """No feasible point; ``certificate`` holds multipliers ``(y_eq, y_in)`` of a Farkas ray."""

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class Unbounded(QpError):
    pass


class MaxIterations(QpError):
    pass


@dataclass(frozen=True, eq=False)
class QuadProgram:
    H: np.ndarray
    g: np.ndarray
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None
    Ain: np.ndarray | None = None
    bin: np.ndarray | None = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = H.shape[0]
        if H.shape != (n, n):
            raise ValueError("H must be square")
        g = np.asarray(self.g, dtype=float).reshape(-1)
        if g.size != n:
            raise ValueError("g has wrong length")
        Aeq, beq = _constraint_pair(self.Aeq, self.beq, n, "equality")
        Ain, bin_ = _constraint_pair(self.Ain, self.bin, n, "inequality")
        object.__setattr__(self, "H", 0.5 * (H + H.T))
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "Aeq", Aeq)
        object.__setattr__(self, "beq", beq)
        object.__setattr__(self, "Ain", Ain)
        object.__setattr__(self, "bin", bin_)

    @property
    def n(self):
        return self.g.size

    def objective(self, z):
        return float(0.5 * z @ self.H @ z + self.g @ z)


def _constraint_pair(A, b, n, kind):
    if A is None or np.size(A) == 0:
        return np.zeros((0, n)), np.zeros(0)
    A = np.asarray(A, dtype=float).reshape(-1, n)
    b = np.asarray(b, dtype=float).reshape(-1)
    if A.shape[0] != b.size:
        raise ValueError(f"{kind} constraints: {A.shape[0]} rows but {b.size} bounds")
    return A, b


@dataclass(frozen=True, eq=False)
class QpSolution:
    z: np.ndarray
    objective: float
    y: np.ndarray
    lam: np.ndarray
    iterations: int
    kkt_residual: float


def is_psd(H, tol=1e-9):
    """Pivoted Cholesky test: the rank-revealing factor must reproduce ``H``."""
    n = H.shape[0]
    if n == 0:
        return True
    scale = max(1.0, np.abs(H).max())
    c, piv, rank, info = dpstrf(np.array(H, order="F"), lower=1, tol=-1)
    if info < 0:
        raise ValueError("dpstrf argument error")
    L = np.tril(c)[:, :rank]
    p = piv - 1
    return bool(np.abs(H[np.ix_(p, p)] - L @ L.T).max() <= tol * scale)


def kkt_residual(p, z, y, lam):
    rd = p.H @ z + p.g + p.Aeq.T @ y + p.Ain.T @ lam
    re = p.Aeq @ z - p.beq
    slack = p.bin - p.Ain @ z
    return max(
        np.abs(rd).max(initial=0.0),
        np.abs(re).max(initial=0.0),
        np.maximum(-slack, 0.0).max(initial=0.0),
        np.maximum(-lam, 0.0).max(initial=0.0),
        np.abs(slack * lam).max(initial=0.0),
    )


def _step_to_boundary(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def solve(p, max_iter=100, tol=1e-9, check_psd=True):
    """Solve a convex QP; raises :class:`Infeasible`, :class:`Unbounded` or :class:`MaxIterations`."""
    with np.errstate(all="ignore"):
        return _solve(p, max_iter, tol, check_psd)


def _solve(p, max_iter, tol, check_psd):
    if check_psd and not is_psd(p.H):
        raise ValueError("H is not positive semidefinite")
    n, me, mi = p.n, p.Aeq.shape[0], p.Ain.shape[0]
    H, g, Aeq, beq, Ain, bin_ = p.H, p.g, p.Aeq, p.beq, p.Ain, p.bin
    reg = 1e-11 * max(1.0, np.abs(H).max(initial=0.0))

    def factor(D):
        M = H + (Ain.T * D) @ Ain + reg * np.eye(n)
        K = np.block([[M, Aeq.T], [Aeq, -reg * np.eye(me)]])
        return sla.lu_factor(K, check_finite=False)

    def newton(lu, rhs_x, rhs_y):
        sol = sla.lu_solve(lu, np.concatenate([rhs_x, rhs_y]), check_finite=False)
        return sol[:n], sol[n:]

    # start from the equality-constrained minimizer with unit slacks/duals
    lu = factor(np.full(mi, 1.0))
    z, y = newton(lu, -g + Ain.T @ np.zeros(mi), beq)
    s = np.maximum(bin_ - Ain @ z, 1.0)
    lam = np.ones(mi)
    scale = 1.0 + max(np.abs(g).max(initial=0.0), np.abs(bin_).max(initial=0.0), np.abs(beq).max(initial=0.0))

    best = (np.inf, None)
    for it in range(1, max_iter + 1):
        rd = H @ z + g + Aeq.T @ y + Ain.T @ lam
        re = Aeq @ z - beq
        ri = Ain @ z + s - bin_
        mu = float(s @ lam / mi) if mi else 0.0
        res = max(np.abs(rd).max(initial=0.0), np.abs(re).max(initial=0.0), np.abs(ri).max(initial=0.0))
        if max(res, mu) < best[0]:
            best = (max(res, mu), (z, y, lam, it))
        if res <= tol * scale and mu <= 0.1 * tol * scale:
            break
        if best[0] <= tol * scale and it > best[1][3] + 3:
            # stalled at full accuracy; further steps only add round-off
            z, y, lam, it = best[1]
            break
        if not (np.all(np.isfinite(z)) and np.abs(z).max(initial=0.0) < 1e12 and lam.max(initial=0.0) < 1e14):
            if best[0] > KKT_TOL * scale:
                return _diagnose(p, it)
            # degenerate problems can blow up the duals past the requested accuracy
            z, y, lam, it = best[1]
            break
        D = lam / s
        lu = factor(D)

        def direction(rc):
            rhs_x = -rd + Ain.T @ ((rc - lam * ri) / s)
            dz, dy = newton(lu, rhs_x, -re)
            ds = -ri - Ain @ dz
            dlam = (-rc - lam * ds) / s
            return dz, dy, ds, dlam

        # predictor
        rc = s * lam
        dz, dy, ds, dlam = direction(rc)
        if mi:
            a_aff = min(_step_to_boundary(s, ds), _step_to_boundary(lam, dlam))
            mu_aff = float((s + a_aff * ds) @ (lam + a_aff * dlam) / mi)
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            # corrector
            rc = s * lam + ds * dlam - sigma * mu
            dz, dy, ds, dlam = direction(rc)
            a = min(1.0, 0.995 * min(_step_to_boundary(s, ds), _step_to_boundary(lam, dlam)))
        else:
            a = 1.0
        z = z + a * dz
        y = y + a * dy
        s = s + a * ds
        lam = lam + a * dlam
        if mi:
            s = np.maximum(s, 1e-300)
            lam = np.maximum(lam, 1e-300)
    else:
        if best[1] is None or best[0] > KKT_TOL * scale:
            return _diagnose(p, max_iter)
        z, y, lam, it = best[1]

    res = kkt_residual(p, z, y, lam)
    if res > KKT_TOL * scale:
        return _diagnose(p, it, z=z, y=y, lam=lam)
    return QpSolution(z, p.objective(z), y, lam, it, res)


def _diagnose(p, it, z=None, y=None, lam=None):
    """Called when the interior point iteration fails: classify the failure."""
    cert = farkas_certificate(p)
    if cert is not None:
        raise Infeasible("QP is infeasible", cert)
    if unbounded_direction(p) is not None:
        raise Unbounded("QP objective is unbounded below")
    raise MaxIterations(f"interior point method did not converge in {it} iterations")


def farkas_certificate(p, tol=1e-9):
    """Return ``(y_eq, y_in)`` with ``Aeq'y_eq + Ain'y_in = 0``, ``y_in >= 0``, ``beq'y_eq + bin'y_in < 0``."""
    me, mi = p.Aeq.shape[0], p.Ain.shape[0]
    if me + mi == 0:
        return None
    c = np.concatenate([p.beq, p.bin])
    A_eq = np.hstack([p.Aeq.T, p.Ain.T])
    bounds = [(-1, 1)] * me + [(0, 1)] * mi
    res = linprog(c, A_eq=A_eq, b_eq=np.zeros(p.n), bounds=bounds, method="highs")
    if res.status != 0 or res.fun >= -tol * (1.0 + np.abs(c).max()):
        return None
    return res.x[:me], res.x[me:]


def unbounded_direction(p, tol=1e-9):
    n = p.n
    A_eq = np.vstack([p.H, p.Aeq])
    b_eq = np.zeros(A_eq.shape[0])
    res = linprog(p.g, A_ub=p.Ain if p.Ain.size else None, b_ub=np.zeros(p.Ain.shape[0]) if p.Ain.size else None,
                  A_eq=A_eq, b_eq=b_eq, bounds=[(-1, 1)] * n, method="highs")
    if res.status == 0 and res.fun < -tol:
        return res.x
    return None
