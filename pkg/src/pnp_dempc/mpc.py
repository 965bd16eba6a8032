"""Tube MPC for one subsystem and the centralized baseline.

Both problems are condensed: the nominal trajectory is eliminated through
the prediction matrices, leaving the initial nominal state, the nominal
inputs and (for the tube) the generator coefficients of the initial error.
"""
from __future__ import annotations

import logging
import threading
import weakref
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .qp import Infeasible, QuadProgram, solve
from .tube_synth import terminal_ingredients

log = logging.getLogger(__name__)

# the tuned weights can be badly scaled, so the solver runs tighter than its default
MPC_TOL = 1e-11


class MpcInfeasible(Exception):
    """The MPC problem has no solution for the current state."""

    def __init__(self, message, sub_id=None, time=None):
        super().__init__(message)
        self.sub_id = sub_id
        self.time = time


@dataclass(frozen=True, eq=False)
class MpcSolution:
    v0: np.ndarray
    xhat0: np.ndarray
    u: np.ndarray
    cost: float
    nominal_x: np.ndarray
    nominal_v: np.ndarray
    d: np.ndarray
    terminal_dropped: bool = False


def prediction_matrices(A, B, N, E=None):
    """``x_k = A^k x0 + Su_k v + Se_k p`` stacked for ``k = 0..N`` (``p`` held constant)."""
    n, m = B.shape
    Sx = np.zeros(((N + 1) * n, n))
    Su = np.zeros(((N + 1) * n, N * m))
    q = 0 if E is None else E.shape[1]
    Se = np.zeros(((N + 1) * n, q))
    Ak = np.eye(n)
    powers = [Ak]
    for _ in range(N):
        powers.append(A @ powers[-1])
    for k in range(N + 1):
        Sx[k * n:(k + 1) * n] = powers[k]
        for i in range(k):
            Su[k * n:(k + 1) * n, i * m:(i + 1) * m] = powers[k - 1 - i] @ B
        if q:
            Se[k * n:(k + 1) * n] = sum((powers[i] @ E for i in range(k)), np.zeros((n, q)))
    return Sx, Su, Se


def _as_vec(v, size, name):
    v = np.zeros(size) if v is None else np.asarray(v, dtype=float).reshape(-1)
    if v.size != size:
        raise ValueError(f"{name} has length {v.size}, expected {size}")
    return v


class TubeMpc:
    """Condensed MPC-i problem with precomputed constraint and cost matrices."""

    def __init__(self, ctrl, sub):
        self.ctrl, self.sub = ctrl, sub
        A, B, N = sub.A, sub.B, ctrl.horizon
        n, m = sub.n, sub.m
        self.n, self.m, self.N = n, m, N
        Lm = sub.L if sub.L is not None else np.zeros((n, 0))
        self.q = Lm.shape[1]
        Sx, Su, Se = prediction_matrices(A, B, N, Lm)
        self.Se = Se
        Gz = ctrl.Z.set.G
        self.Gz = Gz
        e = Gz.shape[1]
        self.e = e
        ny = n + N * m
        self.nz = ny + e
        M = np.hstack([Sx, Su])
        self.M = M
        Q, R, Pf = ctrl.stage_weights.Q, ctrl.stage_weights.R, ctrl.terminal_cost
        self.Qbar = sla.block_diag(*([Q] * N + [Pf]))
        self.Rbar = sla.block_diag(*([R] * N)) if N else np.zeros((0, 0))
        Hy = M.T @ self.Qbar @ M
        Hy[n:, n:] += self.Rbar
        H = np.zeros((self.nz, self.nz))
        H[:ny, :ny] = 2.0 * Hy
        self.H = 0.5 * (H + H.T)
        # equality: xhat0 + Gz d = x
        self.Aeq = np.hstack([np.eye(n), np.zeros((n, N * m)), Gz])
        # inequalities that do not depend on the target
        Fx = ctrl.Xhat_h.normals
        rows, rhs = [], []
        for k in range(N):
            blk = np.zeros((Fx.shape[0], self.nz))
            blk[:, :ny] = Fx @ M[k * n:(k + 1) * n]
            rows.append(blk)
            rhs.append((ctrl.Xhat_h.offsets, Fx, k))
        Hv = ctrl.V.normals
        for k in range(N):
            blk = np.zeros((Hv.shape[0], self.nz))
            blk[:, n + k * m:n + (k + 1) * m] = Hv
            rows.append(blk)
            rhs.append((ctrl.V.offsets, None, None))
        if e:
            rows += [np.hstack([np.zeros((e, ny)), np.eye(e)]), np.hstack([np.zeros((e, ny)), -np.eye(e)])]
            rhs += [(np.ones(e), None, None), (np.ones(e), None, None)]
        self._rows = rows
        self._rhs = rhs
        self._terminal = {}
        self._lock = threading.Lock()

    def terminal_set(self, x_ref, u_ref):
        """Terminal set for the reference, or ``None`` if it has to be dropped."""
        if not (np.any(x_ref) or np.any(u_ref)):
            return self.ctrl.terminal_set
        key = tuple(np.round(np.concatenate([x_ref, u_ref]), 12))
        with self._lock:
            if key in self._terminal:
                return self._terminal[key]
        try:
            _, _, Xf = terminal_ingredients(self.sub.A, self.sub.B, self.ctrl.Xhat_h, self.ctrl.V,
                                            self.ctrl.stage_weights, x_ref, u_ref)
        except ValueError as exc:
            log.warning("subsystem %s: dropping terminal constraint for reference %s (%s)",
                        self.sub.id, np.round(x_ref, 6).tolist(), exc)
            Xf = None
        with self._lock:
            self._terminal[key] = Xf
        return Xf

    def build(self, x, x_ref=None, u_ref=None, load=None):
        n, m, N = self.n, self.m, self.N
        x = _as_vec(x, n, "state")
        x_ref = _as_vec(x_ref, n, "state reference")
        u_ref = _as_vec(u_ref, m, "input reference")
        p = _as_vec(load, self.q, "load")
        c = self.Se @ p if self.q else np.zeros((N + 1) * n)
        Xo = np.tile(x_ref, N + 1)
        Uo = np.tile(u_ref, N)
        ny = n + N * m
        g = np.zeros(self.nz)
        gy = 2.0 * self.M.T @ self.Qbar @ (c - Xo)
        gy[n:] -= 2.0 * self.Rbar @ Uo
        g[:ny] = gy
        const = float((c - Xo) @ self.Qbar @ (c - Xo) + Uo @ self.Rbar @ Uo)
        bin_ = []
        for off, Fx, k in self._rhs:
            bin_.append(off - Fx @ c[k * n:(k + 1) * n] if Fx is not None else off)
        rows = list(self._rows)
        Xf = self.terminal_set(x_ref, u_ref)
        if Xf is not None:
            blk = np.zeros((Xf.n_faces, self.nz))
            blk[:, :ny] = Xf.normals @ self.M[N * n:]
            rows.append(blk)
            bin_.append(Xf.offsets - Xf.normals @ c[N * n:])
        qp = QuadProgram(self.H, g, self.Aeq, x, np.vstack(rows), np.concatenate(bin_))
        return qp, const, c, Xf is None

    def step(self, x, x_ref=None, u_ref=None, load=None):
        n, m, N = self.n, self.m, self.N
        x = _as_vec(x, n, "state")
        if _at_origin(x, x_ref, u_ref, load):
            # the origin is an exact equilibrium with zero cost; skip round-off from the solver
            return MpcSolution(np.zeros(m), np.zeros(n), np.zeros(m), 0.0,
                               np.zeros((N + 1, n)), np.zeros((N, m)), np.zeros(self.Gz.shape[1]), False)
        qp, const, c, dropped = self.build(x, x_ref, u_ref, load)
        try:
            sol = solve(qp, tol=MPC_TOL, check_psd=False)
        except Infeasible as exc:
            raise MpcInfeasible(f"MPC problem of subsystem {self.sub.id} is infeasible", self.sub.id) from exc
        z = sol.z
        y = z[:n + N * m]
        xs = (self.M @ y + c).reshape(N + 1, n)
        vs = y[n:].reshape(N, m)
        xhat0 = y[:n]
        u = vs[0] + self.ctrl.K @ (_as_vec(x, n, "state") - xhat0)
        return MpcSolution(vs[0].copy(), xhat0.copy(), u, max(sol.objective + const, 0.0),
                           xs, vs, z[n + N * m:], dropped)


def _at_origin(*parts):
    return all(p is None or not np.any(np.asarray(p, dtype=float)) for p in parts)


_CACHE = weakref.WeakKeyDictionary()
_CACHE_LOCK = threading.Lock()


def _tube_problem(ctrl, sub):
    with _CACHE_LOCK:
        per = _CACHE.setdefault(ctrl, {})
        prob = per.get(sub.fingerprint())
        if prob is None:
            prob = per[sub.fingerprint()] = TubeMpc(ctrl, sub)
    return prob


def stage_cost(ctrl, x, v, x_ref=None, u_ref=None):
    dx = np.asarray(x, dtype=float) - (0.0 if x_ref is None else np.asarray(x_ref, dtype=float))
    dv = np.asarray(v, dtype=float) - (0.0 if u_ref is None else np.asarray(u_ref, dtype=float))
    w = ctrl.stage_weights
    return float(dx @ w.Q @ dx + dv @ w.R @ dv)


def mpc_step(ctrl, sub, x, target=None, load=None):
    """Solve MPC-i at state ``x``; ``target = (x_ref, u_ref)`` and ``load`` is the measured input."""
    x_ref, u_ref = (None, None) if target is None else target
    return _tube_problem(ctrl, sub).step(x, x_ref, u_ref, load)


# -- centralized baseline ---------------------------------------------------

def collective_model(subsystems):
    """Block matrices ``(A, B, L)`` of the full network in sorted id order."""
    ids = sorted(subsystems)
    ns = [subsystems[i].n for i in ids]
    off = np.concatenate([[0], np.cumsum(ns)])
    pos = {i: k for k, i in enumerate(ids)}
    A = np.zeros((off[-1], off[-1]))
    for i in ids:
        k = pos[i]
        sub = subsystems[i]
        A[off[k]:off[k + 1], off[k]:off[k + 1]] = sub.A
        for j, Aij in sub.couplings.items():
            l = pos[j]
            A[off[k]:off[k + 1], off[l]:off[l + 1]] = Aij
    B = sla.block_diag(*[subsystems[i].B for i in ids])
    L = sla.block_diag(*[subsystems[i].L if subsystems[i].L is not None else np.zeros((subsystems[i].n, 0))
                         for i in ids])
    return A, B, L


class CentralizedMpc:
    """Plain MPC on the collective model with the original constraints."""

    def __init__(self, subsystems, controllers, N):
        self.ids = sorted(subsystems)
        subs = [subsystems[i] for i in self.ids]
        A, B, L = collective_model(subsystems)
        self.n, self.m, self.q = A.shape[0], B.shape[1], L.shape[1]
        self.N = N
        Sx, Su, Se = prediction_matrices(A, B, N, L)
        self.Sx, self.Su, self.Se = Sx, Su, Se
        Q = sla.block_diag(*[controllers[i].stage_weights.Q for i in self.ids])
        R = sla.block_diag(*[controllers[i].stage_weights.R for i in self.ids])
        Pf = sla.block_diag(*[controllers[i].terminal_cost for i in self.ids])
        self.Qbar = sla.block_diag(*([Q] * N + [Pf]))
        self.Rbar = sla.block_diag(*([R] * N))
        H = Su.T @ self.Qbar @ Su + self.Rbar
        self.H = 2.0 * 0.5 * (H + H.T)
        Fx = sla.block_diag(*[s.Xh.normals for s in subs])
        gx = np.concatenate([s.Xh.offsets for s in subs])
        Hu = sla.block_diag(*[s.U.normals for s in subs])
        gu = np.concatenate([s.U.offsets for s in subs])
        rows, self._xrows = [], []
        n, m = self.n, self.m
        for k in range(1, N + 1):
            rows.append(Fx @ Su[k * n:(k + 1) * n])
            self._xrows.append(k)
        for k in range(N):
            blk = np.zeros((Hu.shape[0], N * m))
            blk[:, k * m:(k + 1) * m] = Hu
            rows.append(blk)
        self.Ain = np.vstack(rows)
        self.Fx, self.gx, self.gu = Fx, gx, gu

    def step(self, x, x_ref=None, u_ref=None, load=None):
        n, m, N = self.n, self.m, self.N
        x = _as_vec(x, n, "state")
        x_ref = _as_vec(x_ref, n, "state reference")
        u_ref = _as_vec(u_ref, m, "input reference")
        p = _as_vec(load, self.q, "load")
        if _at_origin(x, x_ref, u_ref, p):
            return np.zeros(m), 0.0
        c = self.Sx @ x + (self.Se @ p if self.q else 0.0)
        Xo, Uo = np.tile(x_ref, N + 1), np.tile(u_ref, N)
        g = 2.0 * (self.Su.T @ self.Qbar @ (c - Xo) - self.Rbar @ Uo)
        const = float((c - Xo) @ self.Qbar @ (c - Xo) + Uo @ self.Rbar @ Uo)
        bx = [self.gx - self.Fx @ c[k * n:(k + 1) * n] for k in self._xrows]
        bin_ = np.concatenate(bx + [self.gu] * N)
        try:
            sol = solve(QuadProgram(self.H, g, None, None, self.Ain, bin_), tol=MPC_TOL, check_psd=False)
        except Infeasible as exc:
            raise MpcInfeasible("centralized MPC problem is infeasible") from exc
        return sol.z[:m], sol.objective + const


def centralized_mpc_step(net, x_all, targets=None, N=20, load=None):
    """First input of the centralized MPC; ``targets = (x_ref_all, u_ref_all)``."""
    prob = CentralizedMpc(net.subsystems, net.controllers, N)
    x_ref, u_ref = (None, None) if targets is None else targets
    u, _ = prob.step(x_all, x_ref, u_ref, load)
    return u
