"""Closed-loop simulation of the collective system."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._parallel import parallel_map
from .mpc import CentralizedMpc, MpcInfeasible, mpc_step
from .powernet import LoadSchedule, tie_power

MODES = ("decentralized", "centralized")


class SimInfeasible(Exception):
    """An MPC problem became infeasible; ``trace`` holds the samples up to the failure."""

    def __init__(self, sub_id, time, trace):
        who = "centralized MPC" if sub_id is None else f"MPC of subsystem {sub_id}"
        super().__init__(f"{who} infeasible at t={time:g}")
        self.sub_id = sub_id
        self.time = time
        self.trace = trace


@dataclass
class SimTrace:
    t: np.ndarray
    ids: list
    x: np.ndarray        # (steps, areas, n)
    u: np.ndarray        # (steps, areas, m)
    load: np.ndarray     # (steps, areas, q)
    vopt: np.ndarray     # (steps, areas, m)
    xhat0: np.ndarray    # (steps, areas, n)
    cost: np.ndarray     # (steps, areas)
    feasible: np.ndarray  # (steps, areas)
    ties: list = field(default_factory=list)
    ptie: np.ndarray | None = None  # (steps, ties)
    mode: str = "decentralized"

    def __len__(self):
        return self.t.size

    def truncated(self, k):
        return SimTrace(self.t[:k], self.ids, self.x[:k], self.u[:k], self.load[:k], self.vopt[:k],
                        self.xhat0[:k], self.cost[:k], self.feasible[:k], self.ties,
                        None if self.ptie is None else self.ptie[:k], self.mode)


def equilibrium_target(sub, load, pinned=()):
    """Steady state ``(x_ref, u_ref)`` of ``x = A x + B u + L p`` with the ``pinned`` states at zero.

    Solved in the least-squares sense (minimum norm if not unique); the
    residual is checked so a non-equilibrium is never returned silently.
    """
    n, m = sub.n, sub.m
    p = np.atleast_1d(np.asarray(load, dtype=float))
    if sub.L is None or not np.any(p):
        return np.zeros(n), np.zeros(m)
    E = np.zeros((len(pinned), n + m))
    for r, k in enumerate(pinned):
        E[r, k] = 1.0
    M = np.vstack([np.hstack([sub.A - np.eye(n), sub.B]), E])
    rhs = np.concatenate([-sub.L @ p, np.zeros(len(pinned))])
    sol = np.linalg.lstsq(M, rhs, rcond=None)[0]
    if np.abs(M @ sol - rhs).max() > 1e-9 * max(1.0, np.abs(rhs).max()):
        raise ValueError(f"no equilibrium for subsystem {sub.id} under load {p}")
    return sol[:n], sol[n:]


def _network_ties(net):
    cat = net.catalogue
    if cat is None or not hasattr(cat, "ties"):
        return []
    return cat.ties(frozenset(net.subsystems))


def simulate(net, schedule=None, t_end=100.0, mode="decentralized", x0=None, T=None, pinned=None, horizon=None):
    """Run the closed loop from ``x0`` (default zero) until ``t_end``; returns a :class:`SimTrace`.

    ``pinned`` lists state indices forced to zero in the load-dependent
    reference (the rotor angle for the power network).
    """
    if mode in ("dec", "cen"):
        mode = {"dec": "decentralized", "cen": "centralized"}[mode]
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    ids = net.ids
    missing = [i for i in ids if i not in net.controllers]
    if missing:
        raise ValueError(f"controllers missing for subsystems {missing}")
    subs = [net.subsystems[i] for i in ids]
    if T is None:
        T = getattr(net.catalogue, "T", 1.0)
    steps = int(round(t_end / T))
    if abs(steps * T - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError("t_end must be a multiple of the sampling time")
    if pinned is None:
        pinned = (0,) if net.catalogue is not None else ()
    schedule = schedule or LoadSchedule()
    n = subs[0].n
    if any(s.n != n for s in subs):
        raise ValueError("all subsystems must have the same state dimension for tracing")
    m = max(s.m for s in subs)
    q = max(0 if s.L is None else s.L.shape[1] for s in subs)
    M, K = len(ids), steps + 1
    tr = SimTrace(
        t=np.arange(K) * T, ids=list(ids),
        x=np.zeros((K, M, n)), u=np.zeros((K, M, m)), load=np.zeros((K, M, q)),
        vopt=np.zeros((K, M, m)), xhat0=np.zeros((K, M, n)), cost=np.zeros((K, M)),
        feasible=np.zeros((K, M), dtype=bool), mode=mode,
    )
    ties = _network_ties(net)
    tr.ties = ties
    tr.ptie = np.zeros((K, len(ties)))
    pos = {i: k for k, i in enumerate(ids)}
    x = np.zeros((M, n)) if x0 is None else np.array(x0, dtype=float).reshape(M, n)
    cen = None
    if mode == "centralized":
        cen = CentralizedMpc(net.subsystems, net.controllers, horizon or net.controllers[ids[0]].horizon)

    for k in range(K):
        t = tr.t[k]
        loads = schedule.load_at(t, ids)
        p = np.zeros((M, q))
        if q:
            p[:, 0] = [loads[i] for i in ids]
        refs = [equilibrium_target(s, p[a, :0 if s.L is None else s.L.shape[1]], pinned) for a, s in enumerate(subs)]
        tr.x[k] = x
        tr.load[k] = p
        for l, (i, j, P) in enumerate(ties):
            tr.ptie[k, l] = tie_power(P, x[pos[i], 0], x[pos[j], 0])
        if mode == "decentralized":
            def solve_one(a):
                s = subs[a]
                try:
                    return mpc_step(net.controllers[s.id], s, x[a], refs[a], p[a, :0 if s.L is None else s.L.shape[1]])
                except MpcInfeasible:
                    return None

            sols = parallel_map(solve_one, range(M))
            for a, sol in enumerate(sols):
                if sol is None:
                    raise SimInfeasible(ids[a], t, tr.truncated(k))
                tr.u[k, a] = sol.u
                tr.vopt[k, a] = sol.v0
                tr.xhat0[k, a] = sol.xhat0
                tr.cost[k, a] = sol.cost
            tr.feasible[k] = True
        else:
            xr = np.concatenate([r[0] for r in refs])
            ur = np.concatenate([r[1] for r in refs])
            try:
                u_all, cost = cen.step(x.reshape(-1), xr, ur, p[:, :q].reshape(-1) if q else None)
            except MpcInfeasible:
                raise SimInfeasible(None, t, tr.truncated(k)) from None
            tr.u[k] = u_all.reshape(M, m)
            tr.vopt[k] = tr.u[k]
            tr.xhat0[k] = x
            tr.cost[k] = cost
            tr.feasible[k] = True
        if k == K - 1:
            break
        nxt = np.empty_like(x)
        for a, s in enumerate(subs):
            xa = s.A @ x[a] + s.B @ tr.u[k, a, :s.m]
            if s.L is not None:
                xa = xa + s.L @ p[a, :s.L.shape[1]]
            for j, Aij in s.couplings.items():
                xa = xa + Aij @ x[pos[j]]
            nxt[a] = xa
        x = nxt
    return tr
