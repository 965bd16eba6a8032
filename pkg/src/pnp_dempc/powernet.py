"""Multi-area load-frequency model for automatic generation control.

Each area has state ``(dtheta, domega, dPm, dPv)``, input ``dPref`` and a
measured load ``dPL``. Areas are coupled through tie lines with power-angle
slopes ``P_ij``; the local matrix depends on the sum of the slopes of the
lines present, so the subsystems are parameter dependent.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from .tube_synth import Subsystem

SAMPLING_TIME = 1.0
OMEGA_BOUND = 0.5
PM_BOUND = 3.0
PV_BOUND = 3.0


@dataclass(frozen=True)
class AreaParams:
    H: float
    R: float
    D: float
    Tt: float
    Tg: float
    u_bound: float
    theta_bound: float = 0.1
    omega_bound: float = OMEGA_BOUND
    pm_bound: float = PM_BOUND
    pv_bound: float = PV_BOUND
    tie: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("H", "R", "D", "Tt", "Tg", "u_bound", "theta_bound", "omega_bound", "pm_bound", "pv_bound"):
            if not getattr(self, name) > 0:
                raise ValueError(f"area parameter {name} must be positive")
        for j, P in self.tie.items():
            if not P > 0:
                raise ValueError(f"tie-line slope to area {j} must be positive")
        object.__setattr__(self, "tie", {int(j): float(P) for j, P in self.tie.items()})

    @property
    def x_bounds(self):
        return np.array([self.theta_bound, self.omega_bound, self.pm_bound, self.pv_bound])


@dataclass(frozen=True, eq=False)
class ContinuousArea:
    A: np.ndarray
    B: np.ndarray
    L: np.ndarray
    couplings: dict


@dataclass(frozen=True, eq=False)
class DiscreteArea:
    A: np.ndarray
    B: np.ndarray
    L: np.ndarray
    couplings: dict
    T: float


def build_area(p, neighbors=None):
    """Continuous-time matrices; ``neighbors`` restricts the tie lines to those present."""
    ties = {j: P for j, P in p.tie.items() if neighbors is None or j in neighbors}
    h2 = 2.0 * p.H
    A = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [-sum(ties.values()) / h2, -p.D / h2, 1.0 / h2, 0.0],
        [0.0, 0.0, -1.0 / p.Tt, 1.0 / p.Tt],
        [0.0, -1.0 / (p.R * p.Tg), 0.0, -1.0 / p.Tg],
    ])
    B = np.array([[0.0], [0.0], [0.0], [1.0 / p.Tg]])
    L = np.array([[0.0], [-1.0 / h2], [0.0], [0.0]])
    cpl = {}
    for j, P in ties.items():
        Aij = np.zeros((4, 4))
        Aij[1, 0] = P / h2
        cpl[j] = Aij
    return ContinuousArea(A, B, L, cpl)


def discretize(cont, T=SAMPLING_TIME):
    """Exact zero-order-hold discretization with all non-state signals exogenous.

    ``expm([[A, E], [0, 0]] T)`` holds ``exp(AT)`` and ``int_0^T exp(As) ds E``
    in its first block row, with ``E`` stacking ``B``, ``L`` and the coupling
    blocks.
    """
    if not T > 0:
        raise ValueError("sampling time must be positive")
    A = np.atleast_2d(np.asarray(cont.A, dtype=float))
    n = A.shape[0]
    ids = sorted(cont.couplings)
    E = np.hstack([np.asarray(cont.B, dtype=float).reshape(n, -1),
                   np.asarray(cont.L, dtype=float).reshape(n, -1)] +
                  [np.asarray(cont.couplings[j], dtype=float) for j in ids])
    M = np.zeros((n + E.shape[1], n + E.shape[1]))
    M[:n, :n] = A
    M[:n, n:] = E
    Phi = expm(M * T)
    Ad, G = Phi[:n, :n], Phi[:n, n:]
    m = np.asarray(cont.B).reshape(n, -1).shape[1]
    q = np.asarray(cont.L).reshape(n, -1).shape[1]
    Bd, Ld = G[:, :m], G[:, m:m + q]
    cpl, col = {}, m + q
    for j in ids:
        w = np.asarray(cont.couplings[j]).shape[1]
        cpl[j] = G[:, col:col + w]
        col += w
    return DiscreteArea(Ad, Bd, Ld, cpl, float(T))


def tie_power(P_ij, theta_i, theta_j):
    """Power flowing from area ``i`` to area ``j``."""
    return P_ij * (theta_i - theta_j)


def symmetrize_ties(areas):
    """Fill in ``P_ji`` from ``P_ij``; conflicting values are an error."""
    ties = {i: dict(p.tie) for i, p in areas.items()}
    for i, t in list(ties.items()):
        for j, P in t.items():
            if j == i:
                raise ValueError(f"area {i} has a tie line to itself")
            if j not in ties:
                ties[j] = {}
            other = ties[j].get(i)
            if other is not None and abs(other - P) > 1e-12 * max(1.0, abs(P)):
                raise ValueError(f"tie-line slopes P_{i}{j}={P} and P_{j}{i}={other} disagree")
            ties[j][i] = P
    return {i: replace(p, tie=ties[i]) for i, p in areas.items()}


@dataclass(frozen=True)
class AreaCatalogue:
    """All areas that may ever be part of the network, with symmetric tie data."""

    areas: dict
    T: float = SAMPLING_TIME

    def __post_init__(self):
        object.__setattr__(self, "areas", symmetrize_ties({int(i): p for i, p in self.areas.items()}))

    def build(self, i, members):
        """Discrete subsystem of area ``i`` when the areas in ``members`` are connected."""
        if i not in self.areas:
            raise KeyError(f"unknown area {i}")
        members = frozenset(members) | {i}
        p = self.areas[i]
        d = discretize(build_area(p, members), self.T)
        return Subsystem.from_boxes(i, d.A, d.B, d.couplings, p.x_bounds, [p.u_bound], L=d.L,
                                    rebuild=AreaRebuilder(self, i))

    def subsystems(self, members):
        members = frozenset(members)
        return {i: self.build(i, members) for i in sorted(members)}

    def ties(self, members):
        """Unordered tie lines ``(i, j, P_ij)`` with ``i < j`` among ``members``."""
        out = []
        for i in sorted(members):
            for j, P in sorted(self.areas[i].tie.items()):
                if i < j and j in members:
                    out.append((i, j, P))
        return out


@dataclass(frozen=True)
class AreaRebuilder:
    """Picklable rebuild callback: local matrices for a new set of members."""

    catalogue: AreaCatalogue
    id: int

    def __call__(self, members):
        return self.catalogue.build(self.id, members)


@dataclass(frozen=True)
class LoadSchedule:
    """Load steps ``(time, area, increment)``; the load of an area is the sum of its past steps."""

    events: tuple = ()

    def __post_init__(self):
        ev = tuple(sorted(((float(t), int(a), float(dp)) for t, a, dp in self.events), key=lambda e: e[0]))
        if any(t < 0 for t, _, _ in ev):
            raise ValueError("load step times must be nonnegative")
        object.__setattr__(self, "events", ev)

    def load_at(self, t, areas):
        out = {a: 0.0 for a in areas}
        for te, a, dp in self.events:
            if te <= t + 1e-9 and a in out:
                out[a] += dp
        return out


BUILTIN_AREAS = {
    1: AreaParams(H=12, R=0.05, D=0.7, Tt=0.65, Tg=0.1, u_bound=0.5, tie={2: 4.0}),
    2: AreaParams(H=10, R=0.0625, D=0.9, Tt=0.4, Tg=0.1, u_bound=0.65, tie={3: 2.0, 5: 3.0}),
    3: AreaParams(H=8, R=0.08, D=0.9, Tt=0.3, Tg=0.1, u_bound=0.65, tie={4: 2.0}),
    4: AreaParams(H=8, R=0.08, D=0.7, Tt=0.6, Tg=0.1, u_bound=0.55, tie={5: 3.0}),
    5: AreaParams(H=10, R=0.05, D=0.86, Tt=0.8, Tg=0.15, u_bound=0.5),
}

SCENARIO_MEMBERS = {1: (1, 2, 3, 4), 2: (1, 2, 3, 4, 5), 3: (1, 2, 3, 5)}

SCENARIO_LOADS = {
    1: ((5, 1, 0.15), (15, 2, -0.15), (20, 3, 0.12), (40, 3, -0.12), (40, 4, 0.28)),
    2: ((5, 1, 0.10), (15, 2, -0.17), (20, 1, 0.05), (20, 2, 0.12), (20, 3, -0.10),
        (30, 3, 0.10), (40, 4, 0.08), (40, 5, -0.15)),
    3: ((5, 1, 0.12), (15, 2, -0.15), (20, 5, 0.20), (40, 2, 0.15), (40, 3, 0.13), (40, 5, -0.20)),
}


def builtin_catalogue(T=SAMPLING_TIME):
    return AreaCatalogue(BUILTIN_AREAS, T)


def scenario(sid, opts=None):
    """``(Network, LoadSchedule)`` for scenario 1, 2 or 3 (controllers not yet designed)."""
    from .pnp import Network

    if sid not in SCENARIO_MEMBERS:
        raise ValueError(f"unknown scenario {sid!r}; expected 1, 2 or 3")
    cat = builtin_catalogue()
    net = Network(cat.subsystems(SCENARIO_MEMBERS[sid]), param_dependent=True, catalogue=cat)
    if opts is not None:
        net.options = opts
    return net, LoadSchedule(SCENARIO_LOADS[sid])


_AREA_KEYS = ("H", "R", "D", "Tt", "Tg", "u_bound", "theta_bound", "omega_bound", "pm_bound", "pv_bound")


def parse_network(doc):
    """Build ``(catalogue, members, schedule, defaults)`` from the JSON network schema.

    ``{"areas": [{"id", "H", "R", "D", "Tt", "Tg", "u_bound", "ties": {id: P}, ...}],
    "members": [...], "constraints": {...}, "loads": [[t, area, dP], ...],
    "defaults": {...}}``; ``constraints`` supplies per-network defaults for the
    state bounds and ``members`` defaults to all listed areas.
    """
    if not isinstance(doc, dict) or "areas" not in doc:
        raise ValueError("network file must be an object with an 'areas' list")
    cons = doc.get("constraints", {})
    unknown = set(cons) - set(_AREA_KEYS)
    if unknown:
        raise ValueError(f"unknown constraint keys: {sorted(unknown)}")
    areas = {}
    for a in doc["areas"]:
        if "id" not in a:
            raise ValueError("every area needs an 'id'")
        i = int(a["id"])
        if i in areas:
            raise ValueError(f"duplicate area id {i}")
        extra = set(a) - set(_AREA_KEYS) - {"id", "ties"}
        if extra:
            raise ValueError(f"area {i}: unknown keys {sorted(extra)}")
        kw = {k: float(cons[k]) for k in _AREA_KEYS if k in cons}
        kw.update({k: float(a[k]) for k in _AREA_KEYS if k in a})
        missing = {"H", "R", "D", "Tt", "Tg", "u_bound"} - set(kw)
        if missing:
            raise ValueError(f"area {i}: missing {sorted(missing)}")
        areas[i] = AreaParams(tie={int(j): float(P) for j, P in a.get("ties", {}).items()}, **kw)
    for i, p in areas.items():
        for j in p.tie:
            if j not in areas:
                raise ValueError(f"area {i} has a tie line to unknown area {j}")
    defaults = dict(doc.get("defaults", {}))
    cat = AreaCatalogue(areas, float(defaults.pop("T", SAMPLING_TIME)))
    members = tuple(int(i) for i in doc.get("members", sorted(areas)))
    for i in members:
        if i not in areas:
            raise ValueError(f"member {i} is not a defined area")
    loads = LoadSchedule(tuple(tuple(e) for e in doc.get("loads", ())))
    return cat, members, loads, defaults


def load_network(path):
    with open(path) as fh:
        doc = json.load(fh)
    return parse_network(doc)
