"""Network registry and plug-and-play operations.

Plugging a subsystem in redesigns its own controller and those of its
successors; unplugging redesigns nothing unless the successors' local
dynamics depend on the removed neighbor. Both operations are transactional.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from ._parallel import parallel_map
from .lqr import spectral_radius
from .tube_synth import (
    DesignOptions,
    DesignRejected,
    design_controller,
    neighbor_shapes,
    smallgain_certificate,
)

log = logging.getLogger(__name__)


class PlugRejected(Exception):
    def __init__(self, step, sub_id, detail=""):
        super().__init__(f"cannot plug in: design of {sub_id} failed at {step}" + (f" ({detail})" if detail else ""))
        self.step = step
        self.sub_id = sub_id


class UnplugRejected(Exception):
    def __init__(self, step, sub_id, detail=""):
        super().__init__(f"cannot unplug: redesign of {sub_id} failed at {step}" + (f" ({detail})" if detail else ""))
        self.step = step
        self.sub_id = sub_id


@dataclass
class Network:
    """Subsystems by id, their controllers and the design options.

    ``param_dependent`` marks networks whose local matrices change with the
    neighborhood; every subsystem then carries a ``rebuild`` callback.
    ``catalogue`` optionally knows subsystems that are not (yet) connected.
    """

    subsystems: dict
    controllers: dict = field(default_factory=dict)
    param_dependent: bool = False
    options: DesignOptions = field(default_factory=DesignOptions)
    catalogue: object = None

    def __post_init__(self):
        for i, sub in self.subsystems.items():
            if sub.id != i:
                raise ValueError(f"subsystem stored under {i} has id {sub.id}")
        for i, sub in self.subsystems.items():
            for j in sub.couplings:
                if j not in self.subsystems:
                    raise ValueError(f"subsystem {i} is coupled to unknown id {j}")

    @property
    def ids(self):
        return sorted(self.subsystems)

    def neighbors(self, i):
        return self._get(i).neighbors

    def _get(self, i):
        try:
            return self.subsystems[i]
        except KeyError:
            raise KeyError(f"unknown subsystem id {i}") from None

    def hashes(self):
        return {i: c.fingerprint() for i, c in self.controllers.items()}

    def gamma(self):
        """Small-gain matrix of the current controllers and whether it is Schur."""
        return smallgain_certificate(self.subsystems, {i: c.K for i, c in self.controllers.items()})


def successors(net, i):
    """``S_i = {j : i in N_j}``."""
    net._get(i)
    return frozenset(j for j, sub in net.subsystems.items() if i in sub.couplings)


def _design_many(subsystems, ids, opts):
    """Design controllers for ``ids``; returns ``{id: controller}`` or raises on the first rejection."""
    ids = sorted(ids)

    def one(i):
        try:
            return design_controller(subsystems[i], neighbor_shapes(subsystems, i), opts), None
        except DesignRejected as exc:
            return None, exc

    out = {}
    for i, (ctrl, exc) in zip(ids, parallel_map(one, ids)):
        if exc is not None:
            raise exc
        out[i] = ctrl
    return out


def design_all(net):
    """Design every controller of the network; raises :class:`DesignRejected`."""
    ctrls = _design_many(net.subsystems, net.subsystems, net.options)
    net.controllers = ctrls
    return ctrls


@dataclass(frozen=True)
class PlugReport:
    created: int
    redesigned: tuple
    gamma_before: float | None
    gamma_after: float


@dataclass(frozen=True)
class UnplugReport:
    removed: int
    redesigned: tuple
    retune_suggested: tuple
    gamma_before: float | None
    gamma_after: float


def _rho(net):
    if set(net.controllers) != set(net.subsystems):
        return None
    G, _ = net.gamma()
    return spectral_radius(G)


def plug_in(net, new_sub, back_couplings=None):
    """Connect ``new_sub`` and redesign exactly its controller and its successors'.

    ``back_couplings`` maps existing ids ``j`` to ``A_j,new``; it is ignored
    for parameter-dependent networks, where successors are rebuilt through
    their callbacks. On rejection the network is unchanged.
    """
    k = new_sub.id
    if k in net.subsystems:
        raise ValueError(f"subsystem id {k} already present")
    for j in new_sub.couplings:
        net._get(j)
    before = _rho(net)
    members = frozenset(net.subsystems) | {k}
    subs = dict(net.subsystems)
    subs[k] = new_sub
    if net.param_dependent:
        for j, sub in net.subsystems.items():
            if sub.rebuild is None:
                raise ValueError(f"subsystem {j} has no rebuild callback")
            rebuilt = sub.rebuild(members)
            if k in rebuilt.couplings or rebuilt.fingerprint() != sub.fingerprint():
                subs[j] = rebuilt
    else:
        for j, Ajk in (back_couplings or {}).items():
            old = net._get(j)
            cpl = dict(old.couplings)
            cpl[k] = Ajk
            subs[j] = type(old)(old.id, old.A, old.B, cpl, old.X, old.U, old.Xh, old.L, old.rebuild)
    succ = {j for j in subs if j != k and k in subs[j].couplings}
    changed = {j for j in net.subsystems if subs[j] is not net.subsystems[j]}
    if changed - succ:
        raise ValueError(f"plugging {k} would change non-successors {sorted(changed - succ)}")
    try:
        new_ctrls = _design_many(subs, {k} | succ, net.options)
    except DesignRejected as exc:
        raise PlugRejected(exc.reason, exc.sub_id, str(exc)) from exc
    net.subsystems = subs
    net.controllers = {**net.controllers, **new_ctrls}
    return PlugReport(k, tuple(sorted(new_ctrls, key=lambda i: (i != k, i))), before, _rho(net))


def unplug(net, k, retune=False):
    """Disconnect ``k``; successors are redesigned only if their dynamics change (or on request)."""
    net._get(k)
    before = _rho(net)
    succ = successors(net, k)
    members = frozenset(net.subsystems) - {k}
    subs = {i: s for i, s in net.subsystems.items() if i != k}
    for j in succ:
        old = subs[j]
        if net.param_dependent:
            if old.rebuild is None:
                raise ValueError(f"subsystem {j} has no rebuild callback")
            subs[j] = old.rebuild(members)
        else:
            cpl = {i: A for i, A in old.couplings.items() if i != k}
            subs[j] = type(old)(old.id, old.A, old.B, cpl, old.X, old.U, old.Xh, old.L, old.rebuild)
    redo = set(succ) if (net.param_dependent or retune) else set()
    try:
        new_ctrls = _design_many(subs, redo, net.options)
    except DesignRejected as exc:
        raise UnplugRejected(exc.reason, exc.sub_id, str(exc)) from exc
    ctrls = {i: c for i, c in net.controllers.items() if i != k}
    ctrls.update(new_ctrls)
    net.subsystems = subs
    net.controllers = ctrls
    suggested = () if redo else tuple(sorted(succ))
    return UnplugReport(k, tuple(sorted(new_ctrls)), suggested, before, _rho(net))
