"""Decentralized synthesis of tube controllers.

Each controller is designed from local data plus the fixed shapes of the
neighbors' state sets. The coupling gain ``alpha``, the state tightening
bound ``Lhat`` and the input tightening ``beta`` decide whether the tube fits
inside the local constraints; the terminal ingredients close the MPC design.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linprog, minimize

from .lqr import LqWeights, RiccatiError, dare_solve, lq_gain, spectral_radius
from .rpi import RpiError, RpiResult, disturbance_set, mrpi_outer
from .setops import HPolytope, Zonotope, sum_in_polytope, support, zonotope_to_hrep

log = logging.getLogger(__name__)

SERIES_TOL = 1e-12
SERIES_MAX_TERMS = 100_000
PINV_RCOND = 1e-12
MPI_MAX_STEPS = 500
# diagonal LQ weights are searched in [e^-8, e^8] to keep the Riccati equation well conditioned
LOG_WEIGHT_BOX = 8.0

REASONS = ("no-feasible-gain", "alpha≥1", "Lhat≤0", "beta≥1", "empty-terminal-set")


class DesignRejected(Exception):
    """Algorithm step failure; ``reason`` is one of :data:`REASONS`."""

    def __init__(self, reason, sub_id=None, detail=""):
        msg = f"design of subsystem {sub_id} rejected: {reason}"
        super().__init__(msg + (f" ({detail})" if detail else ""))
        self.reason = reason
        self.sub_id = sub_id


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _hash_arrays(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype=float))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _normalize_rows(P):
    """Rescale an H-polytope so that every offset equals one."""
    if np.any(P.offsets <= 0):
        raise ValueError("set must contain the origin in its interior")
    return HPolytope(P.normals / P.offsets[:, None], np.ones(P.n_faces))


@dataclass(frozen=True, eq=False)
class Subsystem:
    """Discrete-time subsystem ``x+ = A x + B u + sum_j A_ij x_j (+ L p)``.

    ``X`` is stored both as a zonotope and as the H-polytope ``Xh`` with unit
    offsets; ``U`` also has unit offsets. ``L`` is an optional matrix for a
    measured exogenous input (the load in the power network). ``rebuild``
    returns the subsystem for a different set of present network members
    when local matrices depend on the neighborhood.
    """

    id: int
    A: np.ndarray
    B: np.ndarray
    couplings: dict
    X: Zonotope
    U: HPolytope
    Xh: HPolytope | None = None
    L: np.ndarray | None = None
    rebuild: Callable | None = field(default=None, repr=False)

    def __post_init__(self):
        A = _frozen(np.atleast_2d(self.A))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError("A must be square")
        B = _frozen(np.asarray(self.B, dtype=float).reshape(n, -1))
        cpl = {}
        for j, Aij in sorted(self.couplings.items()):
            j = int(j)
            if j == self.id:
                raise ValueError("a subsystem cannot be its own neighbor")
            Aij = np.atleast_2d(np.asarray(Aij, dtype=float))
            if Aij.shape[0] != n:
                raise ValueError(f"coupling block A_{self.id}{j} has {Aij.shape[0]} rows, expected {n}")
            if np.any(Aij != 0):
                cpl[j] = _frozen(Aij)
        if self.X.dim != n:
            raise ValueError("state set dimension mismatch")
        if np.any(self.X.center != 0):
            raise ValueError("state set must be centered at the origin")
        Xh = self.Xh if self.Xh is not None else zonotope_to_hrep(self.X)
        Xh = _normalize_rows(Xh)
        if np.linalg.matrix_rank(Xh.normals) < n:
            raise ValueError("state constraint normals must have full column rank")
        U = _normalize_rows(self.U)
        if U.dim != B.shape[1]:
            raise ValueError("input set dimension mismatch")
        L = None if self.L is None else _frozen(np.asarray(self.L, dtype=float).reshape(n, -1))
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "couplings", cpl)
        object.__setattr__(self, "Xh", Xh)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "L", L)

    @classmethod
    def from_boxes(cls, id, A, B, couplings, x_bounds, u_bounds, L=None, rebuild=None):
        X = Zonotope.box(x_bounds)
        return cls(id, A, B, couplings, X, HPolytope.box(u_bounds), HPolytope.box(x_bounds), L, rebuild)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def neighbors(self):
        return frozenset(self.couplings)

    def shape(self):
        """``(F, Xi)``: the fixed shape of ``X`` shared with the successors."""
        return self.Xh.normals, self.X.G

    def fingerprint(self):
        parts = [self.A, self.B, self.X.G, self.Xh.normals, self.U.normals]
        for j, Aij in sorted(self.couplings.items()):
            parts += [np.array([j]), Aij]
        if self.L is not None:
            parts.append(self.L)
        return _hash_arrays(*parts)


def neighbor_shapes(subsystems, i):
    """Shapes ``{j: (F_j, Xi_j)}`` of the neighbors of subsystem ``i``."""
    return {j: subsystems[j].shape() for j in subsystems[i].couplings}


@dataclass(frozen=True, eq=False)
class TubeController:
    K: np.ndarray
    delta: float
    Z: RpiResult
    W: Zonotope
    Xhat: Zonotope
    Xhat_h: HPolytope
    V: HPolytope
    terminal_set: HPolytope
    terminal_cost: np.ndarray
    aux_gain: np.ndarray
    horizon: int
    stage_weights: LqWeights
    alpha: float
    lhat: float
    beta: float

    def closed_loop(self, sub):
        return sub.A + sub.B @ self.K

    def fingerprint(self):
        return _hash_arrays(
            self.K, [self.delta], self.Z.set.G, self.Xhat.G, self.V.normals, self.V.offsets,
            self.terminal_set.normals, self.terminal_set.offsets, self.terminal_cost,
            self.aux_gain, [self.horizon], self.stage_weights.Q, self.stage_weights.R,
        )


# -- Theorem quantities -----------------------------------------------------

def _coupling_series(F, rows, blocks, abort_at=None):
    """Per-row sums ``sum_j sum_k ||rows_r F^k blk_j||_1`` and ``sum_j sum_k max_r``.

    Truncated once a whole term drops below ``SERIES_TOL``, or early when the
    max-row series reaches ``abort_at``.
    """
    rowsum = np.zeros(rows.shape[0])
    total = 0.0
    if not blocks:
        return rowsum, total
    if spectral_radius(F) >= 1.0:
        raise ValueError("closed-loop matrix is not Schur; coupling series diverges")
    imgs = [blk.copy() for blk in blocks]
    for _ in range(SERIES_MAX_TERMS):
        term = 0.0
        for t, img in enumerate(imgs):
            v = np.abs(rows @ img).sum(axis=1)
            rowsum += v
            term += v.max()
            imgs[t] = F @ img
        total += term
        if abort_at is not None and total >= abort_at:
            break
        if term < SERIES_TOL:
            break
    return rowsum, total


def _pinv(F):
    return np.linalg.pinv(F, rcond=PINV_RCOND)


def alpha_metric(sub, shapes, K, abort_at=1.0):
    """``alpha_i = sum_j sum_k ||F_i Phi^k A_ij pinv(F_j)||_inf`` (induced inf-norm).

    The series stops early once the partial sum reaches ``abort_at``; the
    returned value is then only a lower bound.
    """
    Phi = sub.A + sub.B @ np.atleast_2d(K)
    blocks = [sub.couplings[j] @ _pinv(shapes[j][0]) for j in sorted(sub.couplings)]
    _, total = _coupling_series(Phi, sub.Xh.normals, blocks, abort_at=abort_at)
    return total


def lhat(sub, shapes, K, delta, Xihat=None):
    """Per-row bounds and ``Lhat_i``; positive iff the delta-tube fits inside ``X_i``."""
    Phi = sub.A + sub.B @ np.atleast_2d(K)
    Fi = sub.Xh.normals
    Xihat = sub.X.G if Xihat is None else np.atleast_2d(Xihat)
    den = np.abs(Fi @ Xihat).sum(axis=1)
    if np.any(den <= 0):
        raise ZeroDivisionError("tightened shape is degenerate along some face normal")
    blocks = [sub.couplings[j] @ shapes[j][1] for j in sorted(sub.couplings)]
    rowsum, _ = _coupling_series(Phi, Fi, blocks)
    rows = (1.0 - rowsum) / den - np.abs(Fi).sum(axis=1) * delta / den
    return rows, float(rows.min())


def beta_metric(K, Z, U):
    """Input shrink ``l_v,r = h(K Z, h_r)`` and ``beta = max_r l_v,r``."""
    Zs = Z.set if isinstance(Z, RpiResult) else Z
    K = np.atleast_2d(K)
    KZ = Zonotope(K @ Zs.center, K @ Zs.G)
    shrink = support(KZ, U.normals) / U.offsets
    shrink = np.maximum(shrink, 0.0)
    return float(shrink.max(initial=0.0)), shrink


def smallgain_certificate(subsystems, gains):
    """Small-gain matrix ``Gamma`` (rows/cols in sorted id order) and whether it is Schur."""
    subsystems = getattr(subsystems, "subsystems", subsystems)
    ids = sorted(subsystems)
    pos = {i: k for k, i in enumerate(ids)}
    G = np.zeros((len(ids), len(ids)))
    for i in ids:
        sub = subsystems[i]
        Phi = sub.A + sub.B @ np.atleast_2d(gains[i])
        for j, Aij in sub.couplings.items():
            if j not in pos:
                raise KeyError(f"subsystem {i} couples to unknown id {j}")
            blk = Aij @ _pinv(subsystems[j].Xh.normals)
            _, G[pos[i], pos[j]] = _coupling_series(Phi, sub.Xh.normals, [blk])
    rho = spectral_radius(G) if G.size else 0.0
    return G, bool(rho < 1.0)


# -- terminal ingredients ---------------------------------------------------

def _lp_max(c, C, d):
    res = linprog(-c, A_ub=C, b_ub=d, bounds=[(None, None)] * C.shape[1], method="highs")
    if res.status == 3:
        return np.inf
    if res.status == 2:
        return -np.inf
    if res.status != 0:
        raise RuntimeError(f"LP failed: {res.message}")
    return -res.fun


def remove_redundant(P, tol=1e-9):
    """Drop inequalities implied by the others (one LP per face)."""
    C, d = np.array(P.normals), np.array(P.offsets)
    keep = np.ones(len(d), dtype=bool)
    for r in range(len(d)):
        keep[r] = False
        if not keep.any() or not _lp_max(C[r], C[keep], d[keep]) <= d[r] + tol:
            keep[r] = True
    return HPolytope(C[keep], d[keep])


def max_invariant_set(Phi, C, d, max_steps=MPI_MAX_STEPS, tol=1e-9):
    """Maximal positively invariant subset of ``{x : C x <= d}`` for ``x+ = Phi x``.

    Adds the constraints ``C Phi^k x <= d`` until every new row is implied by
    the current set. Returns ``None`` if the set is empty.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    d = np.asarray(d, dtype=float).reshape(-1)
    if np.any(d < 0):
        return None
    rows, rhs = [C], [d]
    Ck = C
    for _ in range(max_steps):
        Ck = Ck @ Phi
        Ca, da = np.vstack(rows), np.concatenate(rhs)
        vals = np.array([_lp_max(Ck[r], Ca, da) for r in range(Ck.shape[0])])
        if np.any(vals == -np.inf):
            return None
        new = np.flatnonzero(vals > d + tol)
        if new.size == 0:
            return remove_redundant(HPolytope(Ca, da))
        rows.append(Ck[new])
        rhs.append(d[new])
    raise RuntimeError(f"invariant set iteration did not converge in {max_steps} steps")


def _as_hpoly(S):
    return S if isinstance(S, HPolytope) else zonotope_to_hrep(S)


def terminal_ingredients(A, B, Xhat, V, w, x_ref=None, u_ref=None):
    """Terminal cost, auxiliary gain and terminal set.

    With a reference pair the set is built for the deviation ``x - x_ref``
    under ``u = u_ref + K_aux (x - x_ref)`` and returned translated to
    ``x_ref``. Raises ``ValueError`` when the terminal set is empty.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Xp, Vp = _as_hpoly(Xhat), _as_hpoly(V)
    if Vp.n_faces == 0 or np.any(Vp.offsets <= 0) or np.any(Xp.offsets <= 0):
        raise ValueError("Xhat and V must contain the origin in their interior")
    P = dare_solve(A, B, w)
    K = lq_gain(A, B, w, P)
    x_ref = np.zeros(A.shape[0]) if x_ref is None else np.asarray(x_ref, dtype=float)
    u_ref = np.zeros(B.shape[1]) if u_ref is None else np.asarray(u_ref, dtype=float)
    C = np.vstack([Xp.normals, Vp.normals @ K])
    d = np.concatenate([Xp.offsets - Xp.normals @ x_ref, Vp.offsets - Vp.normals @ u_ref])
    if np.any(d <= 0):
        raise ValueError("reference is not in the interior of the tightened constraints")
    Xf = max_invariant_set(A + B @ K, C, d)
    if Xf is None:
        raise ValueError("empty terminal set")
    return P, K, Xf.translated(x_ref)


# -- tuning -----------------------------------------------------------------

@dataclass(frozen=True)
class TuneResult:
    K: np.ndarray
    delta: float
    weights: LqWeights
    objective: float
    feasible: bool
    alpha: float
    lhat: float
    beta: float
    evaluations: int
    reason: str | None = None


@dataclass(frozen=True)
class _Eval:
    value: float
    feasible: bool
    reason: str | None
    K: np.ndarray | None = None
    alpha: float = np.inf
    lhat: float = -np.inf
    beta: float = np.inf


def evaluate_gain(sub, shapes, K, delta, mu_alpha=1.0, mu_beta=1.0):
    """Objective and feasibility of a fixed gain; infeasible points are penalized."""
    base = mu_alpha + mu_beta + 1.0
    try:
        # a large abort level keeps the penalty informative for infeasible gains
        a = alpha_metric(sub, shapes, K, abort_at=100.0)
    except ValueError:
        return _Eval(base + 10.0, False, "no-feasible-gain", K)
    if a >= 1.0:
        return _Eval(base + a, False, "alpha≥1", K, a)
    _, L = lhat(sub, shapes, K, delta)
    if L <= 0:
        return _Eval(base + 1.0 - L, False, "Lhat≤0", K, a, L)
    W = disturbance_set([(sub.couplings[j], Zonotope(np.zeros(shapes[j][1].shape[0]), shapes[j][1]))
                         for j in sorted(sub.couplings)], dim=sub.n)
    try:
        Z = mrpi_outer(sub.A + sub.B @ K, W, delta)
    except RpiError:
        return _Eval(base + 1.0, False, "no-feasible-gain", K, a, L)
    b, _ = beta_metric(K, Z, sub.U)
    if b >= 1.0:
        return _Eval(base + b, False, "beta≥1", K, a, L, b)
    return _Eval(mu_alpha * a + mu_beta * b, True, None, K, a, L, b)


def tune_gain(sub, shapes, mu_alpha=1.0, mu_beta=1.0, delta=1e-4, budget=500, tune_delta=False):
    """Search diagonal LQ weights (and optionally ``delta``) for the best feasible gain.

    Coordinate pattern search in log space seeded at ``Q = I, R = I``, then
    Nelder-Mead from the incumbent with whatever budget is left. Infeasible
    points are penalized above every feasible objective value.
    """
    if mu_alpha < 0 or mu_beta < 0:
        raise ValueError("objective weights must be nonnegative")
    n, m = sub.n, sub.m
    dim = n + m + (1 if tune_delta else 0)
    cache = {}

    def unpack(x):
        x = np.clip(x, -LOG_WEIGHT_BOX, LOG_WEIGHT_BOX)
        q, r = np.exp(x[:n]), np.exp(x[n:n + m])
        dl = float(np.exp(np.clip(x[-1], -30.0, 0.0))) if tune_delta else delta
        return q, r, dl

    def f(x):
        key = tuple(np.round(x, 12))
        if key in cache:
            return cache[key][0].value
        q, r, dl = unpack(x)
        try:
            w = LqWeights.diagonal(q, r)
            K = lq_gain(sub.A, sub.B, w)
        except (RiccatiError, np.linalg.LinAlgError, ValueError):
            ev = _Eval(mu_alpha + mu_beta + 20.0, False, "no-feasible-gain")
        else:
            ev = evaluate_gain(sub, shapes, K, dl, mu_alpha, mu_beta)
        cache[key] = (ev, np.array(x))
        return ev.value

    x = np.zeros(dim)
    if tune_delta:
        x[-1] = np.log(delta)
    fx = f(x)
    step = 2.0
    while len(cache) < budget and step > 1e-3:
        improved = False
        for k in range(dim):
            for sgn in (1.0, -1.0):
                if len(cache) >= budget:
                    break
                y = x.copy()
                y[k] += sgn * step
                fy = f(y)
                if fy < fx - 1e-12:
                    x, fx, improved = y, fy, True
                    break
        if not improved:
            step *= 0.5
    best = min(cache.values(), key=lambda t: t[0].value)
    if len(cache) < budget:
        # polish (or keep looking for a feasible point) with the remaining budget
        minimize(f, best[1], method="Nelder-Mead",
                 options={"maxfev": budget - len(cache), "xatol": 1e-4, "fatol": 1e-10})
        best = min(cache.values(), key=lambda t: t[0].value)
    ev, xb = best
    q, r, dl = unpack(xb)
    return TuneResult(ev.K, dl, LqWeights.diagonal(q, r), ev.value, ev.feasible,
                      ev.alpha, ev.lhat, ev.beta, len(cache), ev.reason)


# -- Algorithm ---------------------------------------------------------------

@dataclass(frozen=True)
class DesignOptions:
    delta: float = 1e-4
    mu_alpha: float = 1.0
    mu_beta: float = 1.0
    horizon: int = 20
    budget: int = 500
    tune_delta: bool = False
    gain: np.ndarray | None = None
    weights: LqWeights | None = None
    stage_weights: LqWeights | None = None


def design_controller(sub, shapes, opts=None):
    """Run the five design steps; raises :class:`DesignRejected` naming the failed step."""
    opts = opts or DesignOptions()
    # step 1: gain and delta
    if opts.gain is not None:
        K = np.atleast_2d(np.asarray(opts.gain, dtype=float))
        delta = opts.delta
        weights = opts.weights or LqWeights(np.eye(sub.n), np.eye(sub.m))
        if spectral_radius(sub.A + sub.B @ K) >= 1.0:
            raise DesignRejected("no-feasible-gain", sub.id, "given gain is not stabilizing")
        ev = evaluate_gain(sub, shapes, K, delta, opts.mu_alpha, opts.mu_beta)
        if not ev.feasible:
            raise DesignRejected(ev.reason, sub.id)
    else:
        tr = tune_gain(sub, shapes, opts.mu_alpha, opts.mu_beta, opts.delta, opts.budget, opts.tune_delta)
        if not tr.feasible:
            raise DesignRejected(tr.reason or "no-feasible-gain", sub.id,
                                 f"alpha={tr.alpha:.4g}, Lhat={tr.lhat:.4g}, beta={tr.beta:.4g}")
        K, delta, weights = tr.K, tr.delta, tr.weights
    Phi = sub.A + sub.B @ K
    a = alpha_metric(sub, shapes, K)
    if a >= 1.0:
        raise DesignRejected("alpha≥1", sub.id)

    # step 2: tube cross-section
    W = disturbance_set([(sub.couplings[j], Zonotope(np.zeros(shapes[j][1].shape[0]), shapes[j][1]))
                         for j in sorted(sub.couplings)], dim=sub.n)
    try:
        Z = mrpi_outer(Phi, W, delta)
    except RpiError as exc:
        raise DesignRejected("no-feasible-gain", sub.id, str(exc)) from exc

    # step 3: tightened state set; the certified excess of Z never exceeds delta
    _, L = lhat(sub, shapes, K, min(delta, Z.delta))
    if L <= 0:
        raise DesignRejected("Lhat≤0", sub.id)
    Xhat = Zonotope(np.zeros(sub.n), sub.X.generators, sub.X.scale * L)
    Xhat_h = HPolytope(sub.Xh.normals, L * sub.Xh.offsets)

    # step 4: tightened input set
    b, shrink = beta_metric(K, Z, sub.U)
    if b >= 1.0:
        raise DesignRejected("beta≥1", sub.id)
    V = HPolytope(sub.U.normals, sub.U.offsets - shrink)
    if not sum_in_polytope([Xhat, Z.set], sub.Xh):
        raise DesignRejected("Lhat≤0", sub.id, "state tightening inclusion failed numerically")

    # step 5: terminal ingredients
    stage = opts.stage_weights or weights
    try:
        Pf, Kaux, Xf = terminal_ingredients(sub.A, sub.B, Xhat_h, V, stage)
    except (ValueError, RiccatiError) as exc:
        raise DesignRejected("empty-terminal-set", sub.id, str(exc)) from exc
    return TubeController(
        K=_frozen(K), delta=float(delta), Z=Z, W=W, Xhat=Xhat, Xhat_h=Xhat_h, V=V,
        terminal_set=Xf, terminal_cost=_frozen(Pf), aux_gain=_frozen(Kaux),
        horizon=int(opts.horizon), stage_weights=stage, alpha=a, lhat=L, beta=b,
    )
