"""Outer approximations of the minimal robust positively invariant set.

For ``z+ = F z + w`` with ``w in W`` the minimal RPI set is the infinite sum
``W + FW + F^2 W + ...``. Two finite constructions are used:

* full-dimensional ``W``: find ``s`` and ``alpha`` with ``F^s W ⊆ alpha W``;
  then ``(1 - alpha)^{-1} (W + FW + ... + F^{s-1} W)`` is RPI.
* rank-deficient ``W`` (the containment above can never hold): keep the
  truncated sum and add a small tail set ``E`` with ``F E + F^s W ⊆ E``.

In both cases the excess over the minimal set is certified in the 2-norm.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lqr import spectral_radius
from .setops import (
    TOL,
    DegenerateZonotopeError,
    Zonotope,
    linear_image,
    minkowski_sum_many,
    reduce_generators,
    support,
    zonotope_member,
    zonotope_to_hrep,
)

MAX_STEPS = 200


class RpiError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class RpiResult:
    set: Zonotope
    alpha: float
    steps: int
    delta: float
    tail: Zonotope | None = None

    @property
    def generators(self):
        return self.set.G


def disturbance_set(neighbors, dim=None):
    """``W = sum_j A_ij X_j`` for a list of ``(A_ij, X_j)`` pairs."""
    neighbors = list(neighbors)
    if not neighbors and dim is None:
        raise ValueError("dimension required when there are no neighbors")
    images = []
    for Aij, Xj in neighbors:
        Aij = np.atleast_2d(np.asarray(Aij, dtype=float))
        if dim is not None and Aij.shape[0] != dim:
            raise ValueError(f"coupling block has {Aij.shape[0]} rows, expected {dim}")
        images.append(linear_image(Aij, Xj))
    return minkowski_sum_many(images, dim=dim)


def box_radius(G):
    """2-norm radius bound of ``{G d : |d|_inf <= 1}``: sqrt(n) * max coordinate support."""
    if G.size == 0:
        return 0.0
    return float(np.sqrt(G.shape[0]) * np.abs(G).sum(axis=1).max())


def _check_inputs(F, W, delta):
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if F.shape != (W.dim, W.dim):
        raise ValueError(f"F has shape {F.shape}, W has dimension {W.dim}")
    if delta <= 0:
        raise ValueError("delta must be positive")
    if np.any(np.abs(W.center) > 0):
        raise ValueError("W must be centered at the origin")
    rho = spectral_radius(F)
    if rho >= 1.0:
        raise RpiError(f"F is not Schur (spectral radius {rho:.6f})")
    return F


def mrpi_outer(F, W, delta, max_steps=MAX_STEPS):
    """RPI set within 2-norm distance ``delta`` of the minimal RPI set."""
    F = _check_inputs(F, W, delta)
    n = W.dim
    Wr = reduce_generators(W)
    if Wr.order == 0:
        return RpiResult(Zonotope.point(np.zeros(n)), 0.0, 1, 0.0)
    Gw = Wr.generators
    if np.linalg.matrix_rank(Gw) == n:
        return _rakovic(F, Wr, delta, max_steps)
    return _with_tail(F, Gw, delta, max_steps)


def _rakovic(F, W, delta, max_steps):
    P = zonotope_to_hrep(W)
    Gw = W.generators
    blocks = [Gw]
    Fs = F.copy()
    for s in range(1, max_steps + 1):
        img = Fs @ Gw
        alpha = float(np.max(np.abs(P.normals @ img).sum(axis=1) / P.offsets))
        if alpha < 1.0:
            excess = alpha / (1.0 - alpha) * box_radius(np.hstack(blocks))
            if excess <= delta:
                S = Zonotope(np.zeros(W.dim), np.hstack(blocks))
                return RpiResult(S.scaled(1.0 / (1.0 - alpha)), alpha, s, excess)
        blocks.append(img)
        Fs = F @ Fs
    raise RpiError(f"no admissible s <= {max_steps}; coupling too strong for delta={delta:g}")


def _tail_order(F, lam_max=0.5, q_max=100):
    Fq = F.copy()
    for q in range(1, q_max + 1):
        lam = np.abs(Fq).sum(axis=1).max()
        if lam <= lam_max:
            return q, float(lam)
        Fq = F @ Fq
    raise RpiError("could not find a contracting power of F")


def _with_tail(F, Gw, delta, max_steps):
    n = F.shape[0]
    q, lam = _tail_order(F)
    # E0 = [I, F, ..., F^{q-1}] generates sum_j F^j B with B the unit box
    powers = [np.eye(n)]
    for _ in range(q - 1):
        powers.append(F @ powers[-1])
    E0 = np.hstack(powers)
    e_radius = box_radius(E0)
    blocks = [Gw]
    Fs = F.copy()
    for s in range(1, max_steps + 1):
        img = Fs @ Gw
        mu = float(np.abs(img).sum(axis=1).max())  # F^s W inside mu * unit box
        r = mu / (1.0 - lam)
        excess = r * e_radius
        if excess <= delta:
            gens = np.hstack(blocks + ([r * E0] if r > 0 else []))
            tail = Zonotope(np.zeros(n), r * E0) if r > 0 else None
            return RpiResult(Zonotope(np.zeros(n), gens), 0.0, s, excess, tail)
        blocks.append(img)
        Fs = F @ Fs
    raise RpiError(f"no admissible s <= {max_steps}; coupling too strong for delta={delta:g}")


def rpi_exact_check(F, W, Z, tol=TOL):
    """Exact test of ``F Z + W ⊆ Z`` through the facets of ``Z``."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if Z.is_singleton():
        img = minkowski_sum_many([linear_image(F, Z), W])
        return bool(np.all(np.abs(img.G) <= tol) and np.allclose(img.center, Z.center, atol=tol))
    P = zonotope_to_hrep(Z)
    lhs = support(linear_image(F, Z), P.normals) + support(W, P.normals)
    return bool(np.all(lhs <= P.offsets + tol))


def _sample_coeffs(rng, k, e):
    d = rng.uniform(-1.0, 1.0, size=(k, e))
    vert = rng.random(k) < 0.5
    d[vert] = np.sign(d[vert])
    return d


def rpi_check(F, W, Z, samples=10_000, rng=None, tol=TOL):
    """Monte-Carlo invariance test with vertex-biased samples ``z in Z``, ``w in W``."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    rng = np.random.default_rng(rng)
    z = Z.center + _sample_coeffs(rng, samples, Z.order) @ Z.G.T
    w = W.center + _sample_coeffs(rng, samples, W.order) @ W.G.T
    nxt = z @ F.T + w
    try:
        P = zonotope_to_hrep(Z)
    except DegenerateZonotopeError:
        P = None
    except MemoryError:  # pragma: no cover
        P = None
    if P is not None:
        return bool(np.all(P.contains(nxt, tol=tol)))
    return all(zonotope_member(Z, x, tol=tol) for x in nxt)
