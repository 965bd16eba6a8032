"""Zonotope and H-polytope algebra.

Zonotopes are stored as ``{center + G d : ||d||_inf <= scale}``. Keeping the
scale separate from the generator matrix lets a tightened set share the shape
of the original one while only the zoom factor changes.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations, islice

import numpy as np
from scipy.optimize import linprog

TOL = 1e-9
MAX_HREP_DIM = 6


class DegenerateZonotopeError(ValueError):
    """Raised when a zonotope is lower-dimensional than its ambient space."""

    def __init__(self, rank, dim):
        super().__init__(f"zonotope spans a {rank}-dimensional subspace of R^{dim}")
        self.rank = rank
        self.dim = dim


def _readonly(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Zonotope:
    center: np.ndarray
    generators: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        c = _readonly(np.array(self.center, dtype=float).reshape(-1))
        g = np.array(self.generators, dtype=float)
        if g.ndim == 1:
            g = g.reshape(c.size, -1)
        if g.shape[0] != c.size:
            raise ValueError(f"generator matrix has {g.shape[0]} rows, center has {c.size}")
        _readonly(g)
        if not self.scale > 0:
            raise ValueError("zonotope scale must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "generators", g)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def box(cls, bounds, center=None):
        """Axis-aligned box ``|x_k - c_k| <= bounds_k``."""
        b = np.asarray(bounds, dtype=float).reshape(-1)
        c = np.zeros(b.size) if center is None else center
        return cls(c, np.diag(b))

    @classmethod
    def point(cls, p):
        p = np.asarray(p, dtype=float).reshape(-1)
        return cls(p, np.zeros((p.size, 0)))

    @property
    def dim(self):
        return self.center.size

    @property
    def order(self):
        """Number of generators."""
        return self.generators.shape[1]

    @property
    def G(self):
        """Generators with the scale absorbed."""
        return self.scale * self.generators

    def normalized(self):
        if self.scale == 1.0:
            return self
        return Zonotope(self.center, self.G)

    def scaled(self, factor):
        """Return ``factor * Z`` about the origin."""
        return Zonotope(factor * self.center, self.generators, self.scale * factor)

    def is_singleton(self, tol=0.0):
        return self.order == 0 or np.all(np.abs(self.G) <= tol)

    def vertices(self):
        """Brute-force vertex candidates from all 2^e sign patterns."""
        e = self.order
        if e == 0:
            return self.center.reshape(1, -1)
        if e > 20:
            raise ValueError("too many generators for sign enumeration")
        signs = np.array(np.meshgrid(*[[-1.0, 1.0]] * e)).reshape(e, -1).T
        return self.center + signs @ self.G.T

    def __repr__(self):
        return f"Zonotope(dim={self.dim}, order={self.order}, scale={self.scale:g})"


@dataclass(frozen=True, eq=False)
class HPolytope:
    normals: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        F = np.atleast_2d(np.array(self.normals, dtype=float))
        g = np.array(self.offsets, dtype=float).reshape(-1)
        if F.shape[0] != g.size:
            raise ValueError(f"{F.shape[0]} normals but {g.size} offsets")
        _readonly(F)
        _readonly(g)
        object.__setattr__(self, "normals", F)
        object.__setattr__(self, "offsets", g)

    @classmethod
    def box(cls, bounds):
        """``|x_k| <= bounds_k`` with rows normalized to unit offsets."""
        b = np.asarray(bounds, dtype=float).reshape(-1)
        D = np.diag(1.0 / b)
        return cls(np.vstack([D, -D]), np.ones(2 * b.size))

    @property
    def dim(self):
        return self.normals.shape[1]

    @property
    def n_faces(self):
        return self.normals.shape[0]

    def contains(self, x, tol=TOL):
        """Membership for one point or a batch of row-stacked points."""
        x = np.asarray(x, dtype=float)
        vals = x @ self.normals.T - self.offsets
        return np.all(vals <= tol, axis=-1)

    def scaled(self, factor):
        return HPolytope(self.normals, factor * self.offsets)

    def translated(self, p):
        return HPolytope(self.normals, self.offsets + self.normals @ np.asarray(p, dtype=float))


def _check_dim(n, m, what):
    if n != m:
        raise ValueError(f"dimension mismatch in {what}: {n} != {m}")


def support(Z, c):
    """Support function ``sup_{x in Z} c^T x = c^T p + l ||G^T c||_1``."""
    c = np.asarray(c, dtype=float)
    _check_dim(c.shape[-1], Z.dim, "support")
    val = c @ Z.center
    if Z.order:
        val = val + Z.scale * np.abs(c @ Z.generators).sum(axis=-1)
    return val


def _merge_collinear(G, tol=1e-12):
    """Drop zero columns and sum collinear generators (support is unchanged)."""
    if G.shape[1] == 0:
        return G
    norms = np.linalg.norm(G, axis=0)
    keep = norms > tol * max(1.0, norms.max())
    G = G[:, keep]
    norms = norms[keep]
    if G.shape[1] <= 1:
        return G
    U = G / norms
    # canonical sign: first significant entry positive
    idx = np.argmax(np.abs(U) > 1e-9, axis=0)
    sgn = np.sign(U[idx, np.arange(U.shape[1])])
    U = U * sgn
    merged, used = [], np.zeros(G.shape[1], dtype=bool)
    for k in range(G.shape[1]):
        if used[k]:
            continue
        same = (~used) & (np.linalg.norm(U - U[:, [k]], axis=0) < 1e-9)
        used |= same
        merged.append(U[:, k] * norms[same].sum())
    return np.column_stack(merged)


def reduce_generators(Z):
    """Exact simplification: remove zero generators and merge parallel ones."""
    G = _merge_collinear(Z.G)
    return Zonotope(Z.center, G if G.size else np.zeros((Z.dim, 0)))


def minkowski_sum(Z1, Z2, merge=True):
    _check_dim(Z1.dim, Z2.dim, "minkowski_sum")
    Z = Zonotope(Z1.center + Z2.center, np.hstack([Z1.G, Z2.G]))
    return reduce_generators(Z) if merge else Z


def minkowski_sum_many(parts, dim=None, merge=True):
    parts = list(parts)
    if not parts:
        if dim is None:
            raise ValueError("empty Minkowski sum needs an explicit dimension")
        return Zonotope.point(np.zeros(dim))
    n = parts[0].dim
    for p in parts:
        _check_dim(p.dim, n, "minkowski_sum")
    Z = Zonotope(sum(p.center for p in parts), np.hstack([p.G for p in parts]))
    return reduce_generators(Z) if merge else Z


def linear_image(M, Z):
    """Return ``{M x : x in Z}``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    _check_dim(M.shape[1], Z.dim, "linear_image")
    return Zonotope(M @ Z.center, M @ Z.generators, Z.scale)


def _facet_normals(G, chunk=100_000):
    """Normals of all hyperplanes spanned by (n-1)-subsets of generator columns."""
    n, e = G.shape
    if n == 1:
        return np.ones((1, 1))
    combos = combinations(range(e), n - 1)
    found = []
    while True:
        idx = np.fromiter((i for c in islice(combos, chunk) for i in c), dtype=int)
        if idx.size == 0:
            break
        sub = G.T[idx.reshape(-1, n - 1)]  # (ncomb, n-1, n)
        normals = np.empty((sub.shape[0], n))
        for k in range(n):
            normals[:, k] = (-1) ** k * np.linalg.det(np.delete(sub, k, axis=2))
        found.append(normals)
    normals = np.vstack(found)
    nrm = np.linalg.norm(normals, axis=1)
    ok = nrm > 1e-13 * max(1.0, nrm.max())
    normals = normals[ok] / nrm[ok, None]
    # one representative per line through the origin
    first = np.argmax(np.abs(normals) > 1e-9, axis=1)
    normals *= np.sign(normals[np.arange(len(normals)), first])[:, None]
    _, uniq = np.unique(np.round(normals, 9), axis=0, return_index=True)
    return normals[np.sort(uniq)]


def zonotope_to_hrep(Z, max_dim=MAX_HREP_DIM):
    """Exact facet description of a full-dimensional zonotope.

    Every facet normal is orthogonal to some ``n-1`` linearly independent
    generators, so enumerating those subsets and taking the support value in
    both directions gives all facets.
    """
    n = Z.dim
    if n > max_dim:
        raise ValueError(f"zonotope_to_hrep limited to dimension <= {max_dim}, got {n}")
    Zr = reduce_generators(Z)
    G = Zr.generators
    rank = np.linalg.matrix_rank(G) if G.size else 0
    if rank < n:
        raise DegenerateZonotopeError(rank, n)
    C = _facet_normals(G)
    h = np.abs(C @ G).sum(axis=1)
    F = np.vstack([C, -C])
    g = np.concatenate([h, h]) + F @ Zr.center
    return HPolytope(F, g)


def zonotope_member(Z, x, tol=TOL):
    """Decide ``x in Z`` with a small LP over the generator coefficients."""
    x = np.asarray(x, dtype=float).reshape(-1)
    _check_dim(x.size, Z.dim, "zonotope_member")
    r = x - Z.center
    G = Z.G
    e = G.shape[1]
    if e == 0:
        return bool(np.all(np.abs(r) <= tol))
    # min t  s.t.  G d = r, |d_k| <= t
    cost = np.zeros(e + 1)
    cost[-1] = 1.0
    A_ub = np.block([[np.eye(e), -np.ones((e, 1))], [-np.eye(e), -np.ones((e, 1))]])
    b_ub = np.zeros(2 * e)
    A_eq = np.hstack([G, np.zeros((Z.dim, 1))])
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=r,
                  bounds=[(None, None)] * e + [(0, None)], method="highs")
    if res.status == 2:
        return False
    if res.status != 0:
        raise RuntimeError(f"membership LP failed: {res.message}")
    d = res.x[:e]
    return bool(res.x[-1] <= 1.0 + tol and np.linalg.norm(G @ d - r, np.inf) <= tol * 10)


def sum_in_polytope(parts, P, tol=TOL):
    """Exact test of ``parts[0] + parts[1] + ... ⊆ P`` via support functions."""
    total = np.zeros(P.n_faces)
    for Z in parts:
        _check_dim(Z.dim, P.dim, "sum_in_polytope")
        total += support(Z, P.normals)
    return bool(np.all(total <= P.offsets + tol))


def containment_margin(parts, P):
    """Per-face slack ``g_r - sum_parts h(part, f_r)``; nonnegative means contained."""
    total = np.zeros(P.n_faces)
    for Z in parts:
        total += support(Z, P.normals)
    return P.offsets - total
