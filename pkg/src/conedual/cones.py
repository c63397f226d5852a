"""Closed convex cones: polars, Euclidean projections and membership tests.

Six representations are supported: the whole space, the origin, the
nonnegative orthant, the conic hull of finitely many rays, a finite
intersection of halfspaces ``{u : g_i' u <= 0}`` and a linear subspace.
Projections are exact (closed form or a finite active-set method) except
for halfspace intersections with more than ``EXACT_FACET_LIMIT`` normals,
which fall back to Dykstra's alternating projections.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from .errors import InfeasiblePoint, NonConvergence, UnsupportedRepresentation

MEMBERSHIP_TOL = 1e-8
VARIATIONAL_TOL = 1e-7
EXACT_FACET_LIMIT = 16
DYKSTRA_MAX_ITER = 10_000
DYKSTRA_TOL = 1e-10
CONVERSION_LIMIT = 64
CONVERSION_MAX_DIM = 8
CONVERSION_MAX_SUBSETS = 200_000


def _rows(vectors, dim=None) -> np.ndarray:
    arr = np.asarray(vectors, dtype=float)
    if arr.size == 0:
        if dim is None:
            raise ValueError("cannot infer dimension from an empty vector list")
        return np.zeros((0, dim))
    arr = np.atleast_2d(arr)
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"vectors must have {dim} components, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("cone vectors must be finite")
    return arr


class Cone:
    """Base class; concrete variants implement ``_project`` on a 2-D batch."""

    dim: int

    def project(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"point has {x.shape[-1]} components, cone lives in R^{self.dim}")
        batch = x.reshape(-1, self.dim)
        return self._project(batch).reshape(x.shape)

    def _project(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def generators(self) -> np.ndarray:
        """Finite set of vectors whose conic hull is the cone, when cheaply available."""
        raise NotImplementedError

    @cached_property
    def polar(self) -> "Cone":
        return _polar(self)


@dataclass(frozen=True, eq=False)
class FullSpace(Cone):
    dim: int

    def _project(self, x):
        return x.copy()

    def generators(self):
        eye = np.eye(self.dim)
        return np.vstack([eye, -eye])


@dataclass(frozen=True, eq=False)
class ZeroCone(Cone):
    dim: int

    def _project(self, x):
        return np.zeros_like(x)

    def generators(self):
        return np.zeros((0, self.dim))


@dataclass(frozen=True, eq=False)
class NonnegativeOrthant(Cone):
    dim: int

    def _project(self, x):
        return np.maximum(x, 0.0)

    def generators(self):
        return np.eye(self.dim)


@dataclass(frozen=True, eq=False)
class RayGenerated(Cone):
    """Conic hull of the rows of ``generators``."""

    rays: np.ndarray
    dim: int = None

    def __post_init__(self):
        rays = _rows(self.rays, self.dim)
        if np.any(np.linalg.norm(rays, axis=1) == 0):
            raise ValueError("ray generators must be nonzero")
        object.__setattr__(self, "rays", rays)
        object.__setattr__(self, "dim", rays.shape[1])

    def generators(self):
        return self.rays

    def _project(self, x):
        rays = self.rays
        if rays.shape[0] == 0:
            return np.zeros_like(x)
        if rays.shape[0] == 1:
            v = rays[0]
            coef = np.maximum(x @ v, 0.0) / (v @ v)
            return coef[:, None] * v
        return _nnls_project(rays, x)


@dataclass(frozen=True, eq=False)
class HalfspaceIntersection(Cone):
    """``{u : g_i' u <= 0 for every row g_i of normals}``."""

    normals: np.ndarray
    dim: int = None

    def __post_init__(self):
        normals = _rows(self.normals, self.dim)
        keep = np.linalg.norm(normals, axis=1) > 0
        object.__setattr__(self, "normals", normals[keep])
        object.__setattr__(self, "dim", normals.shape[1])

    @cached_property
    def _rays(self):
        return _extreme_rays(self.normals, self.dim)

    def generators(self):
        return self._rays

    def _project(self, x):
        normals = self.normals
        if normals.shape[0] == 0:
            return x.copy()
        if normals.shape[0] == 1:
            g = normals[0]
            excess = np.maximum(x @ g, 0.0) / (g @ g)
            return x - excess[:, None] * g
        if normals.shape[0] <= EXACT_FACET_LIMIT:
            # Moreau: the polar is the conic hull of the normals
            return x - _nnls_project(normals, x)
        return np.array([_dykstra_halfspaces(normals, row) for row in x])

    def slack(self, x) -> np.ndarray:
        """Largest constraint value ``max_i g_i' x`` (nonpositive inside)."""
        x = np.asarray(x, dtype=float)
        if self.normals.shape[0] == 0:
            return np.full(x.shape[:-1], -np.inf)
        return np.max(x @ self.normals.T, axis=-1)


@dataclass(frozen=True, eq=False)
class Subspace(Cone):
    """Linear span of the rows of ``basis`` (must be linearly independent)."""

    basis: np.ndarray
    dim: int = None

    def __post_init__(self):
        basis = _rows(self.basis, self.dim)
        if basis.shape[0] == 0:
            raise ValueError("subspace basis must be nonempty; use ZeroCone")
        if np.linalg.matrix_rank(basis) < basis.shape[0]:
            raise ValueError("subspace basis must be linearly independent")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "dim", basis.shape[1])

    @cached_property
    def _orth(self):
        q, _ = np.linalg.qr(self.basis.T)
        return q

    def generators(self):
        return np.vstack([self.basis, -self.basis])

    def _project(self, x):
        q = self._orth
        return (x @ q) @ q.T


def nnls(a: np.ndarray, b: np.ndarray, max_iter: int | None = None) -> np.ndarray:
    """Lawson-Hanson active-set solution of ``min |a x - b|`` subject to ``x >= 0``."""
    m, n = a.shape
    max_iter = 30 * n + 30 if max_iter is None else max_iter
    eps = np.finfo(float).eps
    dual_tol = 1e3 * eps * max(m, n) * max(1.0, np.linalg.norm(a) * np.linalg.norm(b))
    passive = np.zeros(n, dtype=bool)
    skipped = np.zeros(n, dtype=bool)
    x = np.zeros(n)
    w = a.T @ b
    it = 0
    while np.any(~passive & ~skipped & (w > dual_tol)):
        if it >= max_iter:
            raise NonConvergence("nnls hit the iteration cap", residual=float(np.max(w[~passive])))
        j = np.argmax(np.where(passive | skipped, -np.inf, w))
        passive[j] = True
        first = True
        while True:
            it += 1
            s = np.zeros(n)
            s[passive], *_ = np.linalg.lstsq(a[:, passive], b, rcond=None)
            if first and s[j] <= 0:
                # column j cannot enter with a positive weight (degenerate direction)
                passive[j] = False
                skipped[j] = True
                s = x
                break
            first = False
            if np.all(s[passive] > 0):
                skipped[:] = False
                break
            blocking = passive & (s <= 0)
            alpha = np.min(x[blocking] / (x[blocking] - s[blocking]))
            x = x + alpha * (s - x)
            passive &= x > eps * max(1.0, np.abs(x).max())
            x[~passive] = 0.0
            skipped[:] = False
        x = s
        w = a.T @ (b - a @ x)
    return x


def nnls_batch(a: np.ndarray, b: np.ndarray, max_iter: int | None = None) -> np.ndarray:
    """:func:`nnls` for every row of ``b`` at once.

    Rows advance through the same Lawson-Hanson steps in lockstep; least
    squares subproblems are solved once per distinct passive set.  Rows still
    running at the cap are finished by the scalar routine.
    """
    m, n = a.shape
    b = np.atleast_2d(b)
    rows = b.shape[0]
    max_iter = 30 * n + 30 if max_iter is None else max_iter
    eps = np.finfo(float).eps
    dual_tol = 1e3 * eps * max(m, n) * np.maximum(1.0, np.linalg.norm(a) * np.linalg.norm(b, axis=1))
    passive = np.zeros((rows, n), dtype=bool)
    skipped = np.zeros((rows, n), dtype=bool)
    x = np.zeros((rows, n))
    entering = np.zeros(rows, dtype=int)
    first = np.zeros(rows, dtype=bool)
    inner = np.zeros(rows, dtype=bool)
    done = np.zeros(rows, dtype=bool)
    weights = 1 << np.arange(n)
    for _ in range(max_iter):
        outer = ~done & ~inner
        if np.any(outer):
            idx = np.flatnonzero(outer)
            w = (b[idx] - x[idx] @ a.T) @ a
            cand = ~passive[idx] & ~skipped[idx] & (w > dual_tol[idx, None])
            has = cand.any(axis=1)
            done[idx[~has]] = True
            idx, w, cand = idx[has], w[has], cand[has]
            j = np.argmax(np.where(cand, w, -np.inf), axis=1)
            passive[idx, j] = True
            entering[idx] = j
            first[idx] = True
            inner[idx] = True
        idx = np.flatnonzero(inner & ~done)
        if idx.size == 0:
            if np.all(done):
                break
            continue
        s = np.zeros((idx.size, n))
        keys = passive[idx] @ weights
        for key in np.unique(keys):
            sel = keys == key
            cols = passive[idx[sel][0]]
            sol, *_ = np.linalg.lstsq(a[:, cols], b[idx[sel]].T, rcond=None)
            s[np.ix_(sel, cols)] = sol.T
        sj = s[np.arange(idx.size), entering[idx]]
        # column cannot enter with a positive weight (degenerate direction)
        reject = first[idx] & (sj <= 0)
        r = idx[reject]
        passive[r, entering[r]] = False
        skipped[r, entering[r]] = True
        inner[r] = False
        keep = ~reject
        idx, s = idx[keep], s[keep]
        first[idx] = False
        feasible = np.all(np.where(passive[idx], s > 0, True), axis=1)
        f = idx[feasible]
        x[f] = s[feasible]
        skipped[f] = False
        inner[f] = False
        idx, s = idx[~feasible], s[~feasible]
        if idx.size:
            xs = x[idx]
            blocking = passive[idx] & (s <= 0)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(blocking, xs / (xs - s), np.inf)
            alpha = ratio.min(axis=1)
            xs = xs + alpha[:, None] * (s - xs)
            big = xs > eps * np.maximum(1.0, np.abs(xs).max(axis=1))[:, None]
            passive[idx] &= big
            xs[~passive[idx]] = 0.0
            x[idx] = xs
            skipped[idx] = False
    for i in np.flatnonzero(~done):
        x[i] = nnls(a, b[i])
    return x


def _nnls_project(rays: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Projection of ``x`` (one point or rows) onto the conic hull of the rows of ``rays``."""
    a = rays.T
    if x.ndim == 1:
        return a @ nnls(a, x)
    return nnls_batch(a, x) @ rays


def _dykstra_halfspaces(normals, x, max_iter=DYKSTRA_MAX_ITER, tol=DYKSTRA_TOL):
    sq = np.einsum("ij,ij->i", normals, normals)
    u = x.copy()
    corr = np.zeros_like(normals)
    for _ in range(max_iter):
        prev = u.copy()
        for i, g in enumerate(normals):
            y = u + corr[i]
            excess = max(g @ y, 0.0) / sq[i]
            u_new = y - excess * g
            corr[i] = y - u_new
            u = u_new
        change = np.linalg.norm(u - prev)
        if change <= tol * (1.0 + np.linalg.norm(x)) and np.max(normals @ u) <= tol:
            return u
    raise NonConvergence("Dykstra projection hit the iteration cap", residual=float(change))


def dykstra(projections, x, max_iter=DYKSTRA_MAX_ITER, tol=DYKSTRA_TOL) -> np.ndarray:
    """Projection onto an intersection of convex sets from their projections."""
    x = np.asarray(x, dtype=float)
    u = x.copy()
    corr = [np.zeros_like(x) for _ in projections]
    for _ in range(max_iter):
        prev = u
        for i, proj in enumerate(projections):
            y = u + corr[i]
            u = proj(y)
            corr[i] = y - u
        change = np.linalg.norm(u - prev)
        if change <= tol * (1.0 + np.linalg.norm(x)):
            return u
    raise NonConvergence("Dykstra intersection projection hit the iteration cap", residual=float(change))


def _check_conversion_size(count, dim):
    if count > CONVERSION_LIMIT or dim > CONVERSION_MAX_DIM:
        raise UnsupportedRepresentation(
            f"conversion supports at most {CONVERSION_LIMIT} vectors in dimension <= {CONVERSION_MAX_DIM}"
        )


def _extreme_rays(normals: np.ndarray, dim: int, tol: float = 1e-10) -> np.ndarray:
    """Generators of ``{u : G u <= 0}``: extreme rays plus +/- a lineality basis."""
    _check_conversion_size(normals.shape[0], dim)
    if normals.shape[0] == 0:
        return FullSpace(dim).generators()
    lineality = scipy.linalg.null_space(normals)
    rank = dim - lineality.shape[1]
    n_subsets = math.comb(normals.shape[0], rank - 1)
    if n_subsets > CONVERSION_MAX_SUBSETS:
        raise UnsupportedRepresentation(f"{n_subsets} candidate facets exceed the enumeration bound")
    scale = np.linalg.norm(normals, axis=1)
    unit = normals / scale[:, None]
    rays = []
    for subset in itertools.combinations(range(normals.shape[0]), rank - 1):
        active = np.vstack([unit[list(subset)], lineality.T]) if subset else lineality.T
        if active.shape[0] == 0:
            null = np.eye(dim)
        else:
            null = scipy.linalg.null_space(active)
        if null.shape[1] != 1:
            continue
        d = null[:, 0]
        for cand in (d, -d):
            if np.all(unit @ cand <= tol):
                if not any(np.allclose(cand, e, atol=1e-9) for e in rays):
                    rays.append(cand)
                break
    parts = [np.array(rays).reshape(-1, dim)]
    if lineality.shape[1]:
        parts += [lineality.T, -lineality.T]
    return np.vstack(parts)


def as_rays(cone: Cone) -> RayGenerated:
    """Ray description of ``cone`` (facet enumeration for halfspace cones)."""
    if isinstance(cone, RayGenerated):
        return cone
    if isinstance(cone, HalfspaceIntersection):
        gens = cone.generators()
    else:
        gens = cone.generators()
    return RayGenerated(gens, cone.dim)


def as_halfspaces(cone: Cone) -> HalfspaceIntersection:
    """Halfspace description of ``cone`` (facet enumeration for ray cones)."""
    if isinstance(cone, HalfspaceIntersection):
        return cone
    if isinstance(cone, FullSpace):
        return HalfspaceIntersection(np.zeros((0, cone.dim)), cone.dim)
    if isinstance(cone, NonnegativeOrthant):
        return HalfspaceIntersection(-np.eye(cone.dim), cone.dim)
    if isinstance(cone, ZeroCone):
        eye = np.eye(cone.dim)
        return HalfspaceIntersection(np.vstack([eye, -eye]), cone.dim)
    if isinstance(cone, Subspace):
        comp = scipy.linalg.null_space(cone.basis)
        return HalfspaceIntersection(np.vstack([comp.T, -comp.T]).reshape(-1, cone.dim), cone.dim)
    _check_conversion_size(cone.rays.shape[0], cone.dim)
    # K = polar(polar K) and polar(rays V) = {u : V u <= 0}
    return HalfspaceIntersection(_extreme_rays(cone.rays, cone.dim), cone.dim)


def _polar(cone: Cone) -> Cone:
    n = cone.dim
    if isinstance(cone, FullSpace):
        return ZeroCone(n)
    if isinstance(cone, ZeroCone):
        return FullSpace(n)
    if isinstance(cone, NonnegativeOrthant):
        return HalfspaceIntersection(np.eye(n), n)
    if isinstance(cone, RayGenerated):
        if cone.rays.shape[0] == 0:
            return FullSpace(n)
        return HalfspaceIntersection(cone.rays, n)
    if isinstance(cone, HalfspaceIntersection):
        if cone.normals.shape[0] == 0:
            return ZeroCone(n)
        # Farkas: polar of {u : G u <= 0} is the conic hull of the rows of G
        return RayGenerated(cone.normals, n)
    if isinstance(cone, Subspace):
        comp = scipy.linalg.null_space(cone.basis)
        if comp.shape[1] == 0:
            return ZeroCone(n)
        return Subspace(comp.T, n)
    raise TypeError(f"unknown cone type {type(cone).__name__}")


def polar(cone: Cone) -> Cone:
    """Polar cone ``{b : b'u <= 0 for all u in cone}``."""
    return cone.polar


def project(cone: Cone, x) -> np.ndarray:
    """Euclidean projection onto ``cone``; accepts one point or a batch of rows."""
    return cone.project(x)


def distance(cone: Cone, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.linalg.norm(x - cone.project(x), axis=-1)


def contains(cone: Cone, x, tol: float = MEMBERSHIP_TOL):
    """Whether ``dist(x, cone) <= tol`` (elementwise over a batch)."""
    d = distance(cone, x)
    return bool(d <= tol) if np.ndim(d) == 0 else d <= tol


def support_function(cone: Cone, beta, tol: float = MEMBERSHIP_TOL):
    """``sup_{u in cone} u'beta``: 0 on the polar cone, ``inf`` elsewhere."""
    inside = contains(cone.polar, beta, tol)
    return np.where(inside, 0.0, np.inf) if np.ndim(inside) else (0.0 if inside else math.inf)


def linear_image(cone: Cone, matrix) -> Cone:
    """``{M u : u in cone}`` for an invertible matrix ``M``."""
    m = np.asarray(matrix, dtype=float)
    n = cone.dim
    if m.shape != (n, n):
        raise ValueError(f"matrix must be {n}x{n}")
    if isinstance(cone, (FullSpace, ZeroCone)):
        return cone
    if isinstance(cone, NonnegativeOrthant):
        return RayGenerated(m.T, n)
    if isinstance(cone, RayGenerated):
        return RayGenerated(cone.rays @ m.T, n)
    if isinstance(cone, HalfspaceIntersection):
        return HalfspaceIntersection(np.linalg.solve(m.T, cone.normals.T).T, n)
    if isinstance(cone, Subspace):
        return Subspace(cone.basis @ m.T, n)
    raise TypeError(f"unknown cone type {type(cone).__name__}")


def sample(cone: Cone, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points of the cone: projections of standard normal draws."""
    return cone.project(rng.standard_normal((n, cone.dim)))


_TEST_SAMPLES = 64


def _test_directions(cone: Cone) -> np.ndarray:
    try:
        gens = cone.generators()
    except UnsupportedRepresentation:
        gens = np.zeros((0, cone.dim))
    pts = sample(cone, _TEST_SAMPLES, np.random.default_rng(20240611))
    # draws are O(1), so tiny projections are rounding noise around the apex
    norms = np.linalg.norm(pts, axis=1)
    keep = norms > 1e-9
    pts = pts[keep] / norms[keep, None]
    gnorm = np.linalg.norm(gens, axis=1)
    gens = gens[gnorm > 0] / gnorm[gnorm > 0, None]
    return np.vstack([gens, pts])


def normal_cone_margin(cone: Cone, x, p, tol: float = VARIATIONAL_TOL) -> np.ndarray:
    """Worst violation of ``p in N_K(x)`` per row; the check passes when ``<= tol``.

    Combines the test-set inequalities ``p'(u - x) <= 0`` (cone directions
    scaled by ``{1, 2}(|x| + 1)``, plus ``u = 0, 2x, x/2``), the cone
    complementarity ``|p'x|`` and the distance of ``p`` to the polar cone.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = np.atleast_2d(np.asarray(p, dtype=float))
    if not np.all(contains(cone, x, tol)):
        raise InfeasiblePoint("normal cone requested at a point outside the cone")
    px = np.einsum("ij,ij->i", p, x)
    dirs = _test_directions(cone)
    worst = np.abs(px)  # covers u = 0, 2x and x/2
    if dirs.shape[0]:
        scale = np.linalg.norm(x, axis=1) + 1.0
        pu = (p @ dirs.T).max(axis=1)
        worst = np.maximum(worst, 2.0 * scale * pu - px)
        worst = np.maximum(worst, scale * pu - px)
    return np.maximum(worst, distance(cone.polar, p))


def normal_cone_check(cone: Cone, x, p, tol: float = VARIATIONAL_TOL) -> bool:
    """Whether ``p`` lies in the normal cone of ``cone`` at ``x``."""
    return bool(np.all(normal_cone_margin(cone, x, p, tol) <= tol))


_CONE_TYPES = {"full", "zero", "orthant", "rays", "halfspaces", "subspace"}


def parse_cone(spec: dict, dim: int) -> Cone:
    """Build a cone from ``{"type": ..., "vectors": [[...], ...]}``."""
    kind = spec.get("type")
    if kind not in _CONE_TYPES:
        raise ValueError(f"cone type must be one of {sorted(_CONE_TYPES)}, got {kind!r}")
    vectors = spec.get("vectors")
    if kind == "full":
        return FullSpace(dim)
    if kind == "zero":
        return ZeroCone(dim)
    if kind == "orthant":
        return NonnegativeOrthant(dim)
    if vectors is None:
        raise ValueError(f"cone type {kind!r} requires 'vectors'")
    if kind == "rays":
        return RayGenerated(vectors, dim)
    if kind == "halfspaces":
        return HalfspaceIntersection(vectors, dim)
    return Subspace(vectors, dim)


def describe(cone: Cone) -> dict:
    """Inverse of :func:`parse_cone`."""
    kinds = {
        FullSpace: "full",
        ZeroCone: "zero",
        NonnegativeOrthant: "orthant",
        RayGenerated: "rays",
        HalfspaceIntersection: "halfspaces",
        Subspace: "subspace",
    }
    out = {"type": kinds[type(cone)], "dim": cone.dim}
    for attr in ("rays", "normals", "basis"):
        if hasattr(cone, attr):
            out["vectors"] = getattr(cone, attr).tolist()
    return out
