"""Brute-force reference computations, independent of the closed-form solver.

* :func:`dp_value_recursion` runs backward dynamic programming on the
  discrete-time wealth recursion.  Quadratic homogeneity means the value is
  ``P_k x^2 / 2`` and only the multiplier ``P_k`` has to be propagated.
  The one-step minimisation goes through a generic constrained optimiser
  on the cone's own inequality or generator description followed by a
  local grid polish, so no projection code is shared with the solver.
* :func:`grid_phi` maximises the conjugate objective by exhaustive search.
* :func:`single_period_lq` is a closed form for one period, used to check
  the dynamic-programming inner step.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.optimize import minimize

from . import cones, conjugates
from .cones import Cone
from .conjugates import QuadraticCost
from .errors import NonConvergence
from .market import MarketModel

BINOMIAL = "binomial"
GAUSS_HERMITE = "gauss_hermite"
POLISH_RADIUS = 10
INNER_TOL = 1e-12


@dataclass(frozen=True)
class DPConfig:
    n_steps: int | None = None  # None keeps the market grid
    noise: str | None = None  # None picks binomial for N <= 2, Gauss-Hermite above
    gh_nodes: int = 7
    polish: bool = True

    def __post_init__(self):
        if self.n_steps is not None and (int(self.n_steps) != self.n_steps or self.n_steps < 1):
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps!r}")
        if self.noise not in (None, BINOMIAL, GAUSS_HERMITE):
            raise ValueError(f"unknown noise model {self.noise!r}")
        if self.gh_nodes < 2:
            raise ValueError("Gauss-Hermite needs at least 2 nodes")


def noise_nodes(dim: int, dt: float, model: str, gh_nodes: int = 7):
    """Nodes ``(M, dim)`` and weights ``(M,)`` of a discrete Brownian increment."""
    if model == BINOMIAL:
        base, weights_1d = np.array([-1.0, 1.0]), np.array([0.5, 0.5])
    else:
        base, weights_1d = hermegauss(gh_nodes)
        weights_1d = weights_1d / weights_1d.sum()
    grid = np.array(list(itertools.product(base, repeat=dim)))
    weights = np.prod(np.array(list(itertools.product(weights_1d, repeat=dim))), axis=1)
    return grid * math.sqrt(dt), weights


class _StepObjective:
    """``v -> E[(1 + (r + v'sigma theta) dt + v'sigma dW)^2]`` under a discrete noise model."""

    def __init__(self, r, sigma, theta, dt, nodes, weights):
        self.base = 1.0 + r * dt
        self.sigma = sigma
        self.drift = sigma @ theta * dt  # the wealth drift per unit of v
        # first and second moments of sigma dW
        shocks = nodes @ sigma.T
        self.mean = weights @ shocks
        self.second = (shocks * weights[:, None]).T @ shocks

    def __call__(self, v):
        """Objective at one point or at each row of a batch."""
        v = np.asarray(v, dtype=float)
        lin = self.base + v @ self.drift
        quad = np.einsum("...i,ij,...j->...", v, self.second, v)
        return lin * lin + 2.0 * lin * (v @ self.mean) + quad

    def gradient(self, v):
        lin = self.base + self.drift @ v
        mv = self.mean @ v
        return 2.0 * lin * self.drift + 2.0 * mv * self.drift + 2.0 * lin * self.mean + 2.0 * self.second @ v


def _parametrise(cone: Cone):
    """``(to_v, dim, bounds, constraints)`` describing the cone for a generic optimiser."""
    n = cone.dim
    if isinstance(cone, cones.FullSpace):
        return (lambda c: c), n, None, ()
    if isinstance(cone, cones.ZeroCone):
        return (lambda c: np.zeros(n)), 0, None, ()
    if isinstance(cone, cones.NonnegativeOrthant):
        return (lambda c: c), n, [(0.0, None)] * n, ()
    if isinstance(cone, cones.RayGenerated):
        rays = cone.rays
        return (lambda c: c @ rays), rays.shape[0], [(0.0, None)] * rays.shape[0], ()
    if isinstance(cone, cones.Subspace):
        basis = cone.basis
        return (lambda c: c @ basis), basis.shape[0], None, ()
    if isinstance(cone, cones.HalfspaceIntersection):
        normals = cone.normals
        cons = ({"type": "ineq", "fun": lambda c: -normals @ c, "jac": lambda c: -normals},)
        return (lambda c: c), n, None, cons
    raise TypeError(f"unknown cone type {type(cone).__name__}")


def _feasible(cone: Cone, v):
    """Membership of one point or of each row of a batch."""
    if isinstance(cone, cones.HalfspaceIntersection):
        if cone.normals.shape[0] == 0:
            return np.ones(np.shape(v)[:-1], dtype=bool) if np.ndim(v) > 1 else True
        inside = np.max(np.asarray(v) @ cone.normals.T, axis=-1) <= 0
        return inside if np.ndim(inside) else bool(inside)
    return cones.contains(cone, v, 1e-12)


def _minimise_step(objective: _StepObjective, cone: Cone, polish: bool):
    to_v, size, bounds, cons = _parametrise(cone)
    if size == 0:
        v = np.zeros(cone.dim)
        return objective(v), v
    matrix = np.array([to_v(e) for e in np.eye(size)])  # v = c @ matrix

    def fun(c):
        return objective(c @ matrix)

    def jac(c):
        return matrix @ objective.gradient(c @ matrix)

    start = np.zeros(size)
    if cons:
        res = minimize(fun, start, jac=jac, method="SLSQP", constraints=cons,
                       options={"ftol": INNER_TOL, "maxiter": 1000})
    else:
        res = minimize(fun, start, jac=jac, method="L-BFGS-B", bounds=bounds,
                       options={"ftol": INNER_TOL, "gtol": 1e-14, "maxiter": 10_000})
    if not res.success and res.status not in (0, 2):
        raise NonConvergence(f"inner minimisation failed: {res.message}", residual=float(np.linalg.norm(jac(res.x))))
    c = res.x if bounds is None else np.maximum(res.x, 0.0)
    best_v = c @ matrix
    if cons and not _feasible(cone, best_v):
        best_v = cone.project(best_v)
    best = objective(best_v)
    if polish:
        best, best_v = _grid_polish(objective, cone, best_v, best)
    return best, best_v


def _grid_polish(objective, cone, v, value, levels: int = 6):
    """Coordinate-and-generator grid search around ``v``, shrinking the radius each level."""
    dim = cone.dim
    dirs = [np.eye(dim), -np.eye(dim)]
    try:
        gens = cone.generators()
        if gens.shape[0]:
            gens = gens / np.linalg.norm(gens, axis=1)[:, None]
            dirs += [gens, -gens]
    except cones.UnsupportedRepresentation:
        pass
    dirs = np.vstack(dirs)
    radius = POLISH_RADIUS * max(1e-6, 1e-6 * np.linalg.norm(v))
    offsets = np.linspace(-1.0, 1.0, 21)
    for _ in range(levels):
        cand = v + (radius * offsets)[:, None, None] * dirs[None, :, :]
        cand = cand.reshape(-1, dim)
        cand = cand[np.asarray(_feasible(cone, cand), dtype=bool)]
        if cand.shape[0]:
            vals = objective(cand)
            i = int(np.argmin(vals))
            if vals[i] < value:
                value, v = float(vals[i]), cand[i]
        radius /= 10.0
    return value, v


def dp_value_recursion(market: MarketModel, cone: Cone, a: float, config: DPConfig | None = None,
                       wealth_sign: float = 1.0):
    """Backward recursion ``P_k = min_v E[P_{k+1} (1 + (r + v'sigma theta) dt + v'sigma dW)^2]``.

    ``v`` is the fraction of wealth invested (``pi = v X``); for negative
    wealth (``wealth_sign < 0``) feasibility requires ``v in -K``.
    Returns ``(P, v)`` with shapes ``(n + 1,)`` and ``(n, N)``.
    """
    if not market.deterministic:
        raise ValueError("dynamic programming oracle needs deterministic coefficients")
    config = config or DPConfig()
    grid = market.grid
    n = config.n_steps or grid.n_steps
    dt = grid.horizon / n
    dim = market.dim
    model = config.noise or (BINOMIAL if dim <= 2 else GAUSS_HERMITE)
    nodes, weights = noise_nodes(dim, dt, model, config.gh_nodes)
    search = cone if wealth_sign > 0 else _negated(cone)
    P = np.empty(n + 1)
    P[n] = a
    controls = np.empty((n, dim))
    for k in range(n - 1, -1, -1):
        # coefficients of the market interval containing the oracle step
        src = min(int(k * dt / grid.dt + 1e-9), grid.n_steps - 1)
        objective = _StepObjective(market.r[src], market.sigma[src], market.theta[src], dt, nodes, weights)
        value, v = _minimise_step(objective, search, config.polish)
        P[k] = P[k + 1] * value
        controls[k] = v
    return P, controls


def _negated(cone: Cone) -> Cone:
    return cones.linear_image(cone, -np.eye(cone.dim))


@dataclass(frozen=True)
class GridResult:
    value: float
    x: float
    pi: np.ndarray
    step: float


def _grid_objective(cost, k, alpha, beta, xs, pis):
    """Objective on the product grid ``xs x pis``, shape ``(len(xs), len(pis))``."""
    Q, S, R = cost.Q[k], cost.S[k], cost.R[k]
    quad_pi = np.einsum("ji,ik,jk->j", pis, R, pis)
    lin_pi = pis @ beta
    cross = pis @ S
    return (xs[:, None] * alpha + lin_pi[None, :]
            - 0.5 * (Q * xs[:, None] ** 2 + 2.0 * xs[:, None] * cross[None, :] + quad_pi[None, :]))


def _box_points(centre, half_width, count):
    axes = [np.linspace(c - half_width, c + half_width, count) for c in centre]
    return np.array(np.meshgrid(*axes, indexing="ij")).reshape(len(centre), -1).T


def _cone_grid(cone: Cone, pts: np.ndarray) -> np.ndarray:
    """Grid points moved onto the cone by projection (points inside stay put).

    Every candidate is feasible, and cones with an empty interior (lines,
    single rays) are still covered.
    """
    return cone.project(pts)


def grid_phi(cost: QuadraticCost, cone: Cone, k: int, alpha: float, beta, box: float, step: float) -> GridResult:
    """Exhaustive maximum of ``x alpha + pi'beta - f(x, pi)`` over the grid of spacing ``step``
    on ``[-box, box]^{1+N}`` intersected with ``R x K``."""
    beta = np.asarray(beta, dtype=float)
    count = int(round(2 * box / step)) + 1
    xs = np.linspace(-box, box, count)
    pis = _cone_grid(cone, _box_points(np.zeros(cone.dim), box, count))
    vals = _grid_objective(cost, k, alpha, beta, xs, pis)
    i, j = np.unravel_index(np.argmax(vals), vals.shape)
    return GridResult(float(vals[i, j]), float(xs[i]), pis[j], float(xs[1] - xs[0]))


def grid_phi_refined(cost: QuadraticCost, cone: Cone, k: int, alpha: float, beta, box: float,
                     points: int = 11, levels: int = 60, shrink: float = 0.7) -> GridResult:
    """Grid search that recentres on the incumbent and shrinks the box each level.

    Only feasible points are evaluated, so the result is a lower bound on
    phi that increases with ``levels``.
    """
    beta = np.asarray(beta, dtype=float)
    dim = cone.dim
    centre_x, centre_pi = 0.0, np.zeros(dim)
    half = box
    best = GridResult(-math.inf, 0.0, centre_pi, 2 * box / (points - 1))
    for _ in range(levels):
        xs = np.linspace(centre_x - half, centre_x + half, points)
        pis = _cone_grid(cone, _box_points(centre_pi, half, points))
        vals = _grid_objective(cost, k, alpha, beta, xs, pis)
        i, j = np.unravel_index(np.argmax(vals), vals.shape)
        step = 2 * half / (points - 1)
        if vals[i, j] >= best.value:
            best = GridResult(float(vals[i, j]), float(xs[i]), pis[j].copy(), step)
        centre_x, centre_pi = best.x, best.pi
        half *= shrink
    return best


def grid_phi_divergence(cost, cone, k, alpha, beta, boxes=(1.0, 2.0, 4.0, 8.0), points: int = 41) -> np.ndarray:
    """Grid maxima on growing boxes; sustained growth flags an infinite conjugate."""
    out = []
    for box in boxes:
        out.append(grid_phi(cost, cone, k, alpha, beta, box, 2 * box / (points - 1)).value)
    return np.array(out)


def single_period_lq(r: float, sigma, theta, cone: Cone, a: float, x0: float, dt: float):
    """``min_{pi in K} E[a (x0 + (r x0 + pi'sigma theta) dt + pi'sigma dW)^2 / 2]``, ``dW ~ N(0, dt I)``.

    With ``w = sigma'pi`` the objective is ``a/2 (c^2 + dt (w'M w + 2 c theta'w))``
    where ``c = x0 (1 + r dt)`` and ``M = I + dt theta theta'``; minimising over
    ``w in sigma'K`` is a projection in the ``M`` metric.
    Returns ``(value, pi)``.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    dim = theta.shape[0]
    c = x0 * (1.0 + r * dt)
    M = np.eye(dim) + dt * np.outer(theta, theta)
    L = np.linalg.cholesky(M)
    # z = L'w ranges over L'sigma'K and the objective is |z|^2 + 2 c (L^{-1} theta)'z
    image = cones.linear_image(cone, L.T @ sigma.T)
    target = -c * np.linalg.solve(L, theta)
    z = image.project(target)
    w = np.linalg.solve(L.T, z)
    pi = np.linalg.solve(sigma.T, w)
    value = 0.5 * a * (c * c + dt * (z @ z + 2.0 * c * np.linalg.solve(L, theta) @ z))
    return float(value), pi


def dp_single_step(r, sigma, theta, cone, a, x0, dt, config: DPConfig | None = None):
    """The dynamic-programming inner step on one period, as ``(value, pi)`` for wealth ``x0``."""
    config = config or DPConfig()
    dim = np.atleast_1d(theta).shape[0]
    model = config.noise or (BINOMIAL if dim <= 2 else GAUSS_HERMITE)
    nodes, weights = noise_nodes(dim, dt, model, config.gh_nodes)
    objective = _StepObjective(r, np.atleast_2d(sigma), np.atleast_1d(theta), dt, nodes, weights)
    search = cone if x0 >= 0 else _negated(cone)
    value, v = _minimise_step(objective, search, config.polish)
    return 0.5 * a * x0 * x0 * value, v * x0


def conjugate_reference(cost: QuadraticCost, cone: Cone, k: int, alpha: float, beta, box: float | None = None):
    """Refined grid value together with the analytic box size used."""
    res = conjugates.phi(cost, cone, k, alpha, beta)
    if box is None:
        scale = 1.0
        if res.finite:
            scale = max(1.0, abs(res.x), float(np.linalg.norm(res.pi)))
        box = 10.0 * scale
    return grid_phi_refined(cost, cone, k, alpha, beta, box)
