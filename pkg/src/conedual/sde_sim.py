"""Seeded Monte Carlo for wealth and dual-state dynamics and cost estimates.

Brownian increments come from a counter-based Philox stream keyed by the
seed, one counter block per path, so any slice of paths can be produced
independently and in any order.  Normals are obtained by inverse-CDF from
53-bit uniforms.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from . import cones, conjugates
from .cones import Cone
from .conjugates import QuadraticCost
from .errors import DimensionMismatch, InfeasibleDualControl
from .market import MarketModel, TimeGrid

EULER = "euler"
EXACT = "exact_exponential"
SCHEMES = (EULER, EXACT)
DEFAULT_BATCH = 4096


@dataclass(frozen=True)
class SimConfig:
    n_paths: int
    seed: int = 0
    scheme: str = EXACT
    antithetic: bool = False

    def __post_init__(self):
        if int(self.n_paths) != self.n_paths or self.n_paths < 2:
            raise ValueError(f"n_paths must be an integer >= 2, got {self.n_paths!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("antithetic sampling needs an even number of paths")
        object.__setattr__(self, "n_paths", int(self.n_paths))
        object.__setattr__(self, "seed", int(self.seed))


def _path_normals(seed: int, stream: int, count: int) -> np.ndarray:
    gen = np.random.Philox(
        key=np.array([seed, 0], dtype=np.uint64),
        counter=np.array([0, 0, stream, 0], dtype=np.uint64),
    )
    raw = gen.random_raw(count)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def simulate_brownian(config: SimConfig, grid: TimeGrid, dim: int, start: int = 0, count: int | None = None):
    """Increments ``dW`` of shape ``(count, n_steps, dim)`` for paths ``start .. start+count-1``.

    With antithetic sampling path ``2j + 1`` is the negation of path ``2j``.
    """
    if count is None:
        count = config.n_paths - start
    if start < 0 or start + count > config.n_paths:
        raise ValueError(f"paths [{start}, {start + count}) outside [0, {config.n_paths})")
    n = grid.n_steps
    out = np.empty((count, n, dim))
    root_dt = math.sqrt(grid.dt)
    for i in range(count):
        path = start + i
        stream, sign = (path // 2, -1.0 if path % 2 else 1.0) if config.antithetic else (path, 1.0)
        out[i] = (sign * root_dt) * _path_normals(config.seed, stream, n * dim).reshape(n, dim)
    return out


def _coefficients(market: MarketModel, n_paths: int, start: int = 0):
    """``r: (P, n)``, ``sigma: (P, n, N, N)``, ``theta: (P, n, N)`` for a block of paths."""
    if market.deterministic:
        return market.r[None], market.sigma[None], market.theta[None]
    sl = slice(start, start + n_paths)
    return market.r[sl], market.sigma[sl], market.theta[sl]


def _check_noise(market: MarketModel, noise) -> np.ndarray:
    noise = np.asarray(noise, dtype=float)
    want = (market.grid.n_steps, market.dim)
    if noise.ndim != 3 or noise.shape[1:] != want:
        raise DimensionMismatch(f"noise must have shape (P, {want[0]}, {want[1]}), got {noise.shape}")
    return noise


def _control(table, n_paths, n, dim, name):
    table = np.asarray(table, dtype=float)
    if table.shape == (n, dim):
        return np.broadcast_to(table, (n_paths, n, dim))
    if table.shape == (n_paths, n, dim):
        return table
    raise DimensionMismatch(f"{name} must have shape ({n}, {dim}) or ({n_paths}, {n}, {dim}), got {table.shape}")


def simulate_wealth(market: MarketModel, x0: float, noise, pi=None, xi=None, scheme: str = EULER, start: int = 0):
    """Wealth paths ``(P, n + 1)`` under an open-loop table ``pi`` or proportional feedback ``xi``.

    The exact scheme is the exact solution for piecewise-constant
    coefficients and controls: geometric for feedback, and for open-loop
    controls the variance-matched Ornstein-Uhlenbeck-type step.
    """
    if (pi is None) == (xi is None):
        raise ValueError("give exactly one of pi (open loop) or xi (proportional feedback)")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    noise = _check_noise(market, noise)
    P, n, dim = noise.shape
    r, sigma, theta = _coefficients(market, P, start)
    dt = market.grid.dt
    X = np.empty((P, n + 1))
    X[:, 0] = x0
    control = _control(pi if xi is None else xi, P, n, dim, "control")
    # vol[p, k] = sigma' control, so control'sigma dW = vol . dW
    vol = np.einsum("pkij,pki->pkj", np.broadcast_to(sigma, (P, n, dim, dim)), control)
    drift = np.einsum("pkj,pkj->pk", vol, np.broadcast_to(theta, (P, n, dim)))
    shock = np.einsum("pkj,pkj->pk", vol, noise)
    r = np.broadcast_to(r, (P, n))
    for k in range(n):
        x = X[:, k]
        if xi is not None:
            if scheme == EULER:
                X[:, k + 1] = x * (1.0 + (r[:, k] + drift[:, k]) * dt + shock[:, k])
            else:
                half_var = 0.5 * np.einsum("pj,pj->p", vol[:, k], vol[:, k])
                X[:, k + 1] = x * np.exp((r[:, k] + drift[:, k] - half_var) * dt + shock[:, k])
        elif scheme == EULER:
            X[:, k + 1] = x + (r[:, k] * x + drift[:, k]) * dt + shock[:, k]
        else:
            rk = r[:, k]
            rdt = rk * dt
            growth = np.where(rk != 0, np.expm1(rdt) / np.where(rk != 0, rk, 1.0), dt)
            spread = np.where(rk != 0, np.sqrt(np.expm1(2 * rdt) / np.where(rk != 0, 2 * rdt, 1.0)), 1.0)
            X[:, k + 1] = np.exp(rdt) * x + growth * drift[:, k] + spread * shock[:, k]
    return X


def feedback_portfolio(xi, X) -> np.ndarray:
    """``pi_k = xi_k X_k`` on each interval, shape ``(P, n, N)``."""
    xi = np.asarray(xi, dtype=float)
    return xi * X[:, :-1, None]


def simulate_dual(market: MarketModel, y0: float, noise, alpha=None, beta=None, eta=None, scheme: str = EXACT,
                  start: int = 0):
    """Dual state paths ``(P, n + 1)``.

    With ``eta`` the control is proportional, ``sigma^{-1} beta - theta Y = eta Y``
    and ``alpha = 0``, so ``Y`` is geometric.  Open-loop ``(alpha, beta)`` tables
    are stepped by Euler.
    """
    if (eta is None) == (beta is None):
        raise ValueError("give exactly one of beta (open loop) or eta (proportional loading)")
    noise = _check_noise(market, noise)
    P, n, dim = noise.shape
    r, sigma, theta = _coefficients(market, P, start)
    r = np.broadcast_to(r, (P, n))
    dt = market.grid.dt
    Y = np.empty((P, n + 1))
    Y[:, 0] = y0
    if eta is not None:
        if alpha is not None and np.any(np.asarray(alpha) != 0):
            raise ValueError("proportional dual controls have alpha = 0")
        load = _control(eta, P, n, dim, "eta")
        shock = np.einsum("pkj,pkj->pk", load, noise)
        if scheme == EULER:
            factors = 1.0 - r * dt + shock
        else:
            factors = np.exp((-r - 0.5 * np.einsum("pkj,pkj->pk", load, load)) * dt + shock)
        Y[:, 1:] = y0 * np.cumprod(factors, axis=1)
        return Y
    beta = _control(beta, P, n, dim, "beta")
    alpha = np.zeros((P, n)) if alpha is None else np.broadcast_to(np.asarray(alpha, dtype=float), (P, n))
    scaled = np.linalg.solve(np.broadcast_to(sigma, (P, n, dim, dim)), beta[..., None])[..., 0]
    theta = np.broadcast_to(theta, (P, n, dim))
    for k in range(n):
        y = Y[:, k]
        load = scaled[:, k] - theta[:, k] * y[:, None]
        Y[:, k + 1] = y + (alpha[:, k] - r[:, k] * y) * dt + np.einsum("pj,pj->p", load, noise[:, k])
    return Y


def proportional_beta(market: MarketModel, eta, Y) -> np.ndarray:
    """``beta = sigma (eta + theta) Y`` for a proportional dual control."""
    gamma = np.einsum("...kij,...kj->...ki", market.sigma, np.asarray(eta) + market.theta)
    return gamma * Y[:, :-1, None]


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    n_paths: int

    @classmethod
    def from_samples(cls, samples) -> "Estimate":
        samples = np.asarray(samples, dtype=float)
        n = samples.shape[0]
        mean = float(np.sum(samples) / n)
        stderr = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
        return cls(mean, stderr, n)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n_paths": self.n_paths, "provenance": "monte_carlo"}


def primal_cost_samples(X, pi, cost: QuadraticCost, grid: TimeGrid) -> np.ndarray:
    """Per-path ``int f dt + g(X_T)``; trapezoid in time with ``pi`` held over each interval."""
    X = np.asarray(X, dtype=float)
    total = conjugates.terminal_cost(cost, X[:, -1])
    if cost.has_running_cost:
        if pi is None:
            raise ValueError("portfolio paths are needed for a running cost")
        pi = np.asarray(pi, dtype=float)
        running = np.zeros(X.shape[0])
        for k in range(grid.n_steps):
            left = conjugates.running_cost(cost, k, X[:, k], pi[:, k])
            right = conjugates.running_cost(cost, k, X[:, k + 1], pi[:, k])
            running += 0.5 * (left + right) * grid.dt
        total = total + running
    return np.broadcast_to(total, (X.shape[0],)).astype(float)


def estimate_primal_cost(X, pi, cost: QuadraticCost, grid: TimeGrid) -> Estimate:
    return Estimate.from_samples(primal_cost_samples(X, pi, cost, grid))


def _phi_time_sum(alpha, beta, cost: QuadraticCost, cone: Cone, grid: TimeGrid) -> np.ndarray:
    P, n = beta.shape[0], grid.n_steps
    alpha = np.zeros((P, n)) if alpha is None else np.broadcast_to(np.asarray(alpha, dtype=float), (P, n))
    if not cost.has_running_cost:
        inside = np.all(cones.contains(cone.polar, beta.reshape(-1, cone.dim)).reshape(P, n), axis=1)
        if np.any(alpha != 0) or not np.all(inside):
            raise InfeasibleDualControl("beta leaves the polar cone (or alpha != 0): the dual cost is infinite")
        return np.zeros(P)
    out = np.zeros(P)
    for p in range(P):
        for k in range(n):
            res = conjugates.phi(cost, cone, k, float(alpha[p, k]), beta[p, k])
            if not res.finite:
                raise InfeasibleDualControl(f"phi is infinite on path {p}, interval {k}")
            out[p] += res.value * grid.dt
    return out


def dual_cost_samples(x0: float, Y, alpha, beta, cost: QuadraticCost, cone: Cone, grid: TimeGrid,
                      gamma=None) -> np.ndarray:
    """Per-path ``x0 y + m_T(Y_T) + sum phi(alpha, beta) dt``.

    ``gamma`` (an ``(n, N)`` table with ``beta = gamma Y``) replaces ``beta``
    for proportional controls; feasibility is then checked on ``gamma``
    for each sign of ``Y`` that occurs, which is exact because the polar
    is a cone.
    """
    Y = np.asarray(Y, dtype=float)
    samples = x0 * Y[:, 0] + conjugates.m_T(cost, Y[:, -1])
    if gamma is not None:
        if cost.has_running_cost:
            beta = np.asarray(gamma)[None] * Y[:, :-1, None]
        else:
            polar = cone.polar
            for sign in (1.0, -1.0):
                used = np.any(np.sign(Y[:, :-1]) == sign, axis=0)
                if np.any(used) and not np.all(cones.contains(polar, sign * np.asarray(gamma)[used])):
                    raise InfeasibleDualControl("proportional beta leaves the polar cone")
            if alpha is not None and np.any(np.asarray(alpha) != 0):
                raise InfeasibleDualControl("alpha must vanish without a running cost")
            return samples
    return samples + _phi_time_sum(alpha, np.asarray(beta, dtype=float), cost, cone, grid)


def estimate_dual_cost(x0: float, Y, alpha, beta, cost, cone, grid, gamma=None) -> Estimate:
    return Estimate.from_samples(dual_cost_samples(x0, Y, alpha, beta, cost, cone, grid, gamma))


@dataclass(frozen=True)
class GapEstimate:
    gap: float
    stderr: float
    primal: Estimate
    dual: Estimate
    common_noise: bool

    def to_dict(self) -> dict:
        return {
            "gap": self.gap,
            "stderr": self.stderr,
            "common_noise": self.common_noise,
            "primal": self.primal.to_dict(),
            "dual": self.dual.to_dict(),
            "provenance": "monte_carlo",
        }


def duality_gap(primal, dual) -> GapEstimate:
    """``J + Psi`` with its standard error.

    Pass per-path sample arrays computed on the same noise to get the
    paired (common random numbers) error; pass two :class:`Estimate`
    objects for independent samples.
    """
    if isinstance(primal, Estimate) and isinstance(dual, Estimate):
        stderr = math.hypot(primal.stderr, dual.stderr)
        return GapEstimate(primal.mean + dual.mean, stderr, primal, dual, False)
    primal = np.asarray(primal, dtype=float)
    dual = np.asarray(dual, dtype=float)
    if primal.shape != dual.shape:
        raise DimensionMismatch("paired gap needs equally many primal and dual samples")
    paired = Estimate.from_samples(primal + dual)
    return GapEstimate(paired.mean, paired.stderr, Estimate.from_samples(primal), Estimate.from_samples(dual), True)


def run_batched(config: SimConfig, grid: TimeGrid, dim: int, kernel, batch_size: int = DEFAULT_BATCH,
                workers: int = 1) -> dict:
    """Apply ``kernel(noise, start) -> {name: per-path array}`` over all paths in batches.

    Batches are concatenated in path order, so the result does not depend
    on ``workers``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if config.antithetic and batch_size % 2:
        batch_size += 1
    starts = list(range(0, config.n_paths, batch_size))

    def one(start):
        count = min(batch_size, config.n_paths - start)
        return kernel(simulate_brownian(config, grid, dim, start, count), start)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, starts))
    else:
        parts = [one(s) for s in starts]
    return {name: np.concatenate([np.atleast_1d(p[name]) for p in parts]) for name in parts[0]}
