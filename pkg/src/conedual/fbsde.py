"""Pathwise optimality certificates for primal/dual forward-backward systems.

A :class:`PathBundle` carries state, adjoint and control paths on a time
grid.  Grid-point quantities (``X, Y, p1, p2``) have shape ``(P, n + 1)``;
interval quantities (``q1, q2, pi, alpha, beta``) are held over
``[t_k, t_{k+1})`` and have shape ``(P, n)`` or ``(P, n, N)``.

Adjoint dynamics checked here:

* primal: ``dp1 = (-r p1 + Q X + S'pi) dt + q1'dW``, ``p1(T) = -a X(T) - c``;
* dual:   ``dp2 = (r p2 + q2'theta) dt + q2'dW``, ``p2(T) = -(Y(T) + c) / a``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import cones, conjugates, sde_sim
from .cone_qrm import ConeQRMSolution
from .cones import Cone
from .conjugates import QuadraticCost
from .errors import DimensionMismatch, InfeasibleControl
from .market import MarketModel, TimeGrid


@dataclass(frozen=True, eq=False)
class PathBundle:
    grid: TimeGrid
    dW: np.ndarray
    x0: float | None = None
    y0: float | None = None
    X: np.ndarray | None = None
    Y: np.ndarray | None = None
    p1: np.ndarray | None = None
    q1: np.ndarray | None = None
    p2: np.ndarray | None = None
    q2: np.ndarray | None = None
    pi: np.ndarray | None = None
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None

    def __post_init__(self):
        dW = np.asarray(self.dW, dtype=float)
        if dW.ndim != 3 or dW.shape[1] != self.grid.n_steps:
            raise DimensionMismatch(f"dW must have shape (P, {self.grid.n_steps}, N), got {dW.shape}")
        object.__setattr__(self, "dW", dW)
        P, n, dim = dW.shape
        shapes = {
            "X": (P, n + 1), "Y": (P, n + 1), "p1": (P, n + 1), "p2": (P, n + 1),
            "q1": (P, n, dim), "q2": (P, n, dim), "pi": (P, n, dim), "beta": (P, n, dim), "alpha": (P, n),
        }
        for name, shape in shapes.items():
            value = getattr(self, name)
            if value is None:
                continue
            value = np.asarray(value, dtype=float)
            if value.shape != shape:
                raise DimensionMismatch(f"{name} must have shape {shape}, got {value.shape}")
            object.__setattr__(self, name, value)
        if self.X is not None and self.x0 is not None and not np.allclose(self.X[:, 0], self.x0, rtol=0, atol=1e-12):
            raise ValueError("X(0) differs from x0")
        if self.Y is not None and self.y0 is not None and not np.allclose(self.Y[:, 0], self.y0, rtol=0, atol=1e-12):
            raise ValueError("Y(0) differs from y0")

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]

    @property
    def dim(self) -> int:
        return self.dW.shape[2]

    def replace(self, **changes) -> "PathBundle":
        return dataclasses.replace(self, **changes)


def _tables(market: MarketModel, n_paths: int):
    n, dim = market.grid.n_steps, market.dim
    r = np.broadcast_to(market.r, (n_paths, n))
    sigma = np.broadcast_to(market.sigma, (n_paths, n, dim, dim))
    theta = np.broadcast_to(market.theta, (n_paths, n, dim))
    return r, sigma, theta


def _require(bundle: PathBundle, *names):
    missing = [name for name in names if getattr(bundle, name) is None]
    if missing:
        raise ValueError(f"bundle lacks {', '.join(missing)}")


def _cost_tables(cost: QuadraticCost, n_paths: int):
    return cost.Q[None, :], cost.S[None, :, :], cost.R[None, :, :, :]


@dataclass(frozen=True)
class ConditionReport:
    name: str
    checked: int
    violations: int
    worst_margin: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.violations == 0

    @property
    def pass_rate(self) -> float:
        return 1.0 - self.violations / self.checked if self.checked else 1.0

    def to_dict(self) -> dict:
        return {
            "checked": self.checked,
            "violations": self.violations,
            "pass_rate": self.pass_rate,
            "worst_margin": self.worst_margin,
            "tol": self.tol,
            "passed": self.passed,
        }


def _report(name, margins, tol) -> ConditionReport:
    margins = np.ravel(np.asarray(margins, dtype=float))
    worst = float(np.max(margins)) if margins.size else 0.0
    return ConditionReport(name, int(margins.size), int(np.count_nonzero(~(margins <= tol))), worst, tol)


def primal_variational_term(bundle: PathBundle, market: MarketModel, cost: QuadraticCost) -> np.ndarray:
    """``G = p1 sigma theta + sigma q1 + S X + R pi`` per path and interval."""
    _require(bundle, "X", "p1", "q1", "pi")
    P = bundle.n_paths
    _, sigma, theta = _tables(market, P)
    _, S, R = _cost_tables(cost, P)
    p1 = bundle.p1[:, :-1]
    X = bundle.X[:, :-1]
    G = np.einsum("pkij,pkj->pki", sigma, theta * p1[..., None] + bundle.q1)
    return G + S * X[..., None] + np.einsum("pkij,pkj->pki", np.broadcast_to(R, sigma.shape), bundle.pi)


def primal_condition_check(bundle: PathBundle, market: MarketModel, cost: QuadraticCost, cone: Cone,
                           tol: float = 1e-6) -> ConditionReport:
    """``(pi - pi_hat)'G <= 0`` for all ``pi in K``, i.e. ``G`` lies in the normal cone at ``pi_hat``."""
    G = primal_variational_term(bundle, market, cost).reshape(-1, bundle.dim)
    pi = bundle.pi.reshape(-1, bundle.dim)
    outside = ~np.asarray(cones.contains(cone, pi, tol))
    if np.any(outside):
        raise InfeasibleControl(f"{int(outside.sum())} portfolio values lie outside the cone")
    return _report("primal_variational_inequality", cones.normal_cone_margin(cone, pi, G, tol), tol)


@dataclass(frozen=True)
class DualConditionReport:
    initial_wealth: ConditionReport
    portfolio_in_cone: ConditionReport
    subgradient: ConditionReport

    @property
    def passed(self) -> bool:
        return self.initial_wealth.passed and self.portfolio_in_cone.passed and self.subgradient.passed

    def to_dict(self) -> dict:
        return {
            "initial_wealth": self.initial_wealth.to_dict(),
            "portfolio_in_cone": self.portfolio_in_cone.to_dict(),
            "subgradient": self.subgradient.to_dict(),
            "passed": self.passed,
        }


def _fenchel_gaps(bundle, cost, cone, x, portfolio):
    """Per-(path, interval) Fenchel-Young gap, ``inf`` where phi is infinite."""
    P, n, dim = portfolio.shape
    alpha = np.zeros((P, n)) if bundle.alpha is None else bundle.alpha
    beta = bundle.beta
    if not cost.has_running_cost:
        finite = (alpha == 0) & np.asarray(cones.contains(cone.polar, beta.reshape(-1, dim))).reshape(P, n)
        gap = -np.einsum("pki,pki->pk", portfolio, beta)
        return np.where(finite, np.abs(gap), np.inf)
    gaps = np.empty((P, n))
    for p in range(P):
        for k in range(n):
            gaps[p, k] = conjugates.fenchel_gap(cost, cone, k, alpha[p, k], beta[p, k], x[p, k], portfolio[p, k])
    return np.abs(gaps)


def dual_condition_check(bundle: PathBundle, market: MarketModel, cost: QuadraticCost, cone: Cone, x0: float,
                         tol: float = 1e-6) -> DualConditionReport:
    """``p2(0) = x0``, ``[sigma']^{-1} q2 in K`` and ``(p2, [sigma']^{-1} q2)`` a subgradient of phi."""
    _require(bundle, "Y", "p2", "q2", "beta")
    P, dim = bundle.n_paths, bundle.dim
    _, sigma, _ = _tables(market, P)
    portfolio = np.linalg.solve(np.swapaxes(sigma, -1, -2), bundle.q2[..., None])[..., 0]
    initial = _report("initial_wealth", np.abs(bundle.p2[:, 0] - x0), tol)
    in_cone = _report("portfolio_in_cone", cones.distance(cone, portfolio.reshape(-1, dim)), tol)
    gaps = _fenchel_gaps(bundle, cost, cone, bundle.p2[:, :-1], portfolio)
    return DualConditionReport(initial, in_cone, _report("subgradient", gaps, tol))


@dataclass(frozen=True)
class ResidualReport:
    l2: float
    max: float
    terminal: float
    per_step_rms: np.ndarray

    def to_dict(self) -> dict:
        return {"l2": self.l2, "max": self.max, "terminal": self.terminal}


def _residual_report(residual, terminal) -> ResidualReport:
    return ResidualReport(
        l2=float(np.sqrt(np.mean(residual**2))),
        max=float(np.max(np.abs(residual))),
        terminal=float(np.max(np.abs(terminal))),
        per_step_rms=np.sqrt(np.mean(residual**2, axis=0)),
    )


def primal_bsde_residual(bundle: PathBundle, market: MarketModel, cost: QuadraticCost) -> ResidualReport:
    _require(bundle, "X", "pi", "p1", "q1")
    P = bundle.n_paths
    r, _, _ = _tables(market, P)
    Q, S, _ = _cost_tables(cost, P)
    dt = bundle.grid.dt
    p1, X = bundle.p1, bundle.X
    drift = -r * p1[:, :-1] + Q * X[:, :-1] + np.einsum("pki,pki->pk", np.broadcast_to(S, bundle.pi.shape), bundle.pi)
    residual = np.diff(p1, axis=1) - drift * dt - np.einsum("pki,pki->pk", bundle.q1, bundle.dW)
    terminal = p1[:, -1] + cost.a * X[:, -1] + cost.c
    return _residual_report(residual, terminal)


def dual_bsde_residual(bundle: PathBundle, market: MarketModel, cost: QuadraticCost) -> ResidualReport:
    _require(bundle, "Y", "p2", "q2")
    P = bundle.n_paths
    r, _, theta = _tables(market, P)
    dt = bundle.grid.dt
    p2 = bundle.p2
    drift = r * p2[:, :-1] + np.einsum("pki,pki->pk", bundle.q2, theta)
    residual = np.diff(p2, axis=1) - drift * dt - np.einsum("pki,pki->pk", bundle.q2, bundle.dW)
    terminal = p2[:, -1] + (bundle.Y[:, -1] + cost.c) / cost.a
    return _residual_report(residual, terminal)


def dual_to_primal_map(bundle: PathBundle, market: MarketModel) -> PathBundle:
    """``pi = [sigma']^{-1} q2``, ``X = p2``, ``p1 = Y``, ``q1 = sigma^{-1} beta - theta Y``."""
    _require(bundle, "Y", "p2", "q2", "beta")
    _, sigma, theta = _tables(market, bundle.n_paths)
    pi = np.linalg.solve(np.swapaxes(sigma, -1, -2), bundle.q2[..., None])[..., 0]
    q1 = np.linalg.solve(sigma, bundle.beta[..., None])[..., 0] - theta * bundle.Y[:, :-1, None]
    return bundle.replace(pi=pi, X=bundle.p2.copy(), p1=bundle.Y.copy(), q1=q1, x0=float(bundle.p2[0, 0]))


def primal_to_dual_map(bundle: PathBundle, market: MarketModel, cost: QuadraticCost) -> PathBundle:
    """``y = p1(0)``, ``alpha = Q X + S'pi``, ``beta = sigma(q1 + theta p1)``, ``Y = p1``, ``p2 = X``, ``q2 = sigma'pi``."""
    _require(bundle, "X", "pi", "p1", "q1")
    P = bundle.n_paths
    _, sigma, theta = _tables(market, P)
    Q, S, _ = _cost_tables(cost, P)
    X = bundle.X[:, :-1]
    alpha = Q * X + np.einsum("pki,pki->pk", np.broadcast_to(S, bundle.pi.shape), bundle.pi)
    beta = np.einsum("pkij,pkj->pki", sigma, bundle.q1 + theta * bundle.p1[:, :-1, None])
    q2 = np.einsum("pkji,pkj->pki", sigma, bundle.pi)
    return bundle.replace(
        y0=float(bundle.p1[0, 0]), alpha=alpha, beta=beta, Y=bundle.p1.copy(), p2=bundle.X.copy(), q2=q2,
    )


def dual_bundle_from_solution(solution: ConeQRMSolution, dW, scheme: str = sde_sim.EXACT) -> PathBundle:
    """Optimal dual paths: ``Y`` with loading ``eta``, ``p2 = -Y / P``, ``q2 = eta p2``, ``beta = gamma Y``."""
    problem = solution.problem
    market = problem.market
    dW = np.asarray(dW, dtype=float)
    Y = sde_sim.simulate_dual(market, solution.y_hat, dW, eta=solution.eta, scheme=scheme)
    if problem.x0 == 0:
        p2 = np.zeros_like(Y)
    else:
        p2 = -Y / solution.P_hat[None, :]
    q2 = solution.eta[None] * p2[:, :-1, None]
    beta = solution.gamma_hat[None] * Y[:, :-1, None]
    alpha = np.zeros(Y[:, :-1].shape)
    return PathBundle(problem.grid, dW, y0=solution.y_hat, Y=Y, p2=p2, q2=q2, alpha=alpha, beta=beta)
