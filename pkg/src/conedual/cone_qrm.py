"""Closed-form quadratic risk minimisation under a portfolio cone constraint.

Primal problem: minimise ``E[a X(T)^2 / 2]`` over portfolios ``pi(t) in K``
with deterministic, piecewise-constant market coefficients.  The dual
problem is solved explicitly; everything else (value, Riccati solution,
feedback) follows from the two projections

    u_plus  = proj_C(+theta),   u_minus = proj_C(-theta),   C = sigma^{-1} K°,

taken once per grid interval.  Sign conventions:

* the dual state ``Y`` has sign ``-sign(x0)`` and moves as
  ``dY = -r Y dt + eta Y dW`` with ``eta = sign(y) * sigma_field(y)``;
* the Riccati solution is ``P(t) = a exp(int_t^T 2r - |sigma_field(-x0)|^2)``;
* the optimal portfolio is ``pi = [sigma']^{-1} eta * X``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import cones
from .cones import Cone
from .errors import DimensionMismatch, NonpositiveA, ZeroInitialWealth
from .market import MarketModel

PLUS = "plus"
MINUS = "minus"
IDENTITY_TOL = 1e-10


def _sign(y: float) -> float:
    return float(np.sign(y))


def branch_for_wealth(x0: float) -> str:
    """Riccati branch governing positive (``plus``) or negative (``minus``) wealth."""
    return MINUS if x0 < 0 else PLUS


def hamiltonian_minimum(sigma, theta, cone: Cone, P: float, Lambda, branch: str):
    """Minimise ``P v'sigma sigma'v +/- 2 v'sigma(theta P + Lambda)`` over ``v in K``.

    Substituting ``w = sigma'v`` turns this into a projection of
    ``-/+ (theta P + Lambda) / P`` onto ``sigma'K``.  Returns ``(H*, v*)``.
    """
    if not P > 0:
        raise ValueError(f"P must be positive, got {P!r}")
    sigma = np.asarray(sigma, dtype=float)
    lin = np.asarray(theta, dtype=float) * P + np.asarray(Lambda, dtype=float)
    sgn = 1.0 if branch == PLUS else -1.0
    image = cones.linear_image(cone, sigma.T)
    w = image.project(-sgn * lin / P)
    value = float(P * w @ w + 2.0 * sgn * w @ lin)
    v = np.linalg.solve(sigma.T, w)
    return value, v


@dataclass(frozen=True, eq=False)
class ConeQRMProblem:
    market: MarketModel
    cone: Cone
    a: float
    x0: float

    def __post_init__(self):
        if not self.market.deterministic:
            raise ValueError("closed-form solution requires deterministic market coefficients")
        if self.cone.dim != self.market.dim:
            raise DimensionMismatch(f"cone dimension {self.cone.dim} != market dimension {self.market.dim}")
        if not self.a > 0:
            raise NonpositiveA(f"terminal weight a must be positive, got {self.a!r}")
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "x0", float(self.x0))

    @property
    def grid(self):
        return self.market.grid

    @cached_property
    def _projections(self):
        """Per-interval ``(u_plus, u_minus)`` tables, shape ``(n, N)`` each."""
        polar = cones.polar(self.cone)
        theta = self.market.theta
        u_plus = np.empty_like(theta)
        u_minus = np.empty_like(theta)
        for k in range(self.grid.n_steps):
            transformed = cones.linear_image(polar, self.market.sigma_inv[k])
            u_plus[k] = transformed.project(theta[k])
            u_minus[k] = transformed.project(-theta[k])
        return u_plus, u_minus

    @cached_property
    def _field_tables(self):
        """``sigma_field`` for ``y > 0`` and ``y < 0``."""
        u_plus, u_minus = self._projections
        theta = self.market.theta
        return u_plus - theta, u_minus + theta

    def beta_branch(self, k: int, branch: str) -> np.ndarray:
        """``argmin_{beta in K°} |sigma^{-1} beta -/+ theta|^2`` on interval ``k``."""
        u_plus, u_minus = self._projections
        u = u_plus[k] if branch == PLUS else u_minus[k]
        return self.market.sigma[k] @ u

    def sigma_field(self, k: int, y: float) -> np.ndarray:
        positive, negative = self._field_tables
        if y > 0:
            return positive[k].copy()
        if y < 0:
            return negative[k].copy()
        return np.zeros(self.market.dim)

    def signed_dual_volatility(self, k: int, y: float) -> np.ndarray:
        """Loading of ``dY / Y`` for the optimal dual state of sign ``sign(y)``."""
        return _sign(y) * self.sigma_field(k, y)

    def _field_norms(self, y: float) -> np.ndarray:
        if y == 0:
            return np.zeros(self.grid.n_steps)
        table = self._field_tables[0] if y > 0 else self._field_tables[1]
        return np.sum(table * table, axis=1)

    def _tail_sums(self, rate: np.ndarray) -> np.ndarray:
        """``sum_{j >= k} rate_j dt`` for ``k = 0..n``; the last entry is 0."""
        out = np.zeros(self.grid.n_steps + 1)
        out[:-1] = np.cumsum((rate * self.grid.dt)[::-1])[::-1]
        return out

    def dual_value_function(self, t_index: int, y: float) -> float:
        """``v(t, y) = y^2 exp(sum_{j >= t} (-2r + |sigma_field|^2) dt)``."""
        tail = self._tail_sums(-2.0 * self.market.r + self._field_norms(y))
        return float(y * y * np.exp(tail[t_index]))

    def _riccati_exponent(self) -> np.ndarray:
        # x0 = 0 uses the positive-wealth branch, the natural value function at 0+
        y = -self.x0 if self.x0 != 0 else -1.0
        return self._tail_sums(2.0 * self.market.r - self._field_norms(y))

    def optimal_y(self) -> float:
        return float(-self.a * self.x0 * np.exp(self._tail_sums(2.0 * self.market.r - self._field_norms(-self.x0))[0]))

    def sre_solution(self, k: int | None = None):
        """``P(t_k)``; with ``k=None`` the whole table on the ``n + 1`` grid points."""
        table = self.a * np.exp(self._riccati_exponent())
        return table if k is None else float(table[k])

    def optimal_beta(self, k: int) -> np.ndarray:
        if self.x0 > 0:
            return self.x0 * self.sre_solution(k) * self.beta_branch(k, MINUS)
        if self.x0 < 0:
            return -self.x0 * self.sre_solution(k) * self.beta_branch(k, PLUS)
        return np.zeros(self.market.dim)

    def optimal_feedback(self, k: int) -> np.ndarray:
        """``xi`` with ``pi = xi * X``."""
        if self.x0 == 0:
            raise ZeroInitialWealth("feedback is undefined for zero initial wealth; the optimal portfolio is 0")
        eta = self.signed_dual_volatility(k, -self.x0)
        return np.linalg.solve(self.market.sigma[k].T, eta)

    def hamiltonian_min(self, k: int, P: float, Lambda, branch: str):
        return hamiltonian_minimum(self.market.sigma[k], self.market.theta[k], self.cone, P, Lambda, branch)

    def sre_residual(self, P, Lambda=None, branch: str | None = None, noise=None) -> "SREResidual":
        """Residuals ``P_{k+1} - P_k + (2 r P_k + H*(P_k, Lambda_k)) dt - Lambda_k'dW_k``."""
        P = np.asarray(P, dtype=float)
        n, dim = self.grid.n_steps, self.market.dim
        if P.shape != (n + 1,):
            raise DimensionMismatch(f"P must have shape ({n + 1},), got {P.shape}")
        if np.any(P <= 0):
            raise ValueError("P must be positive on the grid")
        Lambda = np.zeros((n, dim)) if Lambda is None else np.asarray(Lambda, dtype=float)
        branch = branch or branch_for_wealth(self.x0)
        dt = self.grid.dt
        residual = np.empty(n)
        for k in range(n):
            h, _ = self.hamiltonian_min(k, P[k], Lambda[k], branch)
            martingale = 0.0 if noise is None else float(Lambda[k] @ noise[k])
            residual[k] = P[k + 1] - P[k] + (2.0 * self.market.r[k] * P[k] + h) * dt - martingale
        return SREResidual(
            per_step=residual,
            max=float(np.max(np.abs(residual))),
            l2=float(np.sqrt(np.mean(residual**2))),
            sum_abs=float(np.sum(np.abs(residual))),
            terminal=float(abs(P[-1] - self.a)),
        )


@dataclass(frozen=True)
class SREResidual:
    per_step: np.ndarray
    max: float
    l2: float
    sum_abs: float
    terminal: float

    def to_dict(self) -> dict:
        return {"max": self.max, "l2": self.l2, "sum_abs": self.sum_abs, "terminal": self.terminal}


@dataclass(frozen=True, eq=False)
class ConeQRMSolution:
    problem: ConeQRMProblem
    y_hat: float
    beta_plus: np.ndarray
    beta_minus: np.ndarray
    sigma_field: np.ndarray
    eta: np.ndarray
    beta_hat: np.ndarray
    P_hat: np.ndarray
    xi_hat: np.ndarray
    gamma_hat: np.ndarray
    J_star: float
    Psi_star: float
    checks: dict = field(default_factory=dict)

    @property
    def all_checks_pass(self) -> bool:
        return all(self.checks.values())

    def table(self) -> tuple[list[str], np.ndarray]:
        """Time-indexed columns ``t, P_hat, beta_hat_i, sigma_field_i, xi_hat_i``.

        Interval quantities are reported at their left endpoint; the final
        row repeats the last interval.
        """
        dim = self.beta_hat.shape[1]
        header = ["t", "P_hat"]
        for name in ("beta_hat", "sigma_field", "xi_hat"):
            header += [f"{name}_{i + 1}" for i in range(dim)]
        t = self.problem.grid.points

        def extend(a):
            return np.vstack([a, a[-1:]])

        body = np.column_stack([t, self.P_hat, extend(self.beta_hat), extend(self.sigma_field), extend(self.xi_hat)])
        return header, body


def solve(problem: ConeQRMProblem) -> ConeQRMSolution:
    n, dim = problem.grid.n_steps, problem.market.dim
    x0 = problem.x0
    y_hat = problem.optimal_y()
    beta_plus = np.array([problem.beta_branch(k, PLUS) for k in range(n)])
    beta_minus = np.array([problem.beta_branch(k, MINUS) for k in range(n)])
    field_table = np.array([problem.sigma_field(k, y_hat) for k in range(n)])
    eta = np.array([problem.signed_dual_volatility(k, y_hat) for k in range(n)])
    beta_hat = np.array([problem.optimal_beta(k) for k in range(n)])
    P_hat = problem.sre_solution()
    if x0 == 0:
        xi_hat = np.zeros((n, dim))
    else:
        xi_hat = np.array([problem.optimal_feedback(k) for k in range(n)])
    # beta = gamma * Y along the optimal dual path
    gamma_hat = np.einsum("kij,kj->ki", problem.market.sigma, eta + problem.market.theta) if x0 else np.zeros((n, dim))
    rates = 2.0 * problem.market.r - np.sum(field_table * field_table, axis=1)
    J_star = 0.5 * problem.a * x0 * x0 * np.exp(np.sum(rates) * problem.grid.dt)
    Psi_star = x0 * y_hat + problem.dual_value_function(0, y_hat) / (2.0 * problem.a)
    polar = cones.polar(problem.cone)
    scale = 1.0 + abs(J_star)
    checks = {
        "y_hat_sign": bool(np.sign(y_hat) == -np.sign(x0)),
        "P_hat_terminal": bool(abs(P_hat[-1] - problem.a) <= IDENTITY_TOL * problem.a),
        "P_hat_positive": bool(np.all(P_hat > 0)),
        "beta_hat_in_polar": bool(np.all(cones.contains(polar, beta_hat))),
        "feedback_feasible": bool(np.all(cones.contains(problem.cone, np.sign(x0) * xi_hat))),
        "zero_duality_gap": bool(abs(J_star + Psi_star) <= IDENTITY_TOL * scale),
        "value_identity": bool(abs(J_star - 0.5 * P_hat[0] * x0 * x0) <= IDENTITY_TOL * scale),
    }
    for arr in (beta_plus, beta_minus, field_table, eta, beta_hat, P_hat, xi_hat, gamma_hat):
        arr.setflags(write=False)
    return ConeQRMSolution(
        problem, float(y_hat), beta_plus, beta_minus, field_table, eta, beta_hat, P_hat, xi_hat,
        gamma_hat, float(J_star), float(Psi_star), checks,
    )
