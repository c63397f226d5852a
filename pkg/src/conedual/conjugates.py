"""Quadratic cost functions and their convex conjugates.

The running cost is ``f(x, pi) = (Q x^2 + 2 x S'pi + pi'R pi) / 2`` and the
terminal cost ``g(x) = (a x^2 + 2 c x) / 2``.  The conjugate of the running
cost restricted to the portfolio cone,

    phi(alpha, beta) = sup_{x, pi in K} x alpha + pi'beta - f(x, pi),

is computed exactly when the reduced quadratic is positive definite and by
projected-gradient ascent otherwise.  Infinite values are returned as
``math.inf`` together with ``finite=False``; they are never approximated
by large floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import cones
from .cones import Cone
from .errors import DimensionMismatch, NonConvergence, NonpositiveA

PSD_TOL = 1e-10
PG_MAX_ITER = 100_000
PG_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """Per-interval tables ``Q: (n,)``, ``S: (n, N)``, ``R: (n, N, N)``.

    ``a`` and ``c`` are scalars or per-path terminal draws of shape ``(P,)``.
    """

    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    a: float | np.ndarray
    c: float | np.ndarray = 0.0

    def __post_init__(self):
        Q = np.atleast_1d(np.asarray(self.Q, dtype=float))
        S = np.asarray(self.S, dtype=float)
        R = np.asarray(self.R, dtype=float)
        n = Q.shape[0]
        if S.ndim != 2 or S.shape[0] != n:
            raise DimensionMismatch(f"S must have shape ({n}, N), got {S.shape}")
        dim = S.shape[1]
        if R.shape != (n, dim, dim):
            raise DimensionMismatch(f"R must have shape {(n, dim, dim)}, got {R.shape}")
        if not np.allclose(R, np.swapaxes(R, 1, 2), rtol=0, atol=1e-12):
            raise ValueError("R must be symmetric")
        block = np.zeros((n, dim + 1, dim + 1))
        block[:, 0, 0] = Q
        block[:, 0, 1:] = S
        block[:, 1:, 0] = S
        block[:, 1:, 1:] = R
        min_eig = np.linalg.eigvalsh(block)[:, 0].min()
        if min_eig < -PSD_TOL:
            raise ValueError(f"cost block [[Q, S'], [S, R]] is not nonnegative definite (min eig {min_eig:.3e})")
        a = np.asarray(self.a, dtype=float)
        c = np.asarray(self.c, dtype=float)
        if not np.all(a > 0):
            raise NonpositiveA("terminal weight a must be positive")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "a", float(a) if a.ndim == 0 else a)
        object.__setattr__(self, "c", float(c) if c.ndim == 0 else c)

    @classmethod
    def terminal_only(cls, n_steps, dim, a, c=0.0):
        """No running cost: ``Q = S = R = 0``."""
        return cls(np.zeros(n_steps), np.zeros((n_steps, dim)), np.zeros((n_steps, dim, dim)), a, c)

    @classmethod
    def constant(cls, n_steps, Q, S, R, a, c=0.0):
        S = np.atleast_1d(np.asarray(S, dtype=float))
        R = np.atleast_2d(np.asarray(R, dtype=float))
        return cls(
            np.full(n_steps, float(Q)),
            np.broadcast_to(S, (n_steps,) + S.shape).copy(),
            np.broadcast_to(R, (n_steps,) + R.shape).copy(),
            a,
            c,
        )

    @property
    def dim(self) -> int:
        return self.S.shape[1]

    @property
    def n_steps(self) -> int:
        return self.Q.shape[0]

    @property
    def has_running_cost(self) -> bool:
        return bool(np.any(self.Q != 0) or np.any(self.S != 0) or np.any(self.R != 0))


def running_cost(cost: QuadraticCost, k: int, x, pi):
    """``f(x, pi)`` on interval ``k``; broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    pi = np.asarray(pi, dtype=float)
    quad = np.einsum("...i,ij,...j->...", pi, cost.R[k], pi)
    return 0.5 * (cost.Q[k] * x * x + 2.0 * x * (pi @ cost.S[k]) + quad)


def terminal_cost(cost: QuadraticCost, x):
    x = np.asarray(x, dtype=float)
    return 0.5 * (cost.a * x * x + 2.0 * cost.c * x)


def m_T(cost: QuadraticCost, y):
    """Conjugate of the terminal cost, ``sup_x -x y - g(x) = (y + c)^2 / (2a)``."""
    if not np.all(np.asarray(cost.a) > 0):
        raise NonpositiveA("terminal weight a must be positive")
    y = np.asarray(y, dtype=float)
    return (y + cost.c) ** 2 / (2.0 * cost.a)


def m_0(x0, y):
    """Conjugate of the indicator of ``{x0}``."""
    return x0 * np.asarray(y, dtype=float)


@dataclass(frozen=True)
class PhiResult:
    value: float
    x: float | None = None
    pi: np.ndarray | None = None
    regime: str = ""

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)


def _infinite(regime):
    return PhiResult(math.inf, None, None, regime)


def _recession_slope(cone: Cone, b: np.ndarray, null: np.ndarray) -> float:
    """Norm of the projection of ``b`` onto ``cone`` intersected with ``span(null)``.

    Positive exactly when there is a feasible flat direction with positive slope.
    """
    if null.shape[1] == cone.dim:
        d = cone.project(b)
    else:
        sub = cones.Subspace(null.T, cone.dim)
        d = cones.dykstra([cone.project, sub.project], b)
    return float(np.linalg.norm(d))


def _maximize_concave_quadratic(cone: Cone, b: np.ndarray, M: np.ndarray, regime: str, const: float):
    """``sup_{pi in K} b'pi - pi'M pi / 2`` with ``M`` symmetric PSD."""
    dim = cone.dim
    M = 0.5 * (M + M.T)
    eigval, eigvec = np.linalg.eigh(M)
    top = max(eigval[-1], 0.0)
    flat = eigval <= 1e-12 * max(1.0, top)
    scale = 1.0 + np.linalg.norm(b)
    if not flat.any():
        # exact: with M = L L', maximise over z = L'pi in L'K
        L = np.linalg.cholesky(M)
        target = np.linalg.solve(L, b)
        z = cones.linear_image(cone, L.T).project(target)
        pi = np.linalg.solve(L.T, z)
    else:
        if _recession_slope(cone, b, eigvec[:, flat]) > 1e-9 * scale:
            return None
        pi = _projected_gradient(cone, b, M, top)
    value = const + float(b @ pi - 0.5 * pi @ M @ pi)
    return value, pi


def _projected_gradient(cone, b, M, lipschitz):
    pi = np.zeros(cone.dim)
    if lipschitz <= 0:
        return pi  # M == 0 and b in the polar cone: the supremum 0 is attained at 0
    step = 1.0 / lipschitz

    def obj(p):
        return b @ p - 0.5 * p @ M @ p

    for _ in range(PG_MAX_ITER):
        grad = b - M @ pi
        t = step
        while True:
            cand = cone.project(pi + t * grad)
            # Armijo condition for ascent along the projected arc
            if obj(cand) >= obj(pi) + (grad @ (cand - pi)) - 0.5 / t * np.sum((cand - pi) ** 2) - 1e-15:
                break
            t *= 0.5
        moved = np.linalg.norm(cand - pi) / t
        pi = cand
        if moved <= PG_TOL * (1.0 + np.linalg.norm(b)):
            return pi
    raise NonConvergence("projected-gradient ascent hit the iteration cap", residual=float(moved))


def phi(cost: QuadraticCost, cone: Cone, k: int, alpha: float, beta) -> PhiResult:
    """Conjugate of the running cost over ``R x K`` at ``(alpha, beta)``.

    Returns the value and, when finite, a maximiser ``(x*, pi*)``.
    """
    beta = np.asarray(beta, dtype=float)
    Q, S, R = float(cost.Q[k]), cost.S[k], cost.R[k]
    if Q > 0:
        # eliminate x via x*(pi) = (alpha - S'pi) / Q
        b = beta - alpha * S / Q
        M = R - np.outer(S, S) / Q
        const = alpha * alpha / (2.0 * Q)
        regime = "reduced"
    else:
        # Q = 0 forces S = 0 under the definiteness assumption; alpha must vanish
        if alpha != 0.0:
            return _infinite("degenerate")
        b, M, const = beta, R, 0.0
        regime = "support" if not np.any(R) else "degenerate"
    if regime == "support":
        value = cones.support_function(cone, b)
        if not math.isfinite(value):
            return _infinite(regime)
        return PhiResult(0.0, 0.0, np.zeros(cone.dim), regime)
    solved = _maximize_concave_quadratic(cone, b, M, regime, const)
    if solved is None:
        return _infinite(regime)
    value, pi = solved
    x = (alpha - S @ pi) / Q if Q > 0 else 0.0
    return PhiResult(value, float(x), pi, regime)


def fenchel_gap(cost: QuadraticCost, cone: Cone, k: int, alpha, beta, x, pi) -> float:
    """``phi(alpha, beta) + f(x, pi) - x alpha - pi'beta``; zero iff ``(x, pi)`` is a subgradient."""
    res = phi(cost, cone, k, alpha, beta)
    if not res.finite:
        return math.inf
    pi = np.asarray(pi, dtype=float)
    return float(res.value + running_cost(cost, k, x, pi) - x * alpha - pi @ np.asarray(beta, dtype=float))


def fenchel_check(cost, cone, k, alpha, beta, x, pi, tol: float = cones.VARIATIONAL_TOL) -> bool:
    """Whether ``(x, pi)`` lies in the subdifferential of ``phi`` at ``(alpha, beta)``.

    A portfolio outside the cone is never a subgradient and yields ``False``.
    """
    if not cones.contains(cone, pi, tol):
        return False
    return fenchel_gap(cost, cone, k, alpha, beta, x, pi) <= tol
