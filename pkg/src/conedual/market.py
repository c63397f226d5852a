"""Market coefficients, market price of risk and state-price densities.

Coefficients are piecewise constant on the intervals of a uniform
:class:`TimeGrid` (left-endpoint convention), so every time integral is an
exact interval sum.  A model is *deterministic* when its tables carry one
entry per interval; passing an extra leading path axis gives the
random-coefficient mode, where each path has its own (adapted) tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DimensionMismatch, SingularVolatility

MAX_CONDITION = 1e12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k T / n_steps`` on ``[0, T]``."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon!r}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps!r}")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def points(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.horizon / self.n_steps
        t[-1] = self.horizon
        return t

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.horizon, self.n_steps * factor)


@dataclass(frozen=True, eq=False)
class MarketModel:
    """Bank account rate ``r``, stock drifts ``b`` and volatilities ``sigma``.

    Shapes are ``r: (n,)``, ``b: (n, N)``, ``sigma: (n, N, N)`` for a
    deterministic model, or the same with a leading path axis ``P`` for
    per-path coefficient tables.
    """

    grid: TimeGrid
    r: np.ndarray
    b: np.ndarray
    sigma: np.ndarray
    nondegeneracy_k: float = 1e-8

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        b = np.asarray(self.b, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        n = self.grid.n_steps
        if sigma.ndim not in (3, 4) or sigma.shape[-1] != sigma.shape[-2]:
            raise DimensionMismatch(f"sigma must have shape (..., n, N, N), got {sigma.shape}")
        lead = sigma.shape[:-2]
        dim = sigma.shape[-1]
        if lead[-1] != n:
            raise DimensionMismatch(f"sigma has {lead[-1]} intervals, grid has {n}")
        if r.shape != lead:
            raise DimensionMismatch(f"r must have shape {lead}, got {r.shape}")
        if b.shape != lead + (dim,):
            raise DimensionMismatch(f"b must have shape {lead + (dim,)}, got {b.shape}")
        for name, arr in (("r", r), ("b", b), ("sigma", sigma)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        if not self.nondegeneracy_k > 0:
            raise ValueError("nondegeneracy_k must be positive")
        for name, arr in (("r", r), ("b", b), ("sigma", sigma)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def constant(cls, grid, r, b, sigma, nondegeneracy_k=1e-8):
        """Model with the same coefficients on every interval."""
        n = grid.n_steps
        b = np.atleast_1d(np.asarray(b, dtype=float))
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        return cls(
            grid,
            np.full(n, float(r)),
            np.broadcast_to(b, (n,) + b.shape).copy(),
            np.broadcast_to(sigma, (n,) + sigma.shape).copy(),
            nondegeneracy_k,
        )

    @classmethod
    def from_theta(cls, grid, r, theta, sigma, nondegeneracy_k=1e-8):
        """Constant model parametrised by its market price of risk."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        b = float(r) + sigma @ theta
        return cls.constant(grid, r, b, sigma, nondegeneracy_k)

    @property
    def dim(self) -> int:
        return self.sigma.shape[-1]

    @property
    def deterministic(self) -> bool:
        return self.r.ndim == 1

    @property
    def n_paths(self) -> int | None:
        return None if self.deterministic else self.r.shape[0]

    @cached_property
    def theta(self) -> np.ndarray:
        """Market price of risk table, shape ``(..., n, N)``."""
        return _solve_checked(self.sigma, self.b - self.r[..., None])

    @cached_property
    def sigma_inv(self) -> np.ndarray:
        self.theta  # runs the conditioning check
        return np.linalg.inv(self.sigma)

    @cached_property
    def sigma_t_inv(self) -> np.ndarray:
        return np.swapaxes(self.sigma_inv, -1, -2)

    def interval(self, k: int, path: int | None = None):
        """``(r, sigma, theta)`` on interval ``k`` (of one path, if per-path)."""
        if self.deterministic or path is None:
            return self.r[..., k], self.sigma[..., k, :, :], self.theta[..., k, :]
        return self.r[path, k], self.sigma[path, k], self.theta[path, k]


def _solve_checked(sigma, rhs):
    cond = np.linalg.cond(sigma)
    if not np.all(np.isfinite(cond)) or np.any(cond > MAX_CONDITION):
        worst = float(np.max(np.where(np.isfinite(cond), cond, np.inf)))
        raise SingularVolatility(f"volatility condition number {worst:.3e} exceeds {MAX_CONDITION:.0e}")
    return np.linalg.solve(sigma, rhs[..., None])[..., 0]


def market_price_of_risk(model: MarketModel, k: int) -> np.ndarray:
    """Solve ``sigma theta = b - r 1`` on interval ``k``."""
    sigma = model.sigma[..., k, :, :]
    excess = model.b[..., k, :] - model.r[..., k, None]
    return _solve_checked(sigma, excess)


@dataclass(frozen=True)
class NondegeneracyReport:
    min_eigenvalues: np.ndarray  # per interval, minimum over paths
    minimum: float
    threshold: float
    passed: bool


def validate_nondegeneracy(model: MarketModel) -> NondegeneracyReport:
    """Smallest eigenvalue of ``sigma sigma'`` per interval against ``k``.

    Failure is reported, never raised.
    """
    gram = model.sigma @ np.swapaxes(model.sigma, -1, -2)
    eig = np.linalg.eigvalsh(gram)[..., 0]
    if not model.deterministic:
        eig = eig.min(axis=0)
    minimum = float(eig.min())
    return NondegeneracyReport(eig, minimum, model.nondegeneracy_k, minimum >= model.nondegeneracy_k)


def _check_noise(model: MarketModel, noise) -> np.ndarray:
    noise = np.asarray(noise, dtype=float)
    n, dim = model.grid.n_steps, model.dim
    if noise.ndim < 2 or noise.shape[-2:] != (n, dim):
        raise DimensionMismatch(f"noise must end with shape ({n}, {dim}), got {noise.shape}")
    return noise


def geometric_path(log_drift, loading, noise, dt) -> np.ndarray:
    """``exp`` of cumulative ``log_drift * dt + loading . dW`` with value 1 at t=0.

    ``log_drift`` already includes the Ito correction.
    """
    incr = log_drift * dt + np.sum(loading * noise, axis=-1)
    logs = np.cumsum(incr, axis=-1)
    out = np.empty(logs.shape[:-1] + (logs.shape[-1] + 1,))
    out[..., 0] = 1.0
    out[..., 1:] = np.exp(logs)
    return out


def state_price_density_path(model: MarketModel, noise) -> np.ndarray:
    """State-price density ``Gamma`` on the grid, exact exponential scheme.

    ``noise`` holds Brownian increments, shape ``(n, N)`` or ``(P, n, N)``.
    """
    noise = _check_noise(model, noise)
    loading = -model.theta
    drift = -model.r - 0.5 * np.sum(loading * loading, axis=-1)
    return geometric_path(drift, loading, noise, model.grid.dt)


def hat_H_path(model: MarketModel, gamma_hat, noise) -> np.ndarray:
    """Exponential with drift ``-r - |l|^2/2`` and loading ``l = sigma^{-1} gamma - theta``.

    With ``gamma_hat = 0`` this reproduces :func:`state_price_density_path`
    bit for bit on the same noise.
    """
    noise = _check_noise(model, noise)
    gamma_hat = np.asarray(gamma_hat, dtype=float)
    lead = model.theta.shape
    if gamma_hat.shape[-2:] != lead[-2:]:
        raise DimensionMismatch(f"gamma_hat must end with shape {lead[-2:]}, got {gamma_hat.shape}")
    sigma = model.sigma
    if gamma_hat.ndim > sigma.ndim - 1:
        sigma = np.broadcast_to(sigma, gamma_hat.shape[:-1] + sigma.shape[-2:])
    scaled = _solve_checked(sigma, gamma_hat)
    loading = scaled - model.theta
    drift = -model.r - 0.5 * np.sum(loading * loading, axis=-1)
    return geometric_path(drift, loading, noise, model.grid.dt)
