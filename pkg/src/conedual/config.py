"""Run configuration: a strict JSON schema and conversion to model objects."""

from __future__ import annotations

import json
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import cones
from .conjugates import QuadraticCost
from .errors import SchemaError
from .market import MarketModel, TimeGrid

SCHEMA_VERSION = 1
MODES = ("solve", "simulate", "verify", "oracle", "gap")

Number = float
Vector = list[float]
Matrix = list[list[float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MarketSpec(_Strict):
    r: Number | Vector
    sigma: Matrix | list[Matrix]
    b: Vector | Matrix | None = None
    theta: Vector | Matrix | None = None
    nondegeneracy_k: float = Field(1e-8, gt=0)

    @model_validator(mode="after")
    def _one_drift(self):
        if (self.b is None) == (self.theta is None):
            raise ValueError("give exactly one of b or theta")
        return self


class ConeSpec(_Strict):
    type: Literal["full", "zero", "orthant", "rays", "halfspaces", "subspace"]
    vectors: Matrix | None = None


class CostSpec(_Strict):
    a: float = Field(gt=0)
    c: float = 0.0
    Q: Number | Vector = 0.0
    S: Vector | Matrix | None = None
    R: Matrix | list[Matrix] | None = None


class ProblemSpec(_Strict):
    T: float = Field(gt=0)
    n_steps: int = Field(gt=0)
    x0: float
    market: MarketSpec
    cone: ConeSpec
    cost: CostSpec


class SimSpec(_Strict):
    n_paths: int = Field(10_000, ge=2)
    seed: int = Field(0, ge=0, lt=2**64)
    scheme: Literal["euler", "exact_exponential"] = "exact_exponential"
    antithetic: bool = False
    batch_size: int = Field(4096, gt=0)
    workers: int = Field(1, gt=0)


class OracleSpec(_Strict):
    n_steps: int | None = Field(None, gt=0)
    noise: Literal["binomial", "gauss_hermite"] | None = None
    gh_nodes: int = Field(7, ge=2)


class OutputSpec(_Strict):
    dir: str = "out"
    per_path_csv: bool = False


class ToleranceSpec(_Strict):
    check: float = Field(1e-6, gt=0)
    gap_sigmas: float = Field(3.0, gt=0)
    oracle_rel: float = Field(0.01, gt=0)


class RunConfig(_Strict):
    schema_version: Literal[1]
    mode: Literal["solve", "simulate", "verify", "oracle", "gap"] = "solve"
    problem: ProblemSpec
    sim: SimSpec = SimSpec()
    oracle: OracleSpec = OracleSpec()
    output: OutputSpec = OutputSpec()
    tolerances: ToleranceSpec = ToleranceSpec()


_SCHEMA_ERRORS = {"missing", "extra_forbidden", "model_type", "model_attributes_type"}
_UNION_TAGS = {"float", "int", "str", "bool", "function-after"}


def _field_path(loc) -> str:
    parts = []
    for item in loc:
        if isinstance(item, int):
            parts.append(f"[{item}]")
        elif "[" in item or item in _UNION_TAGS:
            continue
        else:
            parts.append(("." if parts else "") + item)
    return "".join(parts)


def parse_config(text: str) -> RunConfig:
    """Validate JSON text into a :class:`RunConfig`.

    Missing or unknown fields raise :class:`SchemaError` carrying the dotted
    field path; malformed or out-of-range values raise ``ValueError``.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON: {exc}") from None
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        errors = exc.errors()
        structural = [e for e in errors if e["type"] in _SCHEMA_ERRORS]
        err = structural[0] if structural else errors[0]
        path = _field_path(err["loc"])
        if structural:
            raise SchemaError(path, err["msg"]) from None
        raise ValueError(f"{path}: {err['msg']} (got {err.get('input')!r})") from None


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _per_interval(value, n, tail_shape, name):
    arr = np.asarray(value, dtype=float)
    if arr.shape == tail_shape:
        return np.broadcast_to(arr, (n,) + tail_shape).copy()
    if arr.shape == (n,) + tail_shape:
        return arr
    raise ValueError(f"{name} must have shape {tail_shape} or {(n,) + tail_shape}, got {arr.shape}")


def build_grid(spec: ProblemSpec) -> TimeGrid:
    return TimeGrid(spec.T, spec.n_steps)


def build_market(spec: ProblemSpec, grid: TimeGrid | None = None) -> MarketModel:
    grid = grid or build_grid(spec)
    n = grid.n_steps
    m = spec.market
    sigma0 = np.asarray(m.sigma, dtype=float)
    dim = sigma0.shape[-1]
    sigma = _per_interval(m.sigma, n, (dim, dim), "market.sigma")
    r = _per_interval(m.r, n, (), "market.r")
    if m.b is not None:
        b = _per_interval(m.b, n, (dim,), "market.b")
    else:
        theta = _per_interval(m.theta, n, (dim,), "market.theta")
        b = r[:, None] + np.einsum("kij,kj->ki", sigma, theta)
    return MarketModel(grid, r, b, sigma, m.nondegeneracy_k)


def build_cone(spec: ProblemSpec, dim: int) -> cones.Cone:
    return cones.parse_cone(spec.cone.model_dump(exclude_none=True), dim)


def build_cost(spec: ProblemSpec, dim: int, n_steps: int | None = None) -> QuadraticCost:
    n = n_steps or spec.n_steps
    c = spec.cost
    Q = _per_interval(c.Q, n, (), "cost.Q")
    S = np.zeros((n, dim)) if c.S is None else _per_interval(c.S, n, (dim,), "cost.S")
    R = np.zeros((n, dim, dim)) if c.R is None else _per_interval(c.R, n, (dim, dim), "cost.R")
    return QuadraticCost(Q, S, R, c.a, c.c)
